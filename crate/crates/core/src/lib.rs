pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod kernels;
pub mod data;
pub mod decoder;
pub mod decoupling;
pub mod error;
pub mod fusion;
pub mod imageio;
pub mod losses;
pub mod mean_teacher;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod types;

pub use error::{Error, Result};
