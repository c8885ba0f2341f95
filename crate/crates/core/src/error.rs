use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("expected 4 pyramid levels, got {0}")]
    MissingLevel(usize),

    #[error("expected {expected} attention levels, got {actual}")]
    WrongLevelCount { expected: usize, actual: usize },

    #[error("unknown encoder `{0}`")]
    UnknownEncoder(String),

    #[error("non-local similarity over {hw} positions exceeds the cap of {cap}")]
    SpatialTooLarge { hw: usize, cap: usize },

    #[error("input {height}x{width} is smaller than 3x3")]
    InputTooSmall { height: usize, width: usize },

    #[error("{name}={value} is outside [{min}, {max}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("labeled batch is empty")]
    EmptyLabeledBatch,

    #[error("ground truth has no positive pixels")]
    EmptyGroundTruth,

    #[error("no valid pixels under the depth mask")]
    NoValidPixels,

    #[error("dataset at {0} is empty")]
    EmptyDataset(PathBuf),

    #[error("missing subdirectory {0}")]
    MissingSubdir(PathBuf),

    #[error("file stems do not match: {}", .0.join(", "))]
    StemMismatch(Vec<String>),

    #[error("cannot read image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("unsupported bit depth in {0}")]
    UnsupportedBitDepth(PathBuf),

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unsupported device `{0}`")]
    UnsupportedDevice(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
