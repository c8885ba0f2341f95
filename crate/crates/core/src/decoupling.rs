//! Depth decoupling: each RGB level is split into a depth-aware and a
//! depth-dispelled part, the two parts are fused back into a
//! reconstruction of the original features, and the depth-aware stack
//! drives the depth prediction head.

use candle_core::{Module, Tensor};

use crate::error::{Error, Result};
use crate::losses::mse;
use crate::nn::{resize_bilinear, sigmoid, Conv, ConvBlock, ConvOpts};
use crate::params::ParamScope;
use crate::types::{DecoupledFeatures, LEVELS};

pub struct LevelDecoupler {
    depth_aware: ConvBlock,
    depth_dispelled: ConvBlock,
    reconstruct: ConvBlock,
    channels: usize,
}

impl LevelDecoupler {
    pub fn new(scope: &ParamScope, channels: usize) -> Result<Self> {
        Ok(Self {
            depth_aware: ConvBlock::new(&scope.pp("depth_aware"), channels, channels)?,
            depth_dispelled: ConvBlock::new(&scope.pp("depth_dispelled"), channels, channels)?,
            reconstruct: ConvBlock::new(&scope.pp("reconstruct"), 2 * channels, channels)?,
            channels,
        })
    }

    fn check_channels(&self, t: &Tensor, what: &str) -> Result<()> {
        let c = t.dims4()?.1;
        if c != self.channels {
            return Err(Error::shape(what, self.channels, c));
        }
        Ok(())
    }

    /// Returns `(depth_aware, depth_dispelled)`.
    pub fn disentangle(&self, r: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_channels(r, "disentangle input channels")?;
        Ok((self.depth_aware.forward(r)?, self.depth_dispelled.forward(r)?))
    }

    /// Only the depth-aware half, for depth-only training.
    pub fn depth_aware(&self, r: &Tensor) -> Result<Tensor> {
        self.check_channels(r, "disentangle input channels")?;
        Ok(self.depth_aware.forward(r)?)
    }

    pub fn reconstruct(&self, r_d: &Tensor, r_s: &Tensor) -> Result<Tensor> {
        if r_d.dims() != r_s.dims() {
            return Err(Error::shape("reconstruct inputs", r_d.dims(), r_s.dims()));
        }
        self.check_channels(r_d, "reconstruct input channels")?;
        let cat = Tensor::cat(&[r_d, r_s], 1)?;
        Ok(self.reconstruct.forward(&cat)?)
    }
}

pub struct Decoupler {
    levels: Vec<LevelDecoupler>,
}

impl Decoupler {
    pub fn new(scope: &ParamScope, channels: &[usize]) -> Result<Self> {
        let levels = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| LevelDecoupler::new(&scope.pp(format!("level{}", i + 1)), c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels })
    }

    pub fn level(&self, i: usize) -> &LevelDecoupler {
        &self.levels[i]
    }

    pub fn forward(&self, rgb_levels: &[Tensor]) -> Result<DecoupledFeatures> {
        if rgb_levels.len() != self.levels.len() {
            return Err(Error::MissingLevel(rgb_levels.len()));
        }
        let mut out = DecoupledFeatures {
            depth_aware: Vec::with_capacity(LEVELS),
            depth_dispelled: Vec::with_capacity(LEVELS),
            reconstruction: Vec::with_capacity(LEVELS),
        };
        for (dec, r) in self.levels.iter().zip(rgb_levels) {
            let (r_d, r_s) = dec.disentangle(r)?;
            out.reconstruction.push(dec.reconstruct(&r_d, &r_s)?);
            out.depth_aware.push(r_d);
            out.depth_dispelled.push(r_s);
        }
        Ok(out)
    }

    pub fn depth_aware(&self, rgb_levels: &[Tensor]) -> Result<Vec<Tensor>> {
        if rgb_levels.len() != self.levels.len() {
            return Err(Error::MissingLevel(rgb_levels.len()));
        }
        self.levels
            .iter()
            .zip(rgb_levels)
            .map(|(d, r)| d.depth_aware(r))
            .collect()
    }
}

/// Mean squared error between a reconstruction and the original features.
pub fn reconstruction_loss(r_tilde: &Tensor, r: &Tensor) -> Result<Tensor> {
    mse(r_tilde, r)
}

/// Sum of the per-level reconstruction losses.
pub fn total_reconstruction_loss(features: &DecoupledFeatures, rgb_levels: &[Tensor]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (rt, r) in features.reconstruction.iter().zip(rgb_levels) {
        let l = reconstruction_loss(rt, r)?;
        total = Some(match total {
            Some(t) => (t + l)?,
            None => l,
        });
    }
    total.ok_or(Error::MissingLevel(0))
}

/// Upsamples the depth-aware stack to level-1 resolution, concatenates it,
/// applies `conv3x3 -> conv1x1 -> sigmoid` and resizes to the input size.
pub struct DepthHead {
    conv3: Conv,
    conv1: Conv,
}

impl DepthHead {
    pub fn new(scope: &ParamScope, channels: &[usize]) -> Result<Self> {
        let total: usize = channels.iter().sum();
        let hidden = channels[0];
        Ok(Self {
            conv3: Conv::new(&scope.pp("conv3"), total, hidden, ConvOpts::k3())?,
            conv1: Conv::zeroed(&scope.pp("conv1"), hidden, 1, ConvOpts::k1())?,
        })
    }

    pub fn predict(&self, depth_aware: &[Tensor], target_size: usize) -> Result<Tensor> {
        if depth_aware.len() != LEVELS {
            return Err(Error::MissingLevel(depth_aware.len()));
        }
        let (_, _, h, w) = depth_aware[0].dims4()?;
        let mut parts = Vec::with_capacity(LEVELS);
        parts.push(depth_aware[0].clone());
        for t in &depth_aware[1..] {
            parts.push(resize_bilinear(t, h, w)?);
        }
        let cat = Tensor::cat(&parts, 1)?;
        let x = self.conv1.forward(&self.conv3.forward(&cat)?)?;
        resize_bilinear(&sigmoid(&x)?, target_size, target_size)
    }
}
