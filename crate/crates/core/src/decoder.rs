//! Coarse-to-fine saliency decoder with ASPP refinement.

use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, sigmoid, Conv, ConvOpts};
use crate::params::ParamScope;
use crate::types::LEVELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsppSpec {
    pub rates: Vec<usize>,
}

impl Default for AsppSpec {
    fn default() -> Self {
        Self {
            rates: vec![1, 6, 12, 18],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    Add,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub merge: MergeMode,
    pub width: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            merge: MergeMode::Add,
            width: 64,
        }
    }
}

/// Parallel dilated 3x3 convolutions, concatenated and mixed by a 1x1
/// convolution. Spatial size is preserved.
pub struct Aspp {
    branches: Vec<Conv>,
    project: Conv,
}

impl Aspp {
    pub fn new(scope: &ParamScope, in_channels: usize, out_channels: usize, spec: &AsppSpec) -> Result<Self> {
        if spec.rates.is_empty() || spec.rates.contains(&0) {
            return Err(Error::Config("aspp.rates must be non-empty and positive".into()));
        }
        let branches = spec
            .rates
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                Conv::new(
                    &scope.pp(format!("branch{}", i + 1)),
                    in_channels,
                    out_channels,
                    ConvOpts::k3().dilation(r),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let project = Conv::new(
            &scope.pp("project"),
            spec.rates.len() * out_channels,
            out_channels,
            ConvOpts::k1(),
        )?;
        Ok(Self { branches, project })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h < 3 || w < 3 {
            return Err(Error::InputTooSmall { height: h, width: w });
        }
        let parts = self
            .branches
            .iter()
            .map(|b| b.forward(x).and_then(|t| t.relu()))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(self.project.forward(&Tensor::cat(&parts, 1)?)?)
    }
}

/// Merges one finer level with the already-merged coarser stack.
pub struct MergeStep {
    aspp: Aspp,
    mix: Option<Conv>,
}

impl MergeStep {
    pub fn new(scope: &ParamScope, width: usize, aspp: &AsppSpec, mode: MergeMode) -> Result<Self> {
        let mix = match mode {
            MergeMode::Add => None,
            MergeMode::Concat => Some(Conv::new(&scope.pp("mix"), 2 * width, width, ConvOpts::k1())?),
        };
        Ok(Self {
            aspp: Aspp::new(&scope.pp("aspp"), width, width, aspp)?,
            mix,
        })
    }

    /// `aspp(fine)` fused with `coarse` upsampled to the fine resolution.
    pub fn merge_adjacent(&self, fine: &Tensor, coarse: &Tensor) -> Result<Tensor> {
        let (fb, fc, fh, fw) = fine.dims4()?;
        let (cb, cc, ch, cw) = coarse.dims4()?;
        if fb != cb || fc != cc || ch * 2 != fh || cw * 2 != fw {
            return Err(Error::shape(
                "coarse level",
                format!("({fb}, {fc}, {}, {})", fh / 2, fw / 2),
                coarse.dims(),
            ));
        }
        let up = resize_bilinear(coarse, fh, fw)?;
        let refined = self.aspp.forward(fine)?;
        match &self.mix {
            None => Ok((refined + up)?),
            Some(mix) => Ok(mix.forward(&Tensor::cat(&[&refined, &up], 1)?)?),
        }
    }
}

pub struct SaliencyDecoder {
    projections: Vec<Conv>,
    merges: Vec<MergeStep>,
    head3: Conv,
    head1: Conv,
}

impl SaliencyDecoder {
    pub fn new(scope: &ParamScope, channels: &[usize], config: &DecoderConfig, aspp: &AsppSpec) -> Result<Self> {
        let w = config.width;
        if w == 0 {
            return Err(Error::Config("decoder.width must be positive".into()));
        }
        let projections = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv::new(&scope.pp(format!("proj{}", i + 1)), c, w, ConvOpts::k1()))
            .collect::<Result<Vec<_>>>()?;
        let merges = (1..LEVELS)
            .map(|i| MergeStep::new(&scope.pp(format!("merge{i}")), w, aspp, config.merge))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            projections,
            merges,
            head3: Conv::new(&scope.pp("head3"), w, w, ConvOpts::k3())?,
            head1: Conv::zeroed(&scope.pp("head1"), w, 1, ConvOpts::k1())?,
        })
    }

    pub fn merge_step(&self, level: usize) -> &MergeStep {
        &self.merges[level]
    }

    /// Folds the merge from the coarsest level down to level 1, then
    /// applies `conv3x3 -> conv1x1 -> sigmoid` and resizes to the input.
    pub fn decode(&self, fused: &[Tensor], target_size: usize) -> Result<Tensor> {
        if fused.len() != LEVELS {
            return Err(Error::MissingLevel(fused.len()));
        }
        let mut x = self.projections[LEVELS - 1].forward(&fused[LEVELS - 1])?;
        for i in (0..LEVELS - 1).rev() {
            let fine = self.projections[i].forward(&fused[i])?;
            x = self.merges[i].merge_adjacent(&fine, &x)?;
        }
        let logits = self.head1.forward(&self.head3.forward(&x)?)?;
        resize_bilinear(&sigmoid(&logits)?, target_size, target_size)
    }
}
