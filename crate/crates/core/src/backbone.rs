//! Feature pyramid encoders.
//!
//! Encoders are looked up by name. `tiny` is a small from-scratch CNN
//! that trains on a CPU; larger pretrained networks plug in through the
//! [`Encoder`] trait and a weight file.

use std::path::PathBuf;

use candle_core::{Module, Tensor};
use candle_nn::GroupNorm;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{group_norm, Conv, ConvOpts};
use crate::params::ParamScope;
use crate::types::{FeaturePyramid, PyramidSource, LEVELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub name: String,
    pub channels_per_level: Vec<usize>,
    pub pretrained: bool,
    /// safetensors file with the encoder weights, used when `pretrained`.
    pub weights: Option<PathBuf>,
    /// Common width every level is projected to with a 1x1 convolution.
    pub project_width: Option<usize>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            name: "tiny".into(),
            channels_per_level: vec![16, 32, 64, 128],
            pretrained: false,
            weights: None,
            project_width: None,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels_per_level.len() != LEVELS {
            return Err(Error::Config(format!(
                "encoder.channels_per_level needs {LEVELS} entries, got {}",
                self.channels_per_level.len()
            )));
        }
        if self.channels_per_level.contains(&0) || self.project_width == Some(0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.pretrained && self.weights.is_none() {
            return Err(Error::Config("pretrained encoder needs a weights path".into()));
        }
        Ok(())
    }

    /// Channel count of each pyramid level after optional projection.
    pub fn output_channels(&self) -> Vec<usize> {
        match self.project_width {
            Some(w) => vec![w; LEVELS],
            None => self.channels_per_level.clone(),
        }
    }
}

/// A network producing four feature maps at strides 4, 8, 16, 32.
pub trait Encoder {
    fn in_channels(&self) -> usize;
    fn level_channels(&self) -> Vec<usize>;
    fn forward_levels(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

struct Stage {
    conv: Conv,
    norm: GroupNorm,
    down: Conv,
}

/// Stride-2 stem followed by four `conv3x3 -> GN -> ReLU -> conv3x3/2`
/// stages.
pub struct TinyEncoder {
    stem: Conv,
    stem_norm: GroupNorm,
    stages: Vec<Stage>,
    channels: Vec<usize>,
}

impl TinyEncoder {
    pub fn new(scope: &ParamScope, in_channels: usize, channels: &[usize]) -> Result<Self> {
        let stem_width = channels[0];
        let stem = Conv::new(
            &scope.pp("stem"),
            in_channels,
            stem_width,
            ConvOpts::k3().stride(2),
        )?;
        let stem_norm = group_norm(&scope.pp("stem_norm"), stem_width)?;
        let mut stages = Vec::with_capacity(LEVELS);
        let mut prev = stem_width;
        for (i, &c) in channels.iter().enumerate() {
            let s = scope.pp(format!("stage{}", i + 1));
            stages.push(Stage {
                conv: Conv::new(&s.pp("conv"), prev, c, ConvOpts::k3())?,
                norm: group_norm(&s.pp("norm"), c)?,
                down: Conv::new(&s.pp("down"), c, c, ConvOpts::k3().stride(2))?,
            });
            prev = c;
        }
        Ok(Self {
            stem,
            stem_norm,
            stages,
            channels: channels.to_vec(),
        })
    }
}

impl Encoder for TinyEncoder {
    fn in_channels(&self) -> usize {
        3
    }

    fn level_channels(&self) -> Vec<usize> {
        self.channels.clone()
    }

    fn forward_levels(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = self.stem_norm.forward(&self.stem.forward(x)?)?.relu()?;
        let mut levels = Vec::with_capacity(LEVELS);
        for stage in &self.stages {
            let t = stage.norm.forward(&stage.conv.forward(&h)?)?.relu()?;
            h = stage.down.forward(&t)?;
            levels.push(h.clone());
        }
        Ok(levels)
    }
}

/// Looks up an encoder architecture by name.
pub fn build_encoder(scope: &ParamScope, spec: &EncoderSpec) -> Result<Box<dyn Encoder>> {
    spec.validate()?;
    match spec.name.as_str() {
        "tiny" => Ok(Box::new(TinyEncoder::new(scope, 3, &spec.channels_per_level)?)),
        other => Err(Error::UnknownEncoder(other.to_string())),
    }
}

/// An encoder plus the optional per-level width projection, tagged with the
/// modality it encodes.
pub struct PyramidEncoder {
    inner: Box<dyn Encoder>,
    projections: Option<Vec<Conv>>,
    source: PyramidSource,
}

impl PyramidEncoder {
    pub fn new(scope: &ParamScope, spec: &EncoderSpec, source: PyramidSource) -> Result<Self> {
        let inner = build_encoder(&scope.pp("body"), spec)?;
        let projections = match spec.project_width {
            Some(w) => Some(
                inner
                    .level_channels()
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| Conv::new(&scope.pp(format!("proj{}", i + 1)), c, w, ConvOpts::k1()))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        Ok(Self {
            inner,
            projections,
            source,
        })
    }

    pub fn output_channels(&self) -> Vec<usize> {
        match &self.projections {
            Some(p) => p.iter().map(|c| c.out_channels).collect(),
            None => self.inner.level_channels(),
        }
    }

    /// Encodes a `(B, C, H, W)` batch. Single-channel input is replicated
    /// when the encoder expects three channels.
    pub fn encode(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, _, _) = x.dims4()?;
        let want = self.inner.in_channels();
        let x = if c == 1 && want == 3 {
            Tensor::cat(&[x, x, x], 1)?
        } else if c == want {
            x.clone()
        } else {
            return Err(Error::shape("encoder input channels", want, c));
        };
        let mut levels = self.inner.forward_levels(&x)?;
        if let Some(proj) = &self.projections {
            levels = levels
                .iter()
                .zip(proj)
                .map(|(l, p)| p.forward(l).map_err(Error::from))
                .collect::<Result<Vec<_>>>()?;
        }
        Ok(FeaturePyramid {
            levels,
            source: self.source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::types::validate_pyramid;
    use candle_core::{DType, Device};

    fn encoder(store: &ParamStore, spec: &EncoderSpec, source: PyramidSource) -> PyramidEncoder {
        PyramidEncoder::new(&store.root().pp("enc"), spec, source).unwrap()
    }

    #[test]
    fn tiny_pyramid_shapes_at_256() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let spec = EncoderSpec::default();
        let enc = encoder(&store, &spec, PyramidSource::RgbEncoder);
        let x = Tensor::rand(0f32, 1f32, (2, 3, 256, 256), &Device::Cpu).unwrap();
        let p = enc.encode(&x).unwrap();
        assert_eq!(
            p.shapes(),
            vec![
                vec![2, 16, 64, 64],
                vec![2, 32, 32, 32],
                vec![2, 64, 16, 16],
                vec![2, 128, 8, 8]
            ]
        );
        validate_pyramid(&p, 256).unwrap();
    }

    #[test]
    fn tiny_pyramid_shapes_at_64() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let enc = encoder(&store, &EncoderSpec::default(), PyramidSource::RgbEncoder);
        let x = Tensor::rand(0f32, 1f32, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let p = enc.encode(&x).unwrap();
        let sides: Vec<usize> = p.levels.iter().map(|l| l.dims()[2]).collect();
        assert_eq!(sides, vec![16, 8, 4, 2]);
    }

    #[test]
    fn unknown_encoder_name() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let spec = EncoderSpec {
            name: "bogus".into(),
            ..Default::default()
        };
        let err = PyramidEncoder::new(&store.root(), &spec, PyramidSource::RgbEncoder)
            .err()
            .unwrap();
        assert!(matches!(err, Error::UnknownEncoder(n) if n == "bogus"));
    }

    #[test]
    fn depth_matches_rgb_shapes_and_batches() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let spec = EncoderSpec::default();
        let rgb = PyramidEncoder::new(&store.root().pp("rgb"), &spec, PyramidSource::RgbEncoder).unwrap();
        let depth =
            PyramidEncoder::new(&store.root().pp("depth"), &spec, PyramidSource::DepthEncoder).unwrap();
        let x = Tensor::rand(0f32, 1f32, (4, 3, 64, 64), &Device::Cpu).unwrap();
        let d = Tensor::zeros((4, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let pr = rgb.encode(&x).unwrap();
        let pd = depth.encode(&d).unwrap();
        assert_eq!(pr.shapes(), pd.shapes());
        assert!(pd.shapes().iter().all(|s| s[0] == 4));
        assert_eq!(pd.source, PyramidSource::DepthEncoder);
        for l in &pd.levels {
            let v = l.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|a| a.is_finite()));
        }
    }

    #[test]
    fn projection_sets_common_width() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let spec = EncoderSpec {
            project_width: Some(24),
            ..Default::default()
        };
        let enc = encoder(&store, &spec, PyramidSource::RgbEncoder);
        let x = Tensor::rand(0f32, 1f32, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let p = enc.encode(&x).unwrap();
        assert!(p.levels.iter().all(|l| l.dims()[1] == 24));
        assert_eq!(enc.output_channels(), vec![24; 4]);
    }

    #[test]
    fn identical_seeds_give_identical_outputs() {
        let run = || {
            let store = ParamStore::new(DType::F32, Device::Cpu, 3);
            let enc = encoder(&store, &EncoderSpec::default(), PyramidSource::RgbEncoder);
            let x = Tensor::ones((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
            enc.encode(&x).unwrap().levels[3]
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradient_reaches_the_input() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let enc = encoder(&store, &EncoderSpec::default(), PyramidSource::RgbEncoder);
        let x = candle_core::Var::from_tensor(
            &Tensor::rand(0f32, 1f32, (1, 3, 32, 32), &Device::Cpu).unwrap(),
        )
        .unwrap();
        let p = enc.encode(x.as_tensor()).unwrap();
        let mut total = p.levels[0].sum_all().unwrap();
        for l in &p.levels[1..] {
            total = (total + l.sum_all().unwrap()).unwrap();
        }
        let grads = total.backward().unwrap();
        let g = grads.get(x.as_tensor()).unwrap();
        let g = g.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(g > 0.0);
    }
}
