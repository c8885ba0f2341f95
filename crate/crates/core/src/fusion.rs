//! Depth-induced fusion of RGB and depth features at each pyramid level.
//!
//! * DAM: channel attention (conv3x3 + global average pooling) and a
//!   spatial softmax gate, both computed from the depth features, applied
//!   to the depth-dispelled RGB features.
//! * DGM: a non-local block whose similarity comes from the depth-aware
//!   RGB features and whose values come from the depth features.
//! * DIM: a sigmoid attention map over `[F_dgm, F_dam]` gates the depth
//!   features; the three branches are summed.

use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::softmax_last_dim;
use crate::nn::{global_avg_pool, sigmoid, Conv, ConvOpts};
use crate::params::ParamScope;
use crate::types::{FusionOutputs, LevelFusion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgmConfig {
    /// Row-softmax over the similarity matrix.
    pub softmax: bool,
    /// Largest number of spatial positions the similarity matrix may span.
    pub hw_cap: usize,
}

impl Default for DgmConfig {
    fn default() -> Self {
        Self {
            softmax: true,
            hw_cap: 4096,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimConfig {
    /// `None` gives one attention channel per feature channel; `Some(1)`
    /// gives a single spatial gate shared by all channels.
    pub attention_channels: Option<usize>,
}

fn same_shape(context: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(context, a.dims(), b.dims()));
    }
    if a.rank() != 4 {
        return Err(Error::shape(context, "(B, C, H, W)", a.dims()));
    }
    Ok(())
}

/// Depth-awareness module.
pub struct Dam {
    channel: Conv,
    spatial: Conv,
}

impl Dam {
    pub fn new(scope: &ParamScope, channels: usize) -> Result<Self> {
        Ok(Self {
            channel: Conv::new(&scope.pp("channel"), channels, channels, ConvOpts::k3())?,
            spatial: Conv::new(&scope.pp("spatial"), channels, 1, ConvOpts::k3())?,
        })
    }

    /// `(B, C, 1, 1)` channel weights.
    pub fn channel_attention(&self, d: &Tensor) -> Result<Tensor> {
        global_avg_pool(&self.channel.forward(d)?)
    }

    /// `(B, 1, H, W)` spatial gate: softmax over all positions, scaled by
    /// `H * W` so the mean gate is one.
    pub fn spatial_attention(&self, d: &Tensor) -> Result<Tensor> {
        let s = self.spatial.forward(d)?;
        let (b, _, h, w) = s.dims4()?;
        let flat = softmax_last_dim(&s.reshape((b, h * w))?)?;
        Ok((flat * (h * w) as f64)?.reshape((b, 1, h, w))?)
    }

    pub fn forward(&self, r_s: &Tensor, d: &Tensor) -> Result<Tensor> {
        same_shape("DAM inputs", r_s, d)?;
        apply_dam(
            &self.spatial_attention(d)?,
            &self.channel_attention(d)?,
            r_s,
        )
    }
}

/// `spatial ⊗ (channel ⊙ r_s)` with broadcasting.
pub fn apply_dam(spatial: &Tensor, channel: &Tensor, r_s: &Tensor) -> Result<Tensor> {
    Ok(spatial.broadcast_mul(&channel.broadcast_mul(r_s)?)?)
}

/// Non-local aggregation. `query` is `(B, C, N)`, `key` and `value` are
/// `(B, N, C)`. Returns the aggregated `(B, N, C)` values and the `(B, N, N)`
/// similarity matrix `key · query`, row-normalized when `softmax` is set.
pub fn non_local(query: &Tensor, key: &Tensor, value: &Tensor, softmax: bool) -> Result<(Tensor, Tensor)> {
    let sim = key.matmul(query)?;
    let sim = if softmax {
        softmax_last_dim(&sim)?
    } else {
        sim
    };
    Ok((sim.matmul(value)?, sim))
}

/// Depth-gated module.
pub struct Dgm {
    query: Conv,
    key: Conv,
    value: Conv,
    out: Conv,
    config: DgmConfig,
}

impl Dgm {
    pub fn new(scope: &ParamScope, channels: usize, config: &DgmConfig) -> Result<Self> {
        Ok(Self {
            query: Conv::new(&scope.pp("query"), channels, channels, ConvOpts::k3())?,
            key: Conv::new(&scope.pp("key"), channels, channels, ConvOpts::k3())?,
            value: Conv::new(&scope.pp("value"), channels, channels, ConvOpts::k3())?,
            out: Conv::new(&scope.pp("out"), channels, channels, ConvOpts::k3())?,
            config: config.clone(),
        })
    }

    fn check_cap(&self, h: usize, w: usize) -> Result<()> {
        if h * w > self.config.hw_cap {
            return Err(Error::SpatialTooLarge {
                hw: h * w,
                cap: self.config.hw_cap,
            });
        }
        Ok(())
    }

    /// Returns the aggregated features before the output convolution, as a
    /// `(B, C, H, W)` map, together with the similarity matrix.
    pub fn aggregate(&self, r_d: &Tensor, d: &Tensor) -> Result<(Tensor, Tensor)> {
        same_shape("DGM inputs", r_d, d)?;
        let (b, c, h, w) = r_d.dims4()?;
        self.check_cap(h, w)?;
        let n = h * w;
        let query = self.query.forward(r_d)?.reshape((b, c, n))?;
        let key = self.key.forward(r_d)?.reshape((b, c, n))?.transpose(1, 2)?.contiguous()?;
        let value = self.value.forward(d)?.reshape((b, c, n))?.transpose(1, 2)?.contiguous()?;
        let (agg, sim) = non_local(&query, &key, &value, self.config.softmax)?;
        let agg = agg.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        Ok((agg, sim))
    }

    pub fn similarity(&self, r_d: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = r_d.dims4()?;
        self.check_cap(h, w)?;
        let n = h * w;
        let query = self.query.forward(r_d)?.reshape((b, c, n))?;
        let key = self.key.forward(r_d)?.reshape((b, c, n))?.transpose(1, 2)?.contiguous()?;
        let sim = key.matmul(&query)?;
        Ok(if self.config.softmax {
            softmax_last_dim(&sim)?
        } else {
            sim
        })
    }

    pub fn forward(&self, r_d: &Tensor, d: &Tensor) -> Result<Tensor> {
        let (agg, _) = self.aggregate(r_d, d)?;
        Ok(self.out.forward(&agg)?)
    }
}

/// Plain concatenation followed by a 1x1 convolution; stands in for a
/// removed fusion module in ablations.
pub struct ConcatFuse {
    proj: Conv,
    inputs: usize,
}

impl ConcatFuse {
    pub fn new(scope: &ParamScope, channels: usize, inputs: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv::new(&scope.pp("proj"), inputs * channels, channels, ConvOpts::k1())?,
            inputs,
        })
    }

    pub fn forward(&self, xs: &[&Tensor]) -> Result<Tensor> {
        if xs.len() != self.inputs {
            return Err(Error::shape("concat fusion inputs", self.inputs, xs.len()));
        }
        for x in &xs[1..] {
            same_shape("concat fusion inputs", xs[0], x)?;
        }
        Ok(self.proj.forward(&Tensor::cat(xs, 1)?)?)
    }
}

pub enum DamPath {
    Attention(Dam),
    Concat(ConcatFuse),
}

pub enum DgmPath {
    NonLocal(Dgm),
    Concat(ConcatFuse),
}

/// Depth-induced fusion at one level.
pub struct DimLevel {
    pub dam: DamPath,
    pub dgm: DgmPath,
    attention: Conv,
}

impl DimLevel {
    pub fn dam_fuse(&self, r_s: &Tensor, d: &Tensor) -> Result<Tensor> {
        match &self.dam {
            DamPath::Attention(m) => m.forward(r_s, d),
            DamPath::Concat(m) => m.forward(&[r_s, d]),
        }
    }

    pub fn dgm_fuse(&self, r_d: &Tensor, d: &Tensor) -> Result<Tensor> {
        match &self.dgm {
            DgmPath::NonLocal(m) => m.forward(r_d, d),
            DgmPath::Concat(m) => m.forward(&[r_d, d]),
        }
    }

    /// `sigmoid(conv3x3([F_dgm, F_dam]))`.
    pub fn attention(&self, f_dam: &Tensor, f_dgm: &Tensor) -> Result<Tensor> {
        same_shape("attention inputs", f_dam, f_dgm)?;
        let cat = Tensor::cat(&[f_dgm, f_dam], 1)?;
        sigmoid(&self.attention.forward(&cat)?)
    }

    pub fn fuse(&self, r_s: &Tensor, r_d: &Tensor, d: &Tensor) -> Result<LevelFusion> {
        same_shape("DIM inputs", r_s, r_d)?;
        same_shape("DIM inputs", r_s, d)?;
        let f_dam = self.dam_fuse(r_s, d)?;
        let f_dgm = self.dgm_fuse(r_d, d)?;
        let attention = self.attention(&f_dam, &f_dgm)?;
        let f_d = attention.broadcast_mul(d)?;
        let fused = ((&f_dam + &f_dgm)? + &f_d)?;
        Ok(LevelFusion {
            fused,
            attention: Some(attention),
            dam: Some(f_dam),
            dgm: Some(f_dgm),
            depth_gated: Some(f_d),
        })
    }
}

/// Which fusion variant every level uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionVariant {
    pub dam: bool,
    pub dgm: bool,
    pub dim: bool,
    /// Without a depth branch the RGB features are fused with depth by DAM
    /// alone.
    pub depth_branch: bool,
}

impl Default for FusionVariant {
    fn default() -> Self {
        Self {
            dam: true,
            dgm: true,
            dim: true,
            depth_branch: true,
        }
    }
}

pub enum LevelFuser {
    Dim(DimLevel),
    Concat(ConcatFuse),
    DamOnly(Dam),
}

impl LevelFuser {
    pub fn new(
        scope: &ParamScope,
        channels: usize,
        variant: FusionVariant,
        dgm: &DgmConfig,
        dim: &DimConfig,
    ) -> Result<Self> {
        if !variant.depth_branch {
            return Ok(LevelFuser::DamOnly(Dam::new(&scope.pp("dam"), channels)?));
        }
        if !variant.dim {
            return Ok(LevelFuser::Concat(ConcatFuse::new(&scope.pp("concat"), channels, 3)?));
        }
        let dam = if variant.dam {
            DamPath::Attention(Dam::new(&scope.pp("dam"), channels)?)
        } else {
            DamPath::Concat(ConcatFuse::new(&scope.pp("dam_concat"), channels, 2)?)
        };
        let dgm = if variant.dgm {
            DgmPath::NonLocal(Dgm::new(&scope.pp("dgm"), channels, dgm)?)
        } else {
            DgmPath::Concat(ConcatFuse::new(&scope.pp("dgm_concat"), channels, 2)?)
        };
        let att_channels = match dim.attention_channels {
            None => channels,
            Some(1) => 1,
            Some(n) => {
                return Err(Error::Config(format!(
                    "dim.attention_channels must be 1 or unset, got {n}"
                )))
            }
        };
        let attention = Conv::new(&scope.pp("attention"), 2 * channels, att_channels, ConvOpts::k3())?;
        Ok(LevelFuser::Dim(DimLevel {
            dam,
            dgm,
            attention,
        }))
    }

    /// `r_d` is `None` only for the no-depth-branch variant, in which case
    /// `r_s` carries the undecoupled RGB features.
    pub fn forward(&self, r_s: &Tensor, r_d: Option<&Tensor>, d: &Tensor) -> Result<LevelFusion> {
        let missing = || Error::Config("fusion variant needs depth-aware features".into());
        match self {
            LevelFuser::Dim(m) => m.fuse(r_s, r_d.ok_or_else(missing)?, d),
            LevelFuser::Concat(m) => Ok(LevelFusion {
                fused: m.forward(&[r_s, r_d.ok_or_else(missing)?, d])?,
                attention: None,
                dam: None,
                dgm: None,
                depth_gated: None,
            }),
            LevelFuser::DamOnly(m) => {
                let f = m.forward(r_s, d)?;
                Ok(LevelFusion {
                    fused: f.clone(),
                    attention: None,
                    dam: Some(f),
                    dgm: None,
                    depth_gated: None,
                })
            }
        }
    }

    pub fn as_dim(&self) -> Option<&DimLevel> {
        match self {
            LevelFuser::Dim(m) => Some(m),
            _ => None,
        }
    }
}

pub struct Fusion {
    levels: Vec<LevelFuser>,
}

impl Fusion {
    pub fn new(
        scope: &ParamScope,
        channels: &[usize],
        variant: FusionVariant,
        dgm: &DgmConfig,
        dim: &DimConfig,
    ) -> Result<Self> {
        let levels = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| LevelFuser::new(&scope.pp(format!("level{}", i + 1)), c, variant, dgm, dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels })
    }

    pub fn level(&self, i: usize) -> &LevelFuser {
        &self.levels[i]
    }

    pub fn forward(
        &self,
        r_s: &[Tensor],
        r_d: Option<&[Tensor]>,
        d: &[Tensor],
    ) -> Result<FusionOutputs> {
        if r_s.len() != self.levels.len() || d.len() != self.levels.len() {
            return Err(Error::MissingLevel(r_s.len().min(d.len())));
        }
        let levels = self
            .levels
            .iter()
            .enumerate()
            .map(|(i, f)| f.forward(&r_s[i], r_d.map(|r| &r[i]), &d[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(FusionOutputs { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    fn rand(shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::rand(-1f32, 1f32, shape, &Device::Cpu).unwrap()
    }

    fn dim_level(store: &ParamStore, c: usize) -> LevelFuser {
        LevelFuser::new(
            &store.root(),
            c,
            FusionVariant::default(),
            &DgmConfig::default(),
            &DimConfig::default(),
        )
        .unwrap()
    }

    fn max_abs(t: &Tensor) -> f32 {
        t.abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap()
    }

    #[test]
    fn dam_shape_and_zero_input() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let dam = Dam::new(&store.root(), 8).unwrap();
        let d = rand((1, 8, 16, 16));
        let out = dam.forward(&rand((1, 8, 16, 16)), &d).unwrap();
        assert_eq!(out.dims(), &[1, 8, 16, 16]);
        let zero = dam.forward(&d.zeros_like().unwrap(), &d).unwrap();
        assert_eq!(max_abs(&zero), 0.0);
    }

    #[test]
    fn dam_with_unit_attention_is_identity() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let dam = Dam::new(&store.root(), 8).unwrap();
        // Zero kernels: channel weights equal the bias (1), spatial softmax
        // is uniform so the rescaled gate is 1 everywhere.
        for name in ["channel.weight", "spatial.weight"] {
            let w = store.get(name).unwrap();
            store.set(name, &w.zeros_like().unwrap()).unwrap();
        }
        let b = store.get("channel.bias").unwrap();
        store.set("channel.bias", &b.ones_like().unwrap()).unwrap();
        let r_s = rand((1, 8, 16, 16));
        let out = dam.forward(&r_s, &rand((1, 8, 16, 16))).unwrap();
        assert!(max_abs(&(out - &r_s).unwrap()) < 1e-6);
    }

    #[test]
    fn dgm_shape_cap_and_row_sums() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let dgm = Dgm::new(&store.root(), 8, &DgmConfig::default()).unwrap();
        let r_d = rand((1, 8, 16, 16));
        assert_eq!(dgm.forward(&r_d, &rand((1, 8, 16, 16))).unwrap().dims(), &[1, 8, 16, 16]);
        let sums = dgm.similarity(&r_d).unwrap().sum(2).unwrap();
        let sums = sums.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(sums.len(), 256);
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));

        let big = Tensor::zeros((1, 8, 128, 128), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            dgm.forward(&big, &big),
            Err(Error::SpatialTooLarge { hw: 16384, cap: 4096 })
        ));
    }

    #[test]
    fn attention_of_zero_inputs_is_one_half() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let level = dim_level(&store, 8);
        let w = store.get("attention.weight").unwrap();
        store.set("attention.weight", &w.zeros_like().unwrap()).unwrap();
        let z = Tensor::zeros((1, 8, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let a = level.as_dim().unwrap().attention(&z, &z).unwrap();
        assert_eq!(a.dims(), &[1, 8, 16, 16]);
        let v = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| *x == 0.5));
    }

    #[test]
    fn fused_output_is_the_exact_three_term_sum() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let level = dim_level(&store, 8);
        let out = level
            .forward(&rand((2, 8, 8, 8)), Some(&rand((2, 8, 8, 8))), &rand((2, 8, 8, 8)))
            .unwrap();
        let sum = ((out.dam.as_ref().unwrap() + out.dgm.as_ref().unwrap()).unwrap()
            + out.depth_gated.as_ref().unwrap())
        .unwrap();
        let a = out.fused.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = sum.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let att = out.attention.unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(att.iter().all(|x| *x > 0.0 && *x < 1.0));
    }

    #[test]
    fn zero_depth_leaves_only_dam() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let level = dim_level(&store, 4);
        let d = Tensor::zeros((1, 4, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let out = level
            .forward(&rand((1, 4, 8, 8)), Some(&rand((1, 4, 8, 8))), &d)
            .unwrap();
        assert_eq!(max_abs(out.depth_gated.as_ref().unwrap()), 0.0);
        assert_eq!(max_abs(out.dgm.as_ref().unwrap()), 0.0);
        let diff = (&out.fused - out.dam.as_ref().unwrap()).unwrap();
        assert_eq!(max_abs(&diff), 0.0);
    }

    #[test]
    fn single_channel_attention_broadcasts() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let level = LevelFuser::new(
            &store.root(),
            4,
            FusionVariant::default(),
            &DgmConfig::default(),
            &DimConfig {
                attention_channels: Some(1),
            },
        )
        .unwrap();
        let out = level
            .forward(&rand((1, 4, 8, 8)), Some(&rand((1, 4, 8, 8))), &rand((1, 4, 8, 8)))
            .unwrap();
        assert_eq!(out.attention.unwrap().dims(), &[1, 1, 8, 8]);
        assert_eq!(out.fused.dims(), &[1, 4, 8, 8]);
    }

    #[test]
    fn ablated_variants_build_and_run() {
        for variant in [
            FusionVariant { dam: false, ..Default::default() },
            FusionVariant { dgm: false, ..Default::default() },
            FusionVariant { dim: false, ..Default::default() },
            FusionVariant { depth_branch: false, ..Default::default() },
        ] {
            let store = ParamStore::new(DType::F32, Device::Cpu, 0);
            let f = LevelFuser::new(&store.root(), 4, variant, &DgmConfig::default(), &DimConfig::default())
                .unwrap();
            let r_d = rand((1, 4, 8, 8));
            let r_d = variant.depth_branch.then_some(&r_d);
            let out = f.forward(&rand((1, 4, 8, 8)), r_d, &rand((1, 4, 8, 8))).unwrap();
            assert_eq!(out.fused.dims(), &[1, 4, 8, 8]);
            assert_eq!(out.attention.is_some(), variant.dim && variant.depth_branch);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let dam = Dam::new(&store.root(), 4).unwrap();
        assert!(matches!(
            dam.forward(&rand((1, 4, 8, 8)), &rand((1, 4, 4, 4))),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
