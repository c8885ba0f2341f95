//! Shared value types: image planes with range invariants and the
//! multi-level feature containers passed between network stages.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array3, Axis};

use crate::error::{Error, Result};

/// Number of pyramid levels produced by every encoder.
pub const LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneKind {
    Rgb,
    Depth,
    Saliency,
    Mask,
}

impl PlaneKind {
    pub fn channels(self) -> usize {
        match self {
            PlaneKind::Rgb => 3,
            _ => 1,
        }
    }
}

/// A `C x H x W` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    kind: PlaneKind,
    data: Array3<f32>,
}

impl ImagePlane {
    pub fn new(kind: PlaneKind, data: Array3<f32>) -> Result<Self> {
        let c = data.len_of(Axis(0));
        if c != kind.channels() {
            return Err(Error::shape(
                format!("{kind:?} plane channels"),
                kind.channels(),
                c,
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange {
                name: "pixel value",
                value: *v as f64,
                min: 0.0,
                max: 1.0,
            });
        }
        if kind == PlaneKind::Mask {
            if let Some(v) = data.iter().find(|v| **v != 0.0 && **v != 1.0) {
                return Err(Error::OutOfRange {
                    name: "mask value",
                    value: *v as f64,
                    min: 0.0,
                    max: 1.0,
                });
            }
        }
        Ok(Self { kind, data })
    }

    /// Builds a plane from a `(C, H, W)` or `(1, C, H, W)` tensor, clamping
    /// into `[0, 1]` to absorb rounding at the range ends.
    pub fn from_tensor(kind: PlaneKind, t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::shape("plane tensor rank", "3 or 4", r)),
        };
        let (c, h, w) = t.dims3()?;
        let values = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        let data = Array3::from_shape_vec((c, h, w), values)
            .map_err(|e| Error::shape("plane tensor", (c, h, w), e.to_string()))?;
        let data = if kind == PlaneKind::Mask {
            data.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 })
        } else {
            data
        };
        Self::new(kind, data)
    }

    pub fn kind(&self) -> PlaneKind {
        self.kind
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn height(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn width(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (c, h, w) = self.data.dim();
        let values: Vec<f32> = self.data.iter().copied().collect();
        Ok(Tensor::from_vec(values, (1, c, h, w), device)?.to_dtype(dtype)?)
    }
}

/// Stacks planes of identical shape into a `(B, C, H, W)` tensor.
pub fn stack_planes(planes: &[&ImagePlane], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = planes
        .first()
        .ok_or_else(|| Error::shape("plane batch", ">= 1", 0))?;
    let dim = first.data.dim();
    let mut values = Vec::with_capacity(planes.len() * first.data.len());
    for p in planes {
        if p.data.dim() != dim {
            return Err(Error::shape("plane batch", dim, p.data.dim()));
        }
        values.extend(p.data.iter().copied());
    }
    Ok(Tensor::from_vec(values, (planes.len(), dim.0, dim.1, dim.2), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PyramidSource {
    RgbEncoder,
    DepthEncoder,
}

/// Four feature maps at strides 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub source: PyramidSource,
}

impl FeaturePyramid {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|t| t.dims().to_vec()).collect()
    }
}

/// Spatial side of pyramid level `level` (0-based) for a square input.
pub fn level_size(input_size: usize, level: usize) -> usize {
    input_size >> (level + 2)
}

/// Checks the level count, rank, batch agreement and per-level spatial
/// scale of a pyramid computed from an `input_size`-pixel square input.
pub fn validate_pyramid(p: &FeaturePyramid, input_size: usize) -> Result<()> {
    if p.levels.len() != LEVELS {
        return Err(Error::shape("pyramid level count", LEVELS, p.levels.len()));
    }
    let batch = p.levels[0].dims().first().copied().unwrap_or(0);
    for (i, t) in p.levels.iter().enumerate() {
        let dims = t.dims();
        let side = level_size(input_size, i);
        if dims.len() != 4 || dims[0] != batch || dims[2] != side || dims[3] != side {
            return Err(Error::shape(
                format!("pyramid level {}", i + 1),
                format!("({batch}, C, {side}, {side})"),
                dims,
            ));
        }
    }
    Ok(())
}

/// Per-level split of RGB features and their reconstruction.
#[derive(Debug, Clone)]
pub struct DecoupledFeatures {
    pub depth_aware: Vec<Tensor>,
    pub depth_dispelled: Vec<Tensor>,
    pub reconstruction: Vec<Tensor>,
}

/// Products of the depth-induced fusion at one level. Components are absent
/// when an ablation removes the module that produces them.
#[derive(Debug, Clone)]
pub struct LevelFusion {
    pub fused: Tensor,
    pub attention: Option<Tensor>,
    pub dam: Option<Tensor>,
    pub dgm: Option<Tensor>,
    pub depth_gated: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct FusionOutputs {
    pub levels: Vec<LevelFusion>,
}

impl FusionOutputs {
    pub fn fused(&self) -> Vec<Tensor> {
        self.levels.iter().map(|l| l.fused.clone()).collect()
    }

    /// Attention maps of every level that has one.
    pub fn attention_maps(&self) -> Vec<Tensor> {
        self.levels.iter().filter_map(|l| l.attention.clone()).collect()
    }
}

/// Saliency and depth predicted for a single image.
#[derive(Debug, Clone)]
pub struct PredictionPair {
    pub saliency: ImagePlane,
    pub depth: ImagePlane,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pyramid(sizes: &[usize], batch: usize) -> FeaturePyramid {
        let levels = sizes
            .iter()
            .map(|&s| Tensor::zeros((batch, 2, s, s), DType::F32, &Device::Cpu).unwrap())
            .collect();
        FeaturePyramid {
            levels,
            source: PyramidSource::RgbEncoder,
        }
    }

    #[test]
    fn accepts_standard_pyramid() {
        validate_pyramid(&pyramid(&[64, 32, 16, 8], 2), 256).unwrap();
        validate_pyramid(&pyramid(&[16, 8, 4, 2], 1), 64).unwrap();
    }

    #[test]
    fn rejects_three_levels() {
        let err = validate_pyramid(&pyramid(&[64, 32, 16], 1), 256).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn rejects_wrong_scale() {
        let err = validate_pyramid(&pyramid(&[64, 31, 16, 8], 1), 256).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn rejects_batch_disagreement() {
        let mut p = pyramid(&[64, 32, 16, 8], 2);
        p.levels[3] = Tensor::zeros((1, 2, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(validate_pyramid(&p, 256).is_err());
    }

    #[test]
    fn plane_invariants() {
        assert!(ImagePlane::new(PlaneKind::Rgb, Array3::zeros((1, 2, 2))).is_err());
        assert!(ImagePlane::new(PlaneKind::Depth, Array3::from_elem((1, 2, 2), 1.5)).is_err());
        assert!(ImagePlane::new(PlaneKind::Mask, Array3::from_elem((1, 2, 2), 0.5)).is_err());
        let p = ImagePlane::new(PlaneKind::Mask, Array3::from_elem((1, 2, 2), 1.0)).unwrap();
        assert_eq!((p.min(), p.max()), (1.0, 1.0));
    }

    #[test]
    fn tensor_round_trip() {
        let data = Array3::from_shape_fn((3, 2, 4), |(c, y, x)| (c + y + x) as f32 / 10.0);
        let p = ImagePlane::new(PlaneKind::Rgb, data).unwrap();
        let t = p.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 2, 4]);
        assert_eq!(ImagePlane::from_tensor(PlaneKind::Rgb, &t).unwrap(), p);
    }
}
