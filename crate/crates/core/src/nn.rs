//! Small building blocks on top of candle: convolutions with named
//! parameters, group normalization, the conv block recipe used by the
//! decoupling heads, and a differentiable bilinear resize.

use candle_core::{Module, Tensor, D};
use candle_nn::GroupNorm;

use crate::kernels::{self, conv2d, ConvGeom};

use crate::error::Result;
use crate::params::ParamScope;

#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvOpts {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvOpts {
    pub fn k3() -> Self {
        Self {
            kernel: 3,
            stride: 1,
            dilation: 1,
            bias: true,
        }
    }

    pub fn k1() -> Self {
        Self {
            kernel: 1,
            ..Self::k3()
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }
}

impl Conv {
    /// Padding is chosen so that a stride-1 convolution preserves size.
    pub fn new(
        scope: &ParamScope,
        in_channels: usize,
        out_channels: usize,
        opts: ConvOpts,
    ) -> Result<Self> {
        let k = opts.kernel;
        let fan_in = in_channels * k * k;
        let weight = scope.he_uniform("weight", &[out_channels, in_channels, k, k], fan_in)?;
        Self::with_weight(scope, weight, in_channels, out_channels, opts)
    }

    /// A convolution whose weights start at zero, so its initial output is
    /// the bias alone.
    pub fn zeroed(scope: &ParamScope, in_channels: usize, out_channels: usize, opts: ConvOpts) -> Result<Self> {
        let k = opts.kernel;
        let weight = scope.constant("weight", &[out_channels, in_channels, k, k], 0.0)?;
        Self::with_weight(scope, weight, in_channels, out_channels, opts)
    }

    fn with_weight(
        scope: &ParamScope,
        weight: Tensor,
        in_channels: usize,
        out_channels: usize,
        opts: ConvOpts,
    ) -> Result<Self> {
        let k = opts.kernel;
        let bias = if opts.bias {
            Some(scope.constant("bias", &[out_channels], 0.0)?)
        } else {
            None
        };
        let geom = ConvGeom {
            padding: opts.dilation * (k - 1) / 2,
            stride: opts.stride,
            dilation: opts.dilation,
        };
        Ok(Self {
            weight,
            bias,
            geom,
            in_channels,
            out_channels,
        })
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = conv2d(x, &self.weight, self.geom)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, self.out_channels, 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Largest group count in 1..=8 dividing `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

pub fn group_norm(scope: &ParamScope, channels: usize) -> Result<GroupNorm> {
    let weight = scope.constant("weight", &[channels], 1.0)?;
    let bias = scope.constant("bias", &[channels], 0.0)?;
    Ok(GroupNorm::new(weight, bias, channels, group_count(channels), 1e-5)?)
}

/// conv3x3 -> group norm -> ReLU -> conv3x3
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv1: Conv,
    norm: GroupNorm,
    conv2: Conv,
}

impl ConvBlock {
    pub fn new(scope: &ParamScope, in_channels: usize, out_channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv::new(&scope.pp("conv1"), in_channels, out_channels, ConvOpts::k3())?,
            norm: group_norm(&scope.pp("norm"), out_channels)?,
            conv2: Conv::new(&scope.pp("conv2"), out_channels, out_channels, ConvOpts::k3())?,
        })
    }
}

impl Module for ConvBlock {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let x = self.conv1.forward(x)?;
        let x = self.norm.forward(&x)?.relu()?;
        self.conv2.forward(&x)
    }
}

/// Row-stochastic `out x in` matrix for half-pixel-centred bilinear
/// interpolation (corners not aligned), row-major.
pub fn interp_weights(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let w1 = src - i0 as f64;
        let w1 = if i0 == i1 { 0.0 } else { w1 };
        m[o * in_len + i0] += 1.0 - w1;
        m[o * in_len + i1] += w1;
    }
    m
}

/// Bilinear resize of a `(B, C, H, W)` tensor; a no-op at the same size.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == height && w == width {
        return Ok(x.clone());
    }
    Ok(kernels::resize_bilinear(x, height, width)?)
}

/// Global average pooling to `(B, C, 1, 1)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}
