//! Custom CPU ops for the hot spots of training:
//!
//! * 2-D convolution as im2col followed by a GEMM, with both gradients
//!   computed the same way. Candle's built-in CPU backward pass runs a
//!   direct transposed convolution, which is several times slower.
//! * Bilinear resizing as two-tap separable interpolation with an explicit
//!   adjoint, instead of dense interpolation matrices.
//! * A fused softmax over the last axis whose backward pass needs a single
//!   sweep over the output.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, LinalgScalar};

/// Stride, zero padding and dilation, shared by both spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    fn out_len(&self, len: usize, k: usize) -> candle_core::Result<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span || self.stride == 0 {
            candle_core::bail!("conv2d: kernel span {span} exceeds padded input {padded}");
        }
        Ok((padded - span) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

impl Dims {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_area(&self) -> usize {
        self.ho * self.wo
    }
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("custom op: operand must be contiguous"),
    }
}

/// Unfolds `x` (`C x H x W`) into `col` (`C*K*K x Ho*Wo`).
fn im2col<T: Copy + Default>(x: &[T], d: Dims, g: ConvGeom, col: &mut [T]) {
    let area = d.out_area();
    for ci in 0..d.c {
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (ci * d.k + ki) * d.k + kj;
                let dst = &mut col[row * area..(row + 1) * area];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                    let line = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(T::default());
                        continue;
                    }
                    let src = &x[(ci * d.h + iy as usize) * d.w..(ci * d.h + iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::default()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `x`.
fn col2im<T: Copy + std::ops::AddAssign>(col: &[T], d: Dims, g: ConvGeom, x: &mut [T]) {
    let area = d.out_area();
    for ci in 0..d.c {
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (ci * d.k + ki) * d.k + kj;
                let src = &col[row * area..(row + 1) * area];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let base = (ci * d.h + iy as usize) * d.w;
                    for ox in 0..d.wo {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < d.w as isize {
                            x[base + ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn view<T>(s: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), s).expect("matrix view")
}

fn view_mut<T>(s: &mut [T], rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), s).expect("matrix view")
}

fn forward<T: LinalgScalar + Default>(x: &[T], w: &[T], n: usize, o: usize, d: Dims, g: ConvGeom) -> Vec<T> {
    let (patch, area) = (d.patch(), d.out_area());
    let mut col = vec![T::default(); patch * area];
    let mut y = vec![T::default(); n * o * area];
    let wm = view(w, o, patch);
    for b in 0..n {
        im2col(&x[b * d.c * d.h * d.w..(b + 1) * d.c * d.h * d.w], d, g, &mut col);
        let mut yb = view_mut(&mut y[b * o * area..(b + 1) * o * area], o, area);
        general_mat_mul(T::one(), &wm, &view(&col, patch, area), T::zero(), &mut yb);
    }
    y
}

fn grad_input<T: LinalgScalar + Default + std::ops::AddAssign>(
    gy: &[T],
    w: &[T],
    n: usize,
    o: usize,
    d: Dims,
    g: ConvGeom,
) -> Vec<T> {
    let (patch, area) = (d.patch(), d.out_area());
    let mut col = vec![T::default(); patch * area];
    let mut gx = vec![T::default(); n * d.c * d.h * d.w];
    let wt = view(w, o, patch).reversed_axes();
    for b in 0..n {
        let gyb = view(&gy[b * o * area..(b + 1) * o * area], o, area);
        general_mat_mul(T::one(), &wt, &gyb, T::zero(), &mut view_mut(&mut col, patch, area));
        col2im(&col, d, g, &mut gx[b * d.c * d.h * d.w..(b + 1) * d.c * d.h * d.w]);
    }
    gx
}

fn grad_kernel<T: LinalgScalar + Default>(x: &[T], gy: &[T], n: usize, o: usize, d: Dims, g: ConvGeom) -> Vec<T> {
    let (patch, area) = (d.patch(), d.out_area());
    let mut col = vec![T::default(); patch * area];
    let mut gw = vec![T::default(); o * patch];
    for b in 0..n {
        im2col(&x[b * d.c * d.h * d.w..(b + 1) * d.c * d.h * d.w], d, g, &mut col);
        let gyb = view(&gy[b * o * area..(b + 1) * o * area], o, area);
        let colt = view(&col, patch, area).reversed_axes();
        general_mat_mul(T::one(), &gyb, &colt, T::one(), &mut view_mut(&mut gw, o, patch));
    }
    gw
}

fn dims4(l: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

struct Conv2dOp(ConvGeom);

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l1)?;
        let (o, ci, k, k2) = dims4(l2)?;
        if ci != c || k != k2 {
            candle_core::bail!("conv2d: input {:?} vs kernel {:?}", l1.dims(), l2.dims());
        }
        let g = self.0;
        let d = Dims {
            c,
            h,
            w,
            k,
            ho: g.out_len(h, k)?,
            wo: g.out_len(w, k)?,
        };
        let shape = Shape::from((n, o, d.ho, d.wo));
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(forward(contiguous(s1, l1)?, contiguous(s2, l2)?, n, o, d, g))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(forward(contiguous(s1, l1)?, contiguous(s2, l2)?, n, o, d, g))
            }
            _ => candle_core::bail!("conv2d: only matching f32/f64 operands are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        let gx = grad.apply_op2_no_bwd(w, &GradInputOp { geom: self.0, h, w: wd })?;
        let gw = x.apply_op2_no_bwd(&grad, &GradKernelOp { geom: self.0, k: w.dim(2)? })?;
        Ok((Some(gx), Some(gw)))
    }
}

struct GradInputOp {
    geom: ConvGeom,
    h: usize,
    w: usize,
}

impl CustomOp2 for GradInputOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, o, ho, wo) = dims4(l1)?;
        let (_, c, k, _) = dims4(l2)?;
        let d = Dims {
            c,
            h: self.h,
            w: self.w,
            k,
            ho,
            wo,
        };
        let shape = Shape::from((n, c, self.h, self.w));
        let g = self.geom;
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(grad_input(contiguous(s1, l1)?, contiguous(s2, l2)?, n, o, d, g))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(grad_input(contiguous(s1, l1)?, contiguous(s2, l2)?, n, o, d, g))
            }
            _ => candle_core::bail!("conv2d: only matching f32/f64 operands are supported"),
        };
        Ok((out, shape))
    }
}

struct GradKernelOp {
    geom: ConvGeom,
    k: usize,
}

impl CustomOp2 for GradKernelOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-kernel"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l1)?;
        let (_, o, ho, wo) = dims4(l2)?;
        let d = Dims { c, h, w, k: self.k, ho, wo };
        let shape = Shape::from((o, c, self.k, self.k));
        let g = self.geom;
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(grad_kernel(contiguous(s1, l1)?, contiguous(s2, l2)?, n, o, d, g))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(grad_kernel(contiguous(s1, l1)?, contiguous(s2, l2)?, n, o, d, g))
            }
            _ => candle_core::bail!("conv2d: only matching f32/f64 operands are supported"),
        };
        Ok((out, shape))
    }
}

/// `x` is `(N, C, H, W)`, `kernel` is `(O, C, K, K)`; returns `(N, O, Ho, Wo)`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, geom: ConvGeom) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&kernel.contiguous()?, Conv2dOp(geom))
}

/// Two-tap half-pixel bilinear weights of one output position.
#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            Tap { i0, i1, w0: 1.0 - w1, w1 }
        })
        .collect()
}

fn resize_planes<T: WithDType>(x: &[T], planes: usize, ih: usize, iw: usize, oh: usize, ow: usize) -> Vec<T> {
    let tx = taps(iw, ow);
    let ty = taps(ih, oh);
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut rows = vec![T::zero(); ih * ow];
    for p in 0..planes {
        let src = &x[p * ih * iw..(p + 1) * ih * iw];
        for y in 0..ih {
            let line = &src[y * iw..(y + 1) * iw];
            for (ox, t) in tx.iter().enumerate() {
                rows[y * ow + ox] = line[t.i0] * T::from_f64(t.w0) + line[t.i1] * T::from_f64(t.w1);
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, t) in ty.iter().enumerate() {
            let (w0, w1) = (T::from_f64(t.w0), T::from_f64(t.w1));
            for ox in 0..ow {
                dst[oy * ow + ox] = rows[t.i0 * ow + ox] * w0 + rows[t.i1 * ow + ox] * w1;
            }
        }
    }
    out
}

fn resize_adjoint<T: WithDType>(g: &[T], planes: usize, ih: usize, iw: usize, oh: usize, ow: usize) -> Vec<T> {
    let tx = taps(iw, ow);
    let ty = taps(ih, oh);
    let mut out = vec![T::zero(); planes * ih * iw];
    let mut rows = vec![T::zero(); ih * ow];
    for p in 0..planes {
        rows.fill(T::zero());
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        for (oy, t) in ty.iter().enumerate() {
            let (w0, w1) = (T::from_f64(t.w0), T::from_f64(t.w1));
            for ox in 0..ow {
                let v = src[oy * ow + ox];
                rows[t.i0 * ow + ox] += v * w0;
                rows[t.i1 * ow + ox] += v * w1;
            }
        }
        let dst = &mut out[p * ih * iw..(p + 1) * ih * iw];
        for y in 0..ih {
            for (ox, t) in tx.iter().enumerate() {
                let v = rows[y * ow + ox];
                dst[y * iw + t.i0] += v * T::from_f64(t.w0);
                dst[y * iw + t.i1] += v * T::from_f64(t.w1);
            }
        }
    }
    out
}

/// Resizes the trailing two axes; `adjoint` maps output-sized gradients
/// back to the input size.
struct ResizeOp {
    from: (usize, usize),
    to: (usize, usize),
    adjoint: bool,
}

impl CustomOp1 for ResizeOp {
    fn name(&self) -> &'static str {
        if self.adjoint {
            "bilinear-resize-adjoint"
        } else {
            "bilinear-resize"
        }
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l)?;
        let ((ih, iw), (oh, ow)) = (self.from, self.to);
        let (expect, out) = if self.adjoint { ((oh, ow), (ih, iw)) } else { ((ih, iw), (oh, ow)) };
        if (h, w) != expect {
            candle_core::bail!("resize: expected spatial size {expect:?}, got {:?}", (h, w));
        }
        let planes = n * c;
        let storage = match s {
            CpuStorage::F32(_) => {
                let x = contiguous::<f32>(s, l)?;
                CpuStorage::F32(if self.adjoint {
                    resize_adjoint(x, planes, ih, iw, oh, ow)
                } else {
                    resize_planes(x, planes, ih, iw, oh, ow)
                })
            }
            CpuStorage::F64(_) => {
                let x = contiguous::<f64>(s, l)?;
                CpuStorage::F64(if self.adjoint {
                    resize_adjoint(x, planes, ih, iw, oh, ow)
                } else {
                    resize_planes(x, planes, ih, iw, oh, ow)
                })
            }
            _ => candle_core::bail!("resize: only f32/f64 are supported"),
        };
        Ok((storage, Shape::from((n, c, out.0, out.1))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        if self.adjoint {
            candle_core::bail!("resize: second derivatives are not supported");
        }
        let op = ResizeOp {
            from: self.from,
            to: self.to,
            adjoint: true,
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

/// Half-pixel bilinear resize of a `(B, C, H, W)` tensor to `(B, C, h, w)`.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    x.contiguous()?.apply_op1(ResizeOp {
        from: (h, w),
        to: (height, width),
        adjoint: false,
    })
}

fn softmax_rows<T: WithDType>(x: &[T], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
        let max = src.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, v) in dst.iter_mut().zip(src) {
            let e = (v.to_f64() - max).exp();
            total += e;
            *d = T::from_f64(e);
        }
        let inv = T::from_f64(1.0 / total);
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

fn softmax_rows_grad<T: WithDType>(y: &[T], g: &[T], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for ((ys, gs), dst) in y.chunks_exact(len).zip(g.chunks_exact(len)).zip(out.chunks_exact_mut(len)) {
        let dot = ys.iter().zip(gs).fold(0.0, |acc, (a, b)| acc + a.to_f64() * b.to_f64());
        let dot = T::from_f64(dot);
        for ((d, &yv), &gv) in dst.iter_mut().zip(ys).zip(gs) {
            *d = yv * (gv - dot);
        }
    }
    out
}

struct SoftmaxOp;

struct SoftmaxGradOp;

impl CustomOp1 for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax-last-dim"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let len = l.dims().last().copied().unwrap_or(1).max(1);
        let storage = match s {
            CpuStorage::F32(_) => CpuStorage::F32(softmax_rows(contiguous::<f32>(s, l)?, len)),
            CpuStorage::F64(_) => CpuStorage::F64(softmax_rows(contiguous::<f64>(s, l)?, len)),
            _ => candle_core::bail!("softmax: only f32/f64 are supported"),
        };
        Ok((storage, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxGradOp)?))
    }
}

impl CustomOp2 for SoftmaxGradOp {
    fn name(&self) -> &'static str {
        "softmax-last-dim-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        if l1.dims() != l2.dims() {
            candle_core::bail!("softmax grad: shape mismatch {:?} vs {:?}", l1.dims(), l2.dims());
        }
        let len = l1.dims().last().copied().unwrap_or(1).max(1);
        let storage = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(softmax_rows_grad(contiguous::<f32>(s1, l1)?, contiguous::<f32>(s2, l2)?, len))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(softmax_rows_grad(contiguous::<f64>(s1, l1)?, contiguous::<f64>(s2, l2)?, len))
            }
            _ => candle_core::bail!("softmax grad: only matching f32/f64 are supported"),
        };
        Ok((storage, l1.shape().clone()))
    }
}

/// Softmax over the last axis.
pub fn softmax_last_dim(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(SoftmaxOp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_builtin_convolution_and_gradients() {
        let dev = Device::Cpu;
        for (c, o, h, k, stride, padding, dilation) in
            [(3, 4, 9, 3, 1, 1, 1), (2, 3, 8, 3, 2, 1, 1), (3, 2, 10, 3, 1, 4, 4), (4, 5, 7, 1, 1, 0, 1), (2, 2, 3, 3, 1, 6, 6)]
        {
            let width = if stride == 1 { h + 1 } else { h };
            let x = Var::rand(-1.0, 1.0, (2, c, h, width), &dev).unwrap();
            let w = Var::rand(-1.0, 1.0, (o, c, k, k), &dev).unwrap();
            let x = Var::from_tensor(&x.to_dtype(DType::F64).unwrap()).unwrap();
            let w = Var::from_tensor(&w.to_dtype(DType::F64).unwrap()).unwrap();
            let geom = ConvGeom {
                stride,
                padding,
                dilation,
            };
            let ours = conv2d(x.as_tensor(), w.as_tensor(), geom).unwrap();
            let reference = x.as_tensor().conv2d(w.as_tensor(), padding, stride, dilation, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_diff(&ours, &reference) < 1e-12);

            let weights = Tensor::rand(0.0, 1.0, ours.shape(), &dev).unwrap();
            let g1 = (ours * &weights).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (reference * &weights).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w] {
                let a = g1.get(v.as_tensor()).unwrap();
                let b = g2.get(v.as_tensor()).unwrap();
                assert!(max_diff(a, b) < 1e-10, "gradient mismatch for {c} {o} {h} {k}");
            }
        }
    }

    /// Dense interpolation matrices applied as `Wy · X · Wxᵀ`.
    fn dense_resize(x: &Tensor, oh: usize, ow: usize) -> Tensor {
        let (_, _, ih, iw) = x.dims4().unwrap();
        let dense = |i: usize, o: usize| {
            let mut m = vec![0.0f64; o * i];
            for (r, t) in taps(i, o).iter().enumerate() {
                m[r * i + t.i0] += t.w0;
                m[r * i + t.i1] += t.w1;
            }
            Tensor::from_vec(m, (o, i), x.device()).unwrap()
        };
        let wy = dense(ih, oh);
        let wx = dense(iw, ow);
        wy.broadcast_matmul(x).unwrap().broadcast_matmul(&wx.t().unwrap()).unwrap()
    }

    #[test]
    fn resize_matches_dense_interpolation_and_its_transpose() {
        let dev = Device::Cpu;
        for (ih, iw, oh, ow) in [(4, 4, 16, 16), (7, 5, 3, 9), (16, 16, 4, 4), (1, 3, 2, 6)] {
            let x = Var::from_tensor(&Tensor::rand(-1.0f64, 1.0, (2, 3, ih, iw), &dev).unwrap()).unwrap();
            let ours = resize_bilinear(x.as_tensor(), oh, ow).unwrap();
            let reference = dense_resize(x.as_tensor(), oh, ow);
            assert!(max_diff(&ours, &reference) < 1e-12);

            let weights = Tensor::rand(0.0f64, 1.0, ours.shape(), &dev).unwrap();
            let g1 = (ours * &weights).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (reference * &weights).unwrap().sum_all().unwrap().backward().unwrap();
            assert!(max_diff(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_composed_ops_and_gradients() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&(Tensor::rand(-3.0f64, 3.0, (2, 5, 7), &dev).unwrap())).unwrap();
        let ours = softmax_last_dim(x.as_tensor()).unwrap();
        let reference = candle_nn::ops::softmax(x.as_tensor(), candle_core::D::Minus1).unwrap();
        assert!(max_diff(&ours, &reference) < 1e-14);
        let weights = Tensor::rand(-1.0f64, 1.0, ours.shape(), &dev).unwrap();
        let g1 = (ours * &weights).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &weights).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(max_diff(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-12);
    }
}
