//! Shared helpers for the integration and acceptance tests: brute-force
//! metric oracles written independently of the library, finite
//! differences, and small model configurations.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use dsnet::config::Config;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = f64::EPSILON;

/// The smallest configuration the network accepts at `size` pixels.
pub fn micro_config(size: usize) -> Config {
    let mut c = Config::default();
    c.input_size = size;
    c.encoder.channels_per_level = vec![2, 2, 2, 2];
    c.decoder.width = 2;
    c
}

pub fn random_case(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Array2<f64>, Array2<f64>) {
    let p = Array2::from_shape_fn((h, w), |_| rng.random::<f64>());
    // Keep both classes present so the full S/E formulas are exercised;
    // density varies from case to case.
    let density: f64 = rng.random_range(0.1..0.9);
    let mut g = Array2::from_shape_fn((h, w), |_| if rng.random::<f64>() < density { 1.0 } else { 0.0 });
    g[[0, 0]] = 1.0;
    g[[h - 1, w - 1]] = 0.0;
    (p, g)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn minmax(p: &Array2<f64>) -> Array2<f64> {
    let lo = p.fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = p.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if hi > lo {
        p.mapv(|v| (v - lo) / (hi - lo))
    } else {
        p.clone()
    }
}

/// Structure measure, computed directly from its definition: object-level
/// similarity of foreground and background distributions plus a
/// centroid-split, area-weighted SSIM.
pub fn s_measure_oracle(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let (rows, cols) = g.dim();
    let fg_frac = g.iter().filter(|&&v| v >= 0.5).count() as f64 / (rows * cols) as f64;
    if fg_frac == 0.0 {
        return 1.0 - p.mean().unwrap();
    }
    if fg_frac == 1.0 {
        return p.mean().unwrap();
    }

    let object = |xs: &[f64]| {
        let m = mean(xs);
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0).max(1.0);
        2.0 * m / (m * m + 1.0 + var.sqrt() + EPS)
    };
    let fg: Vec<f64> = p.iter().zip(g).filter(|(_, &t)| t >= 0.5).map(|(&v, _)| v).collect();
    let bg: Vec<f64> = p.iter().zip(g).filter(|(_, &t)| t < 0.5).map(|(&v, _)| 1.0 - v).collect();
    let s_obj = fg_frac * object(&fg) + (1.0 - fg_frac) * object(&bg);

    // Centroid with 1-based coordinates.
    let mut count = 0usize;
    let mut sum_x = 0usize;
    let mut sum_y = 0usize;
    for r in 0..rows {
        for c in 0..cols {
            if g[[r, c]] >= 0.5 {
                count += 1;
                sum_x += c + 1;
                sum_y += r + 1;
            }
        }
    }
    let x = (sum_x as f64 / count as f64).round() as usize;
    let y = (sum_y as f64 / count as f64).round() as usize;

    let ssim = |r0: usize, r1: usize, c0: usize, c1: usize| -> f64 {
        let n = (r1 - r0) * (c1 - c0);
        if n == 0 {
            return 0.0;
        }
        let pv = p.slice(ndarray::s![r0..r1, c0..c1]);
        let gv = g.slice(ndarray::s![r0..r1, c0..c1]).mapv(|v| if v >= 0.5 { 1.0f64 } else { 0.0 });
        let mx = pv.mean().unwrap();
        let my = gv.mean().unwrap();
        let d = n as f64 - 1.0 + EPS;
        let vx = pv.mapv(|v| (v - mx).powi(2)).sum() / d;
        let vy = gv.mapv(|v| (v - my).powi(2)).sum() / d;
        let cxy = (&pv - mx).iter().zip((&gv - my).iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        let a = 4.0 * mx * my * cxy;
        let b = (mx * mx + my * my) * (vx + vy);
        if a != 0.0 {
            a / (b + EPS)
        } else if b == 0.0 {
            1.0
        } else {
            0.0
        }
    };
    let area = (rows * cols) as f64;
    let s_reg = (x * y) as f64 / area * ssim(0, y, 0, x)
        + ((cols - x) * y) as f64 / area * ssim(0, y, x, cols)
        + (x * (rows - y)) as f64 / area * ssim(y, rows, 0, x)
        + ((cols - x) * (rows - y)) as f64 / area * ssim(y, rows, x, cols);
    (0.5 * s_obj + 0.5 * s_reg).max(0.0)
}

/// Enhanced-alignment score of one binary map, evaluated pixel by pixel.
pub fn e_measure_binary_oracle(fm: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let n = fm.len() as f64;
    let gt = g.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    let fg = gt.sum();
    let enhanced: Array2<f64> = if fg == 0.0 {
        fm.mapv(|v| 1.0 - v)
    } else if fg == n {
        fm.clone()
    } else {
        let fm_c = fm - fm.mean().unwrap();
        let gt_c = &gt - gt.mean().unwrap();
        let mut out = Array2::zeros(fm.dim());
        ndarray::Zip::from(&mut out).and(&fm_c).and(&gt_c).for_each(|o, &a, &b| {
            let align = 2.0 * a * b / (a * a + b * b + EPS);
            *o = (align + 1.0).powi(2) / 4.0;
        });
        out
    };
    enhanced.sum() / n
}

/// Maximum enhanced-alignment score over 256 uniform thresholds after
/// min-max normalization.
pub fn e_measure_max_oracle(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let p = minmax(p);
    (0..256)
        .map(|k| {
            let t = k as f64 / 255.0;
            let fm = p.mapv(|v| if v >= t { 1.0 } else { 0.0 });
            e_measure_binary_oracle(&fm, g)
        })
        .fold(0.0, f64::max)
}

/// Central finite differences of `f` with respect to every element of `x`,
/// compared against `analytic`. Returns the worst relative error
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn finite_difference_error(
    x: &Var,
    analytic: &Tensor,
    h: f64,
    floor: f64,
    mut f: impl FnMut() -> f64,
) -> f64 {
    let original: Vec<f64> = x.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    let grad: Vec<f64> = analytic.flatten_all().unwrap().to_vec1().unwrap();
    let shape = x.as_tensor().shape().clone();
    let set = |vals: &[f64]| {
        x.set(&Tensor::from_vec(vals.to_vec(), shape.clone(), &Device::Cpu).unwrap()).unwrap();
    };
    let mut worst: f64 = 0.0;
    let mut vals = original.clone();
    for i in 0..original.len() {
        vals[i] = original[i] + h;
        set(&vals);
        let up = f();
        vals[i] = original[i] - h;
        set(&vals);
        let down = f();
        vals[i] = original[i];
        let numeric = (up - down) / (2.0 * h);
        let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    set(&original);
    worst
}

pub fn var(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Var {
    let mut rng = seeded(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Var::from_tensor(&Tensor::from_vec(data, shape, &Device::Cpu).unwrap()).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    let v: Vec<f64> = t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(v.len(), 1, "expected a single element");
    v[0]
}
