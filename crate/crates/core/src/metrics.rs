//! Saliency evaluation: MAE, maximum F-measure, S-measure (structure
//! similarity) and maximum E-measure (enhanced alignment), plus depth
//! error metrics and a directory-level evaluator.
//!
//! S-measure and E-measure follow the widely used MATLAB implementations of
//! these metrics, including the degenerate ground-truth branches
//! and the centroid split. Where the reference adds `eps` to a denominator,
//! the only case it changes is 0/0, which is handled explicitly; a perfect
//! prediction therefore scores exactly one. E-measure is normalized by the
//! pixel count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::imageio::{list_images, read_gray, stem_of};
use crate::nn::interp_weights;

pub const DEFAULT_BETA_SQ: f64 = 0.3;
pub const DEFAULT_THRESHOLDS: usize = 256;

fn check(p: &Array2<f64>, g: &Array2<f64>) -> Result<()> {
    if p.dim() != g.dim() {
        return Err(Error::shape("prediction vs ground truth", g.dim(), p.dim()));
    }
    if p.is_empty() {
        return Err(Error::shape("prediction", "non-empty", p.dim()));
    }
    Ok(())
}

fn binarize(g: &Array2<f64>) -> Array2<bool> {
    g.mapv(|v| v >= 0.5)
}

pub fn mae(p: &Array2<f64>, g: &Array2<f64>) -> Result<f64> {
    check(p, g)?;
    Ok(p.iter().zip(g.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

/// Min-max normalization; a constant map is returned unchanged.
pub fn normalize_prediction(p: &Array2<f64>) -> Array2<f64> {
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        p.mapv(|v| (v - min) / (max - min))
    } else {
        p.clone()
    }
}

/// `n` uniform thresholds `k / (n - 1)` over `[0, 1]`.
pub fn threshold_grid(n: usize) -> Vec<f64> {
    let d = (n.max(2) - 1) as f64;
    (0..n).map(|k| k as f64 / d).collect()
}

/// Confusion counts of `p >= threshold` against binary ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Confusion counts at every threshold of the grid, computed from one
/// histogram pass.
pub fn confusion_curve(p: &Array2<f64>, g: &Array2<f64>, n: usize) -> Vec<Confusion> {
    let grid = threshold_grid(n);
    let gb = binarize(g);
    // hist[k + 1] counts pixels whose highest passed threshold is k; hist[0]
    // counts pixels below every threshold.
    let mut hist_pos = vec![0usize; n + 1];
    let mut hist_neg = vec![0usize; n + 1];
    let d = (n.max(2) - 1) as f64;
    for (&v, &pos) in p.iter().zip(gb.iter()) {
        let mut k = ((v * d).floor() as i64).clamp(-1, n as i64 - 1);
        while k + 1 < n as i64 && grid[(k + 1) as usize] <= v {
            k += 1;
        }
        while k >= 0 && grid[k as usize] > v {
            k -= 1;
        }
        let slot = (k + 1) as usize;
        if pos {
            hist_pos[slot] += 1;
        } else {
            hist_neg[slot] += 1;
        }
    }
    let npos: usize = hist_pos.iter().sum();
    let nneg: usize = hist_neg.iter().sum();
    let mut out = vec![
        Confusion {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 0
        };
        n
    ];
    let (mut tp, mut fp) = (0, 0);
    for k in (0..n).rev() {
        tp += hist_pos[k + 1];
        fp += hist_neg[k + 1];
        out[k] = Confusion {
            tp,
            fp,
            fn_: npos - tp,
            tn: nneg - fp,
        };
    }
    out
}

fn f_from(c: &Confusion, beta_sq: f64) -> f64 {
    let predicted = c.tp + c.fp;
    let positives = c.tp + c.fn_;
    if predicted == 0 || positives == 0 {
        return 0.0;
    }
    let precision = c.tp as f64 / predicted as f64;
    let recall = c.tp as f64 / positives as f64;
    if precision + recall == 0.0 {
        return 0.0;
    }
    (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall)
}

/// Maximum F-measure over a uniform threshold grid.
pub fn f_measure_max(p: &Array2<f64>, g: &Array2<f64>, beta_sq: f64, thresholds: usize) -> Result<f64> {
    check(p, g)?;
    if !g.iter().any(|&v| v >= 0.5) {
        return Err(Error::EmptyGroundTruth);
    }
    let p = normalize_prediction(p);
    Ok(confusion_curve(&p, g, thresholds)
        .iter()
        .map(|c| f_from(c, beta_sq))
        .fold(0.0, f64::max))
}

/// Enhanced-alignment score of a binary map given only its confusion
/// counts: every pixel in one (prediction, truth) cell has the same score.
pub fn e_measure_from_counts(c: &Confusion) -> f64 {
    let n = c.total() as f64;
    let positives = c.tp + c.fn_;
    if positives == 0 {
        return (c.fn_ + c.tn) as f64 / n;
    }
    if positives == c.total() {
        return (c.tp + c.fp) as f64 / n;
    }
    let mu_fm = (c.tp + c.fp) as f64 / n;
    let mu_gt = positives as f64 / n;
    let cell = |fm: f64, gt: f64| {
        let a = fm - mu_fm;
        let b = gt - mu_gt;
        let d = a * a + b * b;
        let align = if d == 0.0 { 0.0 } else { 2.0 * a * b / d };
        (align + 1.0) * (align + 1.0) / 4.0
    };
    let sum = c.tp as f64 * cell(1.0, 1.0)
        + c.fp as f64 * cell(1.0, 0.0)
        + c.fn_ as f64 * cell(0.0, 1.0)
        + c.tn as f64 * cell(0.0, 0.0);
    sum / n
}

/// Enhanced-alignment score of a binary foreground map.
pub fn e_measure(fm: &Array2<bool>, g: &Array2<f64>) -> Result<f64> {
    if fm.dim() != g.dim() {
        return Err(Error::shape("foreground map vs ground truth", g.dim(), fm.dim()));
    }
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (&f, &t) in fm.iter().zip(g.iter()) {
        match (f, t >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(e_measure_from_counts(&c))
}

/// Maximum E-measure over a uniform threshold grid.
pub fn e_measure_max(p: &Array2<f64>, g: &Array2<f64>, thresholds: usize) -> Result<f64> {
    check(p, g)?;
    let p = normalize_prediction(p);
    Ok(confusion_curve(&p, g, thresholds)
        .iter()
        .map(e_measure_from_counts)
        .fold(0.0, f64::max))
}

fn object_score(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let x = values.iter().sum::<f64>() / n as f64;
    let sigma = if n > 1 {
        (values.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma)
}

fn s_object(p: &Array2<f64>, gb: &Array2<bool>) -> f64 {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&v, &pos) in p.iter().zip(gb.iter()) {
        if pos {
            fg.push(v);
        } else {
            bg.push(1.0 - v);
        }
    }
    let u = fg.len() as f64 / p.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// 1-based centroid `(X, Y)` of the foreground, rounded half away from zero.
fn centroid(gb: &Array2<bool>) -> (usize, usize) {
    let (rows, cols) = gb.dim();
    let total = gb.iter().filter(|&&b| b).count();
    if total == 0 {
        return (
            (cols as f64 / 2.0).round() as usize,
            (rows as f64 / 2.0).round() as usize,
        );
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for ((r, c), &b) in gb.indexed_iter() {
        if b {
            sx += (c + 1) as f64;
            sy += (r + 1) as f64;
        }
    }
    (
        (sx / total as f64).round() as usize,
        (sy / total as f64).round() as usize,
    )
}

fn region_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let x = p.iter().sum::<f64>() / nf;
    let y = g.iter().sum::<f64>() / nf;
    let denom = (nf - 1.0).max(1.0);
    let (mut sx2, mut sy2, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(g) {
        sx2 += (a - x) * (a - x);
        sy2 += (b - y) * (b - y);
        sxy += (a - x) * (b - y);
    }
    let (sx2, sy2, sxy) = (sx2 / denom, sy2 / denom, sxy / denom);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / beta
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(p: &Array2<f64>, gb: &Array2<bool>) -> f64 {
    let (rows, cols) = gb.dim();
    let (x, y) = centroid(gb);
    let quadrant = |r0: usize, r1: usize, c0: usize, c1: usize| {
        let mut pv = Vec::new();
        let mut gv = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                pv.push(p[[r, c]]);
                gv.push(if gb[[r, c]] { 1.0 } else { 0.0 });
            }
        }
        region_ssim(&pv, &gv)
    };
    let weighted = (x * y) as f64 * quadrant(0, y, 0, x)
        + ((cols - x) * y) as f64 * quadrant(0, y, x, cols)
        + (x * (rows - y)) as f64 * quadrant(y, rows, 0, x)
        + ((cols - x) * (rows - y)) as f64 * quadrant(y, rows, x, cols);
    weighted / (rows * cols) as f64
}

/// Structure measure `balance * S_object + (1 - balance) * S_region`.
/// All-background and all-foreground ground truth fall back to the mean of
/// the prediction.
pub fn s_measure(p: &Array2<f64>, g: &Array2<f64>, balance: f64) -> Result<f64> {
    check(p, g)?;
    let gb = binarize(g);
    let fg = gb.iter().filter(|&&b| b).count() as f64 / gb.len() as f64;
    let mean_p = p.mean().unwrap_or(0.0);
    if fg == 0.0 {
        return Ok(1.0 - mean_p);
    }
    if fg == 1.0 {
        return Ok(mean_p);
    }
    let q = balance * s_object(p, &gb) + (1.0 - balance) * s_region(p, &gb);
    Ok(q.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub imae: f64,
    pub irmse: f64,
}

/// Depth errors over pixels where `valid` is set. Inverse errors further
/// skip pixels where either depth is zero.
pub fn depth_metrics(p: &Array2<f64>, g: &Array2<f64>, valid: &Array2<bool>) -> Result<DepthMetrics> {
    check(p, g)?;
    if valid.dim() != g.dim() {
        return Err(Error::shape("depth mask", g.dim(), valid.dim()));
    }
    let (mut n, mut abs, mut sq) = (0usize, 0.0, 0.0);
    let (mut ni, mut iabs, mut isq) = (0usize, 0.0, 0.0);
    for ((&a, &b), &m) in p.iter().zip(g.iter()).zip(valid.iter()) {
        if !m {
            continue;
        }
        n += 1;
        abs += (a - b).abs();
        sq += (a - b) * (a - b);
        if a != 0.0 && b != 0.0 {
            let d = 1.0 / a - 1.0 / b;
            ni += 1;
            iabs += d.abs();
            isq += d * d;
        }
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let (imae, irmse) = if ni == 0 {
        (0.0, 0.0)
    } else {
        (iabs / ni as f64, (isq / ni as f64).sqrt())
    };
    Ok(DepthMetrics {
        mae: abs / n as f64,
        rmse: (sq / n as f64).sqrt(),
        imae,
        irmse,
    })
}

/// Bilinear resize of a 2-D map.
pub fn resize_map(p: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = p.dim();
    if (h, w) == (height, width) {
        return p.clone();
    }
    let mh = Array2::from_shape_vec((height, h), interp_weights(h, height)).expect("shape");
    let mw = Array2::from_shape_vec((width, w), interp_weights(w, width)).expect("shape");
    mh.dot(p).dot(&mw.t())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub stem: String,
    pub s_measure: f64,
    pub f_max: f64,
    pub e_max: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let avg = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let mean = EvalRow {
            stem: "mean".into(),
            s_measure: avg(|r| r.s_measure),
            f_max: avg(|r| r.f_max),
            e_max: avg(|r| r.e_max),
            mae: avg(|r| r.mae),
        };
        Self { rows, mean }
    }

    /// Per-image rows followed by the mean row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stem,s_measure,f_max,e_max,mae\n");
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.stem, r.s_measure, r.f_max, r.e_max, r.mae
            );
        }
        s
    }

    /// Aligned summary table of the dataset means.
    pub fn to_table(&self, dataset: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>8} {:>8}", "Dataset", "S_m", "F_max", "E_max", "MAE");
        let _ = writeln!(
            s,
            "{:<12} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            dataset, self.mean.s_measure, self.mean.f_max, self.mean.e_max, self.mean.mae
        );
        let _ = writeln!(s, "({} images)", self.rows.len());
        s
    }
}

/// Metrics of one prediction/ground-truth pair at the ground truth's
/// resolution. Ground truth without foreground scores an F-measure of 0.
pub fn evaluate_pair(pred: &Array2<f64>, gt: &Array2<f64>, stem: &str) -> Result<EvalRow> {
    let (h, w) = gt.dim();
    let pred = resize_map(pred, h, w).mapv(|v| v.clamp(0.0, 1.0));
    let gt = gt.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    let f_max = match f_measure_max(&pred, &gt, DEFAULT_BETA_SQ, DEFAULT_THRESHOLDS) {
        Err(Error::EmptyGroundTruth) => 0.0,
        other => other?,
    };
    Ok(EvalRow {
        stem: stem.to_string(),
        s_measure: s_measure(&pred, &gt, 0.5)?,
        f_max,
        e_max: e_measure_max(&pred, &gt, DEFAULT_THRESHOLDS)?,
        mae: mae(&pred, &gt)?,
    })
}

fn stems(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingSubdir(dir.to_path_buf()));
    }
    Ok(list_images(dir)?
        .into_iter()
        .map(|p| (stem_of(&p), p))
        .collect())
}

/// Evaluates every prediction in `pred_dir` against the ground truth with
/// the same stem in `gt_dir`.
pub fn evaluate_dir(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let preds = stems(pred_dir)?;
    let gts = stems(gt_dir)?;
    let mismatched: Vec<String> = gts
        .keys()
        .filter(|s| !preds.contains_key(*s))
        .chain(preds.keys().filter(|s| !gts.contains_key(*s)))
        .cloned()
        .collect();
    if !mismatched.is_empty() {
        return Err(Error::StemMismatch(mismatched));
    }
    let mut rows = Vec::with_capacity(gts.len());
    for (stem, gt_path) in &gts {
        let gt = read_gray(gt_path)?;
        let pr = read_gray(&preds[stem])?;
        let gt = gt.values.mapv(|v| v / gt.full_scale);
        let pr = pr.values.mapv(|v| v / pr.full_scale);
        rows.push(evaluate_pair(&pr, &gt, stem)?);
    }
    Ok(EvalReport::from_rows(rows))
}
