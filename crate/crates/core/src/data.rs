//! Dataset indexing and loading, geometric augmentation, the synthetic toy
//! dataset generator and the epoch-cycling batch sampler.
//!
//! A dataset root holds `rgb/`, `depth/` and `gt/` subdirectories whose
//! files are matched by stem. Unlabeled pools need only `rgb/`; once pseudo
//! depth has been generated they also carry `depth/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::AugmentConfig;
use crate::error::{Error, Result};
use crate::imageio::{list_images, read_gray, read_rgb, stem_of, write_gray8, write_rgb8};
use crate::nn::interp_weights;
use crate::types::{ImagePlane, PlaneKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    LabeledRgbd,
    UnlabeledRgb,
    UnlabeledRgbWithPseudoDepth,
}

impl DatasetKind {
    fn subdirs(self) -> &'static [&'static str] {
        match self {
            DatasetKind::LabeledRgbd => &["rgb", "depth", "gt"],
            DatasetKind::UnlabeledRgb => &["rgb"],
            DatasetKind::UnlabeledRgbWithPseudoDepth => &["rgb", "depth"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleEntry {
    pub stem: String,
    pub rgb: PathBuf,
    pub depth: Option<PathBuf>,
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub kind: DatasetKind,
    pub samples: Vec<SampleEntry>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingSubdir(dir.to_path_buf()));
    }
    let mut out = BTreeMap::new();
    for path in list_images(dir)? {
        out.insert(stem_of(&path), path);
    }
    Ok(out)
}

/// Indexes the subdirectories required by `kind`, ignoring any others.
/// Samples are ordered by stem.
pub fn scan_dataset(root: &Path, kind: DatasetKind) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::MissingSubdir(root.to_path_buf()));
    }
    let maps = kind
        .subdirs()
        .iter()
        .map(|d| by_stem(&root.join(d)))
        .collect::<Result<Vec<_>>>()?;
    let mut orphans: Vec<String> = Vec::new();
    for m in &maps[1..] {
        orphans.extend(maps[0].keys().filter(|s| !m.contains_key(*s)).cloned());
        orphans.extend(m.keys().filter(|s| !maps[0].contains_key(*s)).cloned());
    }
    if !orphans.is_empty() {
        orphans.sort();
        orphans.dedup();
        return Err(Error::StemMismatch(orphans));
    }
    let samples = maps[0]
        .iter()
        .map(|(stem, rgb)| SampleEntry {
            stem: stem.clone(),
            rgb: rgb.clone(),
            depth: maps.get(1).map(|m| m[stem].clone()),
            gt: maps.get(2).map(|m| m[stem].clone()),
        })
        .collect();
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        kind,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub stem: String,
    pub rgb: ImagePlane,
    pub depth: Option<ImagePlane>,
    pub gt: Option<ImagePlane>,
}

/// Min-max normalization to `[0, 1]`; a constant image maps to zeros.
pub fn normalize_depth(values: &Array2<f64>) -> Array2<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        values.mapv(|v| (v - min) / (max - min))
    } else {
        Array2::zeros(values.dim())
    }
}

fn plane_from_2d(kind: PlaneKind, values: Array2<f64>) -> Result<ImagePlane> {
    let data = values.mapv(|v| v as f32).insert_axis(Axis(0));
    ImagePlane::new(kind, data)
}

/// Reads a depth image as a normalized one-channel plane.
pub fn load_depth(path: &Path) -> Result<ImagePlane> {
    let img = read_gray(path)?;
    plane_from_2d(PlaneKind::Depth, normalize_depth(&img.values))
}

/// Reads a ground-truth mask, binarized at half of full scale.
pub fn load_mask(path: &Path) -> Result<ImagePlane> {
    let img = read_gray(path)?;
    let half = img.full_scale / 2.0;
    plane_from_2d(PlaneKind::Mask, img.values.mapv(|v| if v >= half { 1.0 } else { 0.0 }))
}

pub fn load_sample(entry: &SampleEntry) -> Result<Sample> {
    let rgb = ImagePlane::new(PlaneKind::Rgb, read_rgb(&entry.rgb)?)?;
    let depth = entry.depth.as_deref().map(load_depth).transpose()?;
    let gt = entry.gt.as_deref().map(load_mask).transpose()?;
    for plane in depth.iter().chain(gt.iter()) {
        if (plane.height(), plane.width()) != (rgb.height(), rgb.width()) {
            return Err(Error::shape(
                format!("{} resolution", entry.stem),
                (rgb.height(), rgb.width()),
                (plane.height(), plane.width()),
            ));
        }
    }
    Ok(Sample {
        stem: entry.stem.clone(),
        rgb,
        depth,
        gt,
    })
}

/// Samples of a dataset, held in memory when the pool is small and read
/// from disk on demand otherwise.
pub struct SamplePool {
    index: DatasetIndex,
    cache: Option<Vec<Sample>>,
}

impl SamplePool {
    pub const CACHE_LIMIT: usize = 512;

    pub fn new(index: DatasetIndex) -> Result<Self> {
        let cache = if index.len() <= Self::CACHE_LIMIT {
            Some(index.samples.iter().map(load_sample).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(Self { index, cache })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }

    pub fn get(&self, i: usize) -> Result<Sample> {
        match &self.cache {
            Some(c) => Ok(c[i].clone()),
            None => load_sample(&self.index.samples[i]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Filter {
    Bilinear,
    Nearest,
}

fn resize_2d(a: &Array2<f32>, h: usize, w: usize, filter: Filter) -> Array2<f32> {
    let (ih, iw) = a.dim();
    if (ih, iw) == (h, w) {
        return a.clone();
    }
    match filter {
        Filter::Bilinear => {
            let mh = Array2::from_shape_vec((h, ih), interp_weights(ih, h)).expect("shape");
            let mw = Array2::from_shape_vec((w, iw), interp_weights(iw, w)).expect("shape");
            mh.dot(&a.mapv(f64::from)).dot(&mw.t()).mapv(|v| (v as f32).clamp(0.0, 1.0))
        }
        Filter::Nearest => Array2::from_shape_fn((h, w), |(y, x)| {
            let sy = (((y as f64 + 0.5) * ih as f64 / h as f64) as usize).min(ih - 1);
            let sx = (((x as f64 + 0.5) * iw as f64 / w as f64) as usize).min(iw - 1);
            a[[sy, sx]]
        }),
    }
}

fn map_channels(a: &Array3<f32>, f: impl Fn(&Array2<f32>) -> Array2<f32>) -> Array3<f32> {
    let planes: Vec<Array2<f32>> = a.axis_iter(Axis(0)).map(|c| f(&c.to_owned())).collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal plane shapes")
}

fn filter_for(kind: PlaneKind) -> Filter {
    match kind {
        PlaneKind::Mask => Filter::Nearest,
        _ => Filter::Bilinear,
    }
}

/// Resizes a plane; masks use nearest-neighbour sampling and stay binary.
pub fn resize_plane(p: &ImagePlane, h: usize, w: usize) -> Result<ImagePlane> {
    let filter = filter_for(p.kind());
    ImagePlane::new(p.kind(), map_channels(p.data(), |c| resize_2d(c, h, w, filter)))
}

/// Mirrors a coordinate into `[0, n - 1]` without repeating the edge sample.
fn reflect(v: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let m = v.rem_euclid(period);
    if m > (n - 1) as f64 {
        period - m
    } else {
        m
    }
}

fn rotate_2d(a: &Array2<f32>, degrees: f64, filter: Filter) -> Array2<f32> {
    let (h, w) = a.dim();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let sx = reflect(cos * dx + sin * dy + cx, w);
        let sy = reflect(-sin * dx + cos * dy + cy, h);
        match filter {
            Filter::Nearest => a[[(sy.round() as usize).min(h - 1), (sx.round() as usize).min(w - 1)]],
            Filter::Bilinear => {
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
                let top = a[[y0, x0]] * (1.0 - fx) + a[[y0, x1]] * fx;
                let bottom = a[[y1, x0]] * (1.0 - fx) + a[[y1, x1]] * fx;
                (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
            }
        }
    })
}

/// Rotates a plane about its centre, filling uncovered corners by reflection.
pub fn rotate_plane(p: &ImagePlane, degrees: f64) -> Result<ImagePlane> {
    if degrees == 0.0 {
        return Ok(p.clone());
    }
    let filter = filter_for(p.kind());
    ImagePlane::new(p.kind(), map_channels(p.data(), |c| rotate_2d(c, degrees, filter)))
}

/// Reverses the column order of a plane.
pub fn flip_plane(p: &ImagePlane) -> Result<ImagePlane> {
    let mut data = p.data().clone();
    data.invert_axis(Axis(2));
    ImagePlane::new(p.kind(), data.as_standard_layout().to_owned())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub rgb: ImagePlane,
    pub depth: Option<ImagePlane>,
    pub gt: Option<ImagePlane>,
    pub angle_deg: f64,
    pub flipped: bool,
}

/// Applies one random rotation and, with probability one half, one
/// horizontal flip identically to every plane, resizing to `size x size`.
/// The angle and the coin are always drawn, so the same seed yields the
/// same angle whether or not flipping is enabled.
pub fn augment(
    rgb: &ImagePlane,
    depth: Option<&ImagePlane>,
    gt: Option<&ImagePlane>,
    cfg: &AugmentConfig,
    size: usize,
    seed: u64,
) -> Result<Augmented> {
    for p in depth.iter().chain(gt.iter()) {
        if (p.height(), p.width()) != (rgb.height(), rgb.width()) {
            return Err(Error::shape(
                "augment inputs",
                (rgb.height(), rgb.width()),
                (p.height(), p.width()),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max = cfg.max_rotation_deg.abs();
    let angle_deg = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
    let coin: bool = rng.random();
    let flipped = cfg.flip && coin;
    let apply = |p: &ImagePlane| -> Result<ImagePlane> {
        let p = resize_plane(&rotate_plane(p, angle_deg)?, size, size)?;
        if flipped {
            flip_plane(&p)
        } else {
            Ok(p)
        }
    };
    Ok(Augmented {
        rgb: apply(rgb)?,
        depth: depth.map(&apply).transpose()?,
        gt: gt.map(&apply).transpose()?,
        angle_deg,
        flipped,
    })
}

/// Resizes every plane of a sample to `size x size` without augmentation.
pub fn resize_sample(s: &Sample, size: usize) -> Result<Sample> {
    Ok(Sample {
        stem: s.stem.clone(),
        rgb: resize_plane(&s.rgb, size, size)?,
        depth: s.depth.as_ref().map(|p| resize_plane(p, size, size)).transpose()?,
        gt: s.gt.as_ref().map(|p| resize_plane(p, size, size)).transpose()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyCounts {
    pub labeled: usize,
    pub unlabeled: usize,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle { p: [(f64, f64); 3] },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let lo = size * 0.12;
        let hi = size * 0.3;
        let cx = rng.random_range(size * 0.2..size * 0.8);
        let cy = rng.random_range(size * 0.2..size * 0.8);
        match rng.random_range(0..3) {
            0 => Shape::Disc {
                cx,
                cy,
                r: rng.random_range(lo..hi),
            },
            1 => {
                let hw = rng.random_range(lo..hi);
                let hh = rng.random_range(lo..hi);
                Shape::Rect {
                    x0: cx - hw,
                    y0: cy - hh,
                    x1: cx + hw,
                    y1: cy + hh,
                }
            }
            _ => {
                let r = rng.random_range(lo * 1.3..hi * 1.3);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let p = [0.0, 1.0, 2.0].map(|k: f64| {
                    let a = phase + k * std::f64::consts::TAU / 3.0;
                    (cx + r * a.cos(), cy + r * a.sin())
                });
                Shape::Triangle { p }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Triangle { p } => {
                let side = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let d = [side(p[0], p[1]), side(p[1], p[2]), side(p[2], p[0])];
                d.iter().all(|v| *v >= 0.0) || d.iter().all(|v| *v <= 0.0)
            }
        }
    }
}

/// One synthetic scene: RGB, depth and saliency mask.
pub struct ToyScene {
    pub rgb: Array3<f32>,
    pub depth: Array2<f64>,
    pub gt: Array2<f64>,
}

/// Paints 2 to 4 shapes back to front over a textured background. Layer
/// `k` of `n` sits at depth `(k + 1) / (n + 1)` (nearer is brighter) and the
/// frontmost shape is the salient object.
pub fn toy_scene(rng: &mut ChaCha8Rng, size: usize) -> ToyScene {
    loop {
        let n = rng.random_range(2..=4);
        let shapes: Vec<(Shape, [f32; 3])> = (0..n)
            .map(|_| {
                let colour = [rng.random(), rng.random(), rng.random()];
                (Shape::random(rng, size as f64), colour)
            })
            .collect();
        let bg_a: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let bg_b: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let mut rgb = Array3::zeros((3, size, size));
        let mut depth = Array2::zeros((size, size));
        let mut gt = Array2::zeros((size, size));
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = (x + y) as f32 / (2 * size) as f32;
                let mut colour = [0f32; 3];
                for c in 0..3 {
                    colour[c] = bg_a[c] * (1.0 - t) + bg_b[c] * t;
                }
                let mut d = 0.0;
                let mut top = None;
                for (k, (shape, col)) in shapes.iter().enumerate() {
                    if shape.contains(px, py) {
                        colour = *col;
                        d = (k + 1) as f64 / (n + 1) as f64;
                        top = Some(k);
                    }
                }
                for c in 0..3 {
                    let noise: f32 = rng.random_range(-0.03..0.03);
                    rgb[[c, y, x]] = (colour[c] + noise).clamp(0.0, 1.0);
                }
                depth[[y, x]] = d;
                gt[[y, x]] = if top == Some(n - 1) { 1.0 } else { 0.0 };
            }
        }
        let positives = gt.iter().filter(|&&v| v > 0.5).count();
        if positives > 0 && positives < size * size {
            return ToyScene { rgb, depth, gt };
        }
    }
}

/// Writes `n_labeled` RGB/depth/GT triples under `out/labeled` and
/// `n_unlabeled` RGB images under `out/unlabeled`, all `size x size`.
pub fn make_toy_data(out: &Path, n_labeled: usize, n_unlabeled: usize, seed: u64, size: usize) -> Result<ToyCounts> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labeled = out.join("labeled");
    let unlabeled = out.join("unlabeled");
    for d in ["rgb", "depth", "gt"] {
        std::fs::create_dir_all(labeled.join(d))?;
    }
    std::fs::create_dir_all(unlabeled.join("rgb"))?;
    for i in 0..n_labeled {
        let s = toy_scene(&mut rng, size);
        let name = format!("toy_{i:04}.png");
        write_rgb8(&labeled.join("rgb").join(&name), &s.rgb)?;
        write_gray8(&labeled.join("depth").join(&name), &s.depth)?;
        write_gray8(&labeled.join("gt").join(&name), &s.gt)?;
    }
    for i in 0..n_unlabeled {
        let s = toy_scene(&mut rng, size);
        write_rgb8(&unlabeled.join("rgb").join(format!("toy_u{i:04}.png")), &s.rgb)?;
    }
    Ok(ToyCounts {
        labeled: n_labeled,
        unlabeled: n_unlabeled,
    })
}

/// Visits `0..n` in a fresh random order every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            order: Vec::new(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_index(&mut self) -> Option<usize> {
        if self.n == 0 {
            return None;
        }
        if self.pos == self.order.len() {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        Some(self.order[self.pos - 1])
    }

    pub fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k).filter_map(|_| self.next_index()).collect()
    }
}

/// Draws `batch_labeled` labeled and `batch_unlabeled` unlabeled indices per
/// iteration, cycling the two pools independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSampler {
    pub labeled: EpochSampler,
    pub unlabeled: EpochSampler,
    batch_labeled: usize,
    batch_unlabeled: usize,
}

impl BatchSampler {
    pub fn new(n_labeled: usize, n_unlabeled: usize, batch_labeled: usize, batch_unlabeled: usize, seed: u64) -> Self {
        Self {
            labeled: EpochSampler::new(n_labeled, seed),
            unlabeled: EpochSampler::new(n_unlabeled, seed.wrapping_add(0x9e37_79b9_7f4a_7c15)),
            batch_labeled,
            batch_unlabeled,
        }
    }

    pub fn next_batch(&mut self) -> (Vec<usize>, Vec<usize>) {
        (
            self.labeled.take(self.batch_labeled),
            self.unlabeled.take(self.batch_unlabeled),
        )
    }
}
