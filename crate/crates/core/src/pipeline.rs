//! Training stages, pseudo-depth generation and inference.
//!
//! Stage 1 trains the depth branch on labeled RGB-D pairs. Stage 2 runs
//! that branch over unlabeled RGB images to produce pseudo depth. Stage 3
//! trains the whole network with a mean teacher on labeled pairs plus
//! unlabeled images with their pseudo depth. The supervised baseline is the
//! stage-3 loop without an unlabeled pool.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use log::info;
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{Config, InitMode, Stage};
use crate::data::{augment, load_depth, resize_plane, BatchSampler, SamplePool};
use crate::error::{Error, Result};
use crate::imageio::{list_images, read_rgb, stem_of, write_gray16, write_gray8};
use crate::losses::{bce, consistency_loss, lambda_warmup, mse, supervised_loss, total_loss_at, LossTerms};
use crate::mean_teacher::{paired_forward, EmaState};
use crate::model::{Ddcnn, Network, DEPTH_BRANCH_PREFIXES};
use crate::optim::{poly_lr, Sgd};
use crate::types::{stack_planes, ImagePlane, PlaneKind, PredictionPair};

/// Parameters are trained in single precision.
pub const TRAIN_DTYPE: DType = DType::F32;

/// One logged training iteration. `labeled` and `unlabeled` are the two
/// bracketed means of the objective before the warm-up weight is applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    pub lr: f64,
    pub lambda: f64,
    pub total: f64,
    pub labeled: f64,
    pub unlabeled: f64,
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("iteration,lr,lambda,total,labeled,unlabeled\n");
    for r in trace {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e}",
            r.iteration, r.lr, r.lambda, r.total, r.labeled, r.unlabeled
        );
    }
    s
}

pub struct TrainOutput {
    pub student: Network,
    pub teacher: Option<Network>,
    pub trace: Vec<TraceRow>,
    pub checkpoint: Checkpoint,
}

impl TrainOutput {
    /// Writes `checkpoint.safetensors` and `loss_trace.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("checkpoint.safetensors");
        self.checkpoint.save(&path)?;
        std::fs::write(dir.join("loss_trace.csv"), trace_csv(&self.trace))?;
        Ok(path)
    }
}

fn require_nonempty(pool: &SamplePool) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::EmptyDataset(pool.index().root.clone()));
    }
    Ok(())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Augmented labeled batch as `(rgb, depth, gt)` tensors.
fn labeled_batch(
    pool: &SamplePool,
    indices: &[usize],
    cfg: &Config,
    rng: &mut ChaCha8Rng,
    model: &Ddcnn,
) -> Result<(Tensor, Tensor, Tensor)> {
    let mut rgb = Vec::with_capacity(indices.len());
    let mut depth = Vec::with_capacity(indices.len());
    let mut gt = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = pool.get(i)?;
        let (Some(d), Some(g)) = (&s.depth, &s.gt) else {
            return Err(Error::Config(format!("labeled sample {} lacks depth or ground truth", s.stem)));
        };
        let a = augment(&s.rgb, Some(d), Some(g), &cfg.augment, cfg.input_size, rng.random())?;
        rgb.push(a.rgb);
        depth.push(a.depth.expect("depth given"));
        gt.push(a.gt.expect("gt given"));
    }
    let stack = |v: &[ImagePlane]| stack_planes(&v.iter().collect::<Vec<_>>(), TRAIN_DTYPE, model.device());
    Ok((stack(&rgb)?, stack(&depth)?, stack(&gt)?))
}

/// Unlabeled RGB planes and a stacked pseudo-depth tensor, resized only.
fn unlabeled_batch(pool: &SamplePool, indices: &[usize], size: usize, model: &Ddcnn) -> Result<(Vec<ImagePlane>, Tensor)> {
    let mut rgb = Vec::with_capacity(indices.len());
    let mut depth = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = pool.get(i)?;
        let Some(d) = &s.depth else {
            return Err(Error::Config(format!("unlabeled sample {} has no pseudo depth", s.stem)));
        };
        rgb.push(resize_plane(&s.rgb, size, size)?);
        depth.push(resize_plane(d, size, size)?);
    }
    let depth = stack_planes(&depth.iter().collect::<Vec<_>>(), TRAIN_DTYPE, model.device())?;
    Ok((rgb, depth))
}

fn log_progress(stage: &str, t: u64, every: u64, row: &TraceRow) {
    if every > 0 && (t % every == 0) {
        info!(
            "{stage} iter {t}: loss {:.5} (labeled {:.5}, unlabeled {:.5}, lr {:.2e}, lambda {:.3})",
            row.total, row.labeled, row.unlabeled, row.lr, row.lambda
        );
    }
}

fn sampler_json(s: &BatchSampler) -> Result<String> {
    serde_json::to_string(s).map_err(|e| Error::InvalidCheckpoint(e.to_string()))
}

/// Trains the RGB encoder, decoupling layers and depth head to regress the
/// ground-truth depth of labeled pairs.
pub fn train_stage1_depth(cfg: &Config, labeled: &SamplePool) -> Result<TrainOutput> {
    cfg.validate()?;
    require_nonempty(labeled)?;
    let net = Network::new(cfg, TRAIN_DTYPE, cfg.seed)?;
    if !net.model.has_depth_branch() {
        return Err(Error::Config("depth pre-training needs the depth branch".into()));
    }
    let run = &cfg.train;
    let mut sampler = BatchSampler::new(labeled.len(), 0, run.batch_labeled, 0, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut opt = Sgd::new(run.momentum, run.weight_decay);
    let in_branch = |n: &str| DEPTH_BRANCH_PREFIXES.iter().any(|p| n.starts_with(p));
    let mut trace = Vec::with_capacity(run.max_iter as usize);
    for t in 0..run.max_iter {
        let lr = poly_lr(t, run.max_iter, run.lr0, run.poly_power)?;
        let (idx, _) = sampler.next_batch();
        let (rgb, depth, _) = labeled_batch(labeled, &idx, cfg, &mut rng, &net.model)?;
        let loss = mse(&net.model.forward_depth(&rgb)?, &depth)?;
        let grads = loss.backward()?;
        opt.step_filtered(&net.store, &grads, lr, in_branch)?;
        let v = scalar(&loss)?;
        let row = TraceRow {
            iteration: t,
            lr,
            lambda: 0.0,
            total: v,
            labeled: v,
            unlabeled: 0.0,
        };
        log_progress("depth", t, run.log_every, &row);
        trace.push(row);
    }
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        stage: Stage::DepthPretrain,
        iteration: run.max_iter,
        student: net.store.snapshot()?,
        teacher: None,
        momentum: opt.buffers().clone(),
        sampler_state: Some(sampler_json(&sampler)?),
    };
    Ok(TrainOutput {
        student: net,
        teacher: None,
        trace,
        checkpoint,
    })
}

/// Mean-teacher training on labeled pairs plus unlabeled images carrying
/// pseudo depth. With `init = stage1` the encoder and decoupling layers
/// start from `init`; other layers are freshly initialized.
pub fn train_stage3_semi(
    cfg: &Config,
    labeled: &SamplePool,
    unlabeled: &SamplePool,
    init: Option<&Checkpoint>,
) -> Result<TrainOutput> {
    require_nonempty(unlabeled)?;
    if cfg.train.batch_unlabeled == 0 {
        return Err(Error::Config("train.batch_unlabeled must be at least 1 for semi-supervised training".into()));
    }
    if cfg.train.init == InitMode::Stage1 && init.is_none() {
        return Err(Error::MissingCheckpoint(PathBuf::from("<stage-1 checkpoint>")));
    }
    train_saliency(cfg, labeled, Some(unlabeled), init, Stage::Semi)
}

/// The stage-3 loop without unlabeled data. `init`, when given and the
/// config asks for it, initializes the depth branch as in stage 3.
pub fn train_supervised(cfg: &Config, labeled: &SamplePool, init: Option<&Checkpoint>) -> Result<TrainOutput> {
    train_saliency(cfg, labeled, None, init, Stage::SupervisedOnly)
}

fn train_saliency(
    cfg: &Config,
    labeled: &SamplePool,
    unlabeled: Option<&SamplePool>,
    init: Option<&Checkpoint>,
    stage: Stage,
) -> Result<TrainOutput> {
    cfg.validate()?;
    require_nonempty(labeled)?;
    let net = Network::new(cfg, TRAIN_DTYPE, cfg.seed)?;
    if let (InitMode::Stage1, Some(ck)) = (cfg.train.init, init) {
        let n = net.store.load_from(&ck.student, &DEPTH_BRANCH_PREFIXES)?;
        info!("initialized {n} parameters from the stage-1 checkpoint");
    }
    let teacher = match unlabeled {
        Some(_) => {
            let t = Network::new(cfg, TRAIN_DTYPE, cfg.seed)?;
            t.store.copy_from(&net.store)?;
            Some(t)
        }
        None => None,
    };
    let run = &cfg.train;
    let weights = cfg.effective_loss_weights();
    let mut ema = EmaState::new(cfg.ema.decay)?;
    let n_unlabeled = unlabeled.map_or(0, |u| u.len());
    let batch_unlabeled = if unlabeled.is_some() { run.batch_unlabeled } else { 0 };
    let mut sampler = BatchSampler::new(labeled.len(), n_unlabeled, run.batch_labeled, batch_unlabeled, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0003);
    let mut opt = Sgd::new(run.momentum, run.weight_decay);
    let mut trace = Vec::with_capacity(run.max_iter as usize);
    let zero = Tensor::zeros((), TRAIN_DTYPE, net.store.device())?;
    for t in 0..run.max_iter {
        let lr = poly_lr(t, run.max_iter, run.lr0, run.poly_power)?;
        let lambda = lambda_warmup(t, run.max_iter, weights.lambda_max)?;
        let (l_idx, u_idx) = sampler.next_batch();

        let (rgb, depth, gt) = labeled_batch(labeled, &l_idx, cfg, &mut rng, &net.model)?;
        let out = net.model.forward(&rgb, &depth)?;
        let main = match &out.depth {
            Some(p_d) => supervised_loss(&out.saliency, &gt, p_d, &depth, weights.alpha, weights.bce_eps)?,
            None => bce(&out.saliency, &gt, weights.bce_eps)?,
        };
        let reconstruction = out.reconstruction_loss()?.unwrap_or_else(|| zero.clone());
        let labeled_terms = [LossTerms { main, reconstruction }];

        let mut unlabeled_terms = Vec::new();
        if let (Some(pool), Some(teacher)) = (unlabeled, &teacher) {
            let (u_rgb, u_depth) = unlabeled_batch(pool, &u_idx, cfg.input_size, &net.model)?;
            let (s_out, t_out) = paired_forward(
                &net.model,
                &teacher.model,
                &u_rgb,
                &u_depth,
                cfg.perturb.jitter,
                cfg.perturb.teacher,
                TRAIN_DTYPE,
                rng.random(),
            )?;
            let main = consistency_loss(
                &s_out.saliency,
                &t_out.saliency,
                &s_out.attention_maps(),
                &t_out.attention,
                weights.gamma,
            )?;
            let reconstruction = s_out.reconstruction_loss()?.unwrap_or_else(|| zero.clone());
            unlabeled_terms.push(LossTerms { main, reconstruction });
        }

        let total = total_loss_at(&labeled_terms, &unlabeled_terms, &weights, lambda)?;
        let grads = total.backward()?;
        opt.step(&net.store, &grads, lr)?;
        if let Some(teacher) = &teacher {
            ema.update(&teacher.store, &net.store)?;
        }

        let labeled_v = scalar(&(&labeled_terms[0].main + (&labeled_terms[0].reconstruction * weights.beta1)?)?)?;
        let unlabeled_v = match unlabeled_terms.first() {
            Some(u) => scalar(&(&u.main + (&u.reconstruction * weights.beta2)?)?)?,
            None => 0.0,
        };
        let row = TraceRow {
            iteration: t,
            lr,
            lambda: if unlabeled.is_some() { lambda } else { 0.0 },
            total: scalar(&total)?,
            labeled: labeled_v,
            unlabeled: unlabeled_v,
        };
        log_progress("saliency", t, run.log_every, &row);
        trace.push(row);
    }
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        stage,
        iteration: run.max_iter,
        student: net.store.snapshot()?,
        teacher: teacher.as_ref().map(|t| t.store.snapshot()).transpose()?,
        momentum: opt.buffers().clone(),
        sampler_state: Some(sampler_json(&sampler)?),
    };
    Ok(TrainOutput {
        student: net,
        teacher,
        trace,
        checkpoint,
    })
}

fn to_2d(plane: &ImagePlane) -> Array2<f64> {
    plane.data().index_axis(Axis(0), 0).mapv(f64::from)
}

/// Depth prediction at the network's input resolution.
pub fn predict_depth(model: &Ddcnn, rgb: &ImagePlane) -> Result<ImagePlane> {
    let size = model.input_size();
    let x = resize_plane(rgb, size, size)?.to_tensor(TRAIN_DTYPE, model.device())?;
    ImagePlane::from_tensor(PlaneKind::Depth, &model.forward_depth(&x)?)
}

/// Student prediction for one image at its native resolution. Without a
/// depth map the depth branch supplies pseudo depth.
pub fn predict(model: &Ddcnn, rgb: &ImagePlane, depth: Option<&ImagePlane>) -> Result<PredictionPair> {
    let size = model.input_size();
    let (h, w) = (rgb.height(), rgb.width());
    let depth_in = match depth {
        Some(d) => resize_plane(d, size, size)?,
        None if model.has_depth_branch() => predict_depth(model, rgb)?,
        None => return Err(Error::Config("a depth map is required by a model without a depth branch".into())),
    };
    let x = resize_plane(rgb, size, size)?.to_tensor(TRAIN_DTYPE, model.device())?;
    let d = depth_in.to_tensor(TRAIN_DTYPE, model.device())?;
    let out = model.forward(&x, &d)?;
    let saliency = ImagePlane::from_tensor(PlaneKind::Saliency, &out.saliency)?;
    Ok(PredictionPair {
        saliency: resize_plane(&saliency, h, w)?,
        depth: match depth {
            Some(d) => d.clone(),
            None => resize_plane(&depth_in, h, w)?,
        },
    })
}

fn read_rgb_plane(path: &Path) -> Result<ImagePlane> {
    ImagePlane::new(PlaneKind::Rgb, read_rgb(path)?)
}

/// Writes one 16-bit pseudo-depth PNG per image in `rgb_dir`, named by stem,
/// at the image's own resolution. Returns the number written.
pub fn generate_pseudo_depth(checkpoint: &Path, rgb_dir: &Path, out_dir: &Path) -> Result<usize> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let net = ckpt.student_network()?;
    if !rgb_dir.is_dir() {
        return Err(Error::MissingSubdir(rgb_dir.to_path_buf()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut count = 0;
    for path in list_images(rgb_dir)? {
        let rgb = read_rgb_plane(&path)?;
        let d = predict_depth(&net.model, &rgb)?;
        let d = resize_plane(&d, rgb.height(), rgb.width())?;
        write_gray16(&out_dir.join(format!("{}.png", stem_of(&path))), &to_2d(&d))?;
        count += 1;
    }
    Ok(count)
}

/// Runs the student of `checkpoint` on one image and writes the saliency
/// map as an 8-bit grayscale PNG to `out`.
pub fn infer(checkpoint: &Path, rgb: &Path, depth: Option<&Path>, out: &Path) -> Result<PredictionPair> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let net = ckpt.student_network()?;
    infer_with(&net.model, rgb, depth, out)
}

/// [`infer`] with an already loaded model.
pub fn infer_with(model: &Ddcnn, rgb: &Path, depth: Option<&Path>, out: &Path) -> Result<PredictionPair> {
    let rgb = read_rgb_plane(rgb)?;
    let depth = depth.map(load_depth).transpose()?;
    let pair = predict(model, &rgb, depth.as_ref())?;
    write_gray8(out, &to_2d(&pair.saliency))?;
    Ok(pair)
}

/// Mean absolute error of the student's saliency over a labeled pool, with
/// images, depth and ground truth resized to the input resolution.
pub fn saliency_mae(model: &Ddcnn, pool: &SamplePool) -> Result<f64> {
    require_nonempty(pool)?;
    let size = model.input_size();
    let mut total = 0.0;
    for i in 0..pool.len() {
        let s = pool.get(i)?;
        let (Some(d), Some(g)) = (&s.depth, &s.gt) else {
            return Err(Error::Config(format!("sample {} lacks depth or ground truth", s.stem)));
        };
        let rgb = resize_plane(&s.rgb, size, size)?;
        let pred = predict(model, &rgb, Some(&resize_plane(d, size, size)?))?;
        total += crate::metrics::mae(&to_2d(&pred.saliency), &to_2d(&resize_plane(g, size, size)?))?;
    }
    Ok(total / pool.len() as f64)
}

/// Mean squared depth error of the depth branch over a labeled pool at the
/// input resolution.
pub fn depth_mse(model: &Ddcnn, pool: &SamplePool) -> Result<f64> {
    require_nonempty(pool)?;
    let size = model.input_size();
    let mut total = 0.0;
    for i in 0..pool.len() {
        let s = pool.get(i)?;
        let Some(d) = &s.depth else {
            return Err(Error::Config(format!("sample {} lacks depth", s.stem)));
        };
        let pred = to_2d(&predict_depth(model, &s.rgb)?);
        let target = to_2d(&resize_plane(d, size, size)?);
        total += pred.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    }
    Ok(total / pool.len() as f64)
}
