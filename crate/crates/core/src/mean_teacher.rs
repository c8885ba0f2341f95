//! Mean-teacher machinery: the EMA teacher update, photometric jitter for
//! unlabeled images, and paired student/teacher forward passes.

use candle_core::{DType, Tensor};
use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TeacherInput;
use crate::error::{Error, Result};
use crate::model::{Ddcnn, DdcnnOutput};
use crate::params::ParamStore;
use crate::types::{stack_planes, ImagePlane, PlaneKind};

/// Step counter and decay of the teacher's moving average. The teacher
/// parameters themselves live in their own [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub step: u64,
}

impl EmaState {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::OutOfRange {
                name: "ema decay",
                value: decay,
                min: 0.0,
                max: 1.0,
            });
        }
        Ok(Self { decay, step: 0 })
    }

    pub fn update(&mut self, teacher: &ParamStore, student: &ParamStore) -> Result<()> {
        ema_update(teacher, student, self.decay)?;
        self.step += 1;
        Ok(())
    }
}

/// `teacher <- decay * teacher + (1 - decay) * student` for every parameter.
pub fn ema_update(teacher: &ParamStore, student: &ParamStore, decay: f64) -> Result<()> {
    let t_vars = teacher.vars();
    let s_vars = student.vars();
    if t_vars.len() != s_vars.len() {
        return Err(Error::shape("teacher parameter count", s_vars.len(), t_vars.len()));
    }
    for ((tn, t), (sn, s)) in t_vars.iter().zip(&s_vars) {
        if tn != sn || t.dims() != s.dims() {
            return Err(Error::shape(
                format!("teacher parameter {tn}"),
                format!("{sn} {:?}", s.dims()),
                format!("{tn} {:?}", t.dims()),
            ));
        }
        let s = s.as_tensor().detach().to_dtype(t.dtype())?;
        if decay == 1.0 {
            continue;
        }
        let next = if decay == 0.0 {
            s.copy()?
        } else {
            ((t.as_tensor().detach() * decay)? + (s * (1.0 - decay))?)?
        };
        t.set(&next)?;
    }
    Ok(())
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn gray(data: &Array3<f32>) -> ndarray::Array2<f32> {
    let mut g = data.index_axis(Axis(0), 0).mapv(|v| v * LUMA[0]);
    for c in 1..3 {
        g.zip_mut_with(&data.index_axis(Axis(0), c), |a, b| *a += b * LUMA[c]);
    }
    g
}

/// Brightness, contrast and saturation jitter, applied in that order, each
/// factor drawn from `[1 - jitter, 1 + jitter]` and each step clamped to
/// `[0, 1]`. A factor of exactly one leaves the image untouched.
pub fn perturb(x: &ImagePlane, jitter: f64, seed: u64) -> Result<ImagePlane> {
    if x.kind() != PlaneKind::Rgb {
        return Err(Error::shape("perturb input", "rgb plane", format!("{:?}", x.kind())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> f32 {
        if jitter == 0.0 {
            1.0
        } else {
            rng.random_range(1.0 - jitter..=1.0 + jitter) as f32
        }
    };
    let (brightness, contrast, saturation) = (draw(), draw(), draw());
    let mut data = x.data().clone();
    if brightness != 1.0 {
        data.mapv_inplace(|v| (v * brightness).clamp(0.0, 1.0));
    }
    if contrast != 1.0 {
        let mean = gray(&data).mean().unwrap_or(0.0);
        data.mapv_inplace(|v| ((v - mean) * contrast + mean).clamp(0.0, 1.0));
    }
    if saturation != 1.0 {
        let g = gray(&data);
        for mut channel in data.axis_iter_mut(Axis(0)) {
            channel.zip_mut_with(&g, |v, g| *v = (g + (*v - g) * saturation).clamp(0.0, 1.0));
        }
    }
    ImagePlane::new(PlaneKind::Rgb, data)
}

/// Teacher predictions, detached from the autograd graph.
pub struct TeacherOutput {
    pub saliency: Tensor,
    pub attention: Vec<Tensor>,
}

fn jitter_batch(rgb: &[ImagePlane], jitter: f64, seeds: &[u64], dtype: DType, model: &Ddcnn) -> Result<Tensor> {
    let perturbed = rgb
        .iter()
        .zip(seeds)
        .map(|(x, &s)| perturb(x, jitter, s))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ImagePlane> = perturbed.iter().collect();
    stack_planes(&refs, dtype, model.device())
}

/// Runs the student on jittered `rgb` and the teacher on independently
/// jittered (or clean) `rgb`; both see the same `depth`, which is never
/// perturbed. Teacher outputs are detached, so gradients of any loss built
/// from the pair reach only the student.
#[allow(clippy::too_many_arguments)]
pub fn paired_forward(
    student: &Ddcnn,
    teacher: &Ddcnn,
    rgb: &[ImagePlane],
    depth: &Tensor,
    jitter: f64,
    teacher_input: TeacherInput,
    dtype: DType,
    seed: u64,
) -> Result<(DdcnnOutput, TeacherOutput)> {
    if rgb.len() != depth.dim(0)? {
        return Err(Error::shape("paired forward batch", rgb.len(), depth.dim(0)?));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let student_seeds: Vec<u64> = (0..rgb.len()).map(|_| rng.random()).collect();
    let teacher_seeds: Vec<u64> = (0..rgb.len()).map(|_| rng.random()).collect();
    let s_rgb = jitter_batch(rgb, jitter, &student_seeds, dtype, student)?;
    let t_rgb = match teacher_input {
        TeacherInput::Jitter => jitter_batch(rgb, jitter, &teacher_seeds, dtype, teacher)?,
        TeacherInput::Clean => jitter_batch(rgb, 0.0, &teacher_seeds, dtype, teacher)?,
    };
    let s_out = student.forward(&s_rgb, depth)?;
    let t_out = teacher.forward(&t_rgb, depth)?;
    let t_out = TeacherOutput {
        saliency: t_out.saliency.detach(),
        attention: t_out.attention_maps().iter().map(|a| a.detach()).collect(),
    };
    Ok((s_out, t_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn scalar_store(v: f64) -> ParamStore {
        let s = ParamStore::new(DType::F64, Device::Cpu, 0);
        s.root().constant("w", &[1], v).unwrap();
        s
    }

    fn value(s: &ParamStore) -> f64 {
        s.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn ema_closed_form_examples() {
        let t = scalar_store(1.0);
        let s = scalar_store(0.0);
        ema_update(&t, &s, 0.99).unwrap();
        assert!((value(&t) - 0.99).abs() < 1e-15);
        ema_update(&t, &s, 1.0).unwrap();
        assert!((value(&t) - 0.99).abs() < 1e-15);
        ema_update(&t, &s, 0.0).unwrap();
        assert_eq!(value(&t), 0.0);
    }

    #[test]
    fn ema_rejects_mismatched_stores() {
        let t = scalar_store(1.0);
        let s = ParamStore::new(DType::F64, Device::Cpu, 0);
        s.root().constant("w", &[2], 0.0).unwrap();
        assert!(matches!(ema_update(&t, &s, 0.5), Err(Error::ShapeMismatch { .. })));
        assert!(EmaState::new(1.5).is_err());
    }

    fn rgb_plane(seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((3, 6, 5), |_| rng.random::<f32>());
        ImagePlane::new(PlaneKind::Rgb, data).unwrap()
    }

    #[test]
    fn zero_jitter_is_identity() {
        let x = rgb_plane(3);
        assert_eq!(perturb(&x, 0.0, 11).unwrap(), x);
    }

    #[test]
    fn jitter_is_seeded_and_clamped() {
        let x = rgb_plane(4);
        let a = perturb(&x, 0.4, 7).unwrap();
        assert_eq!(a, perturb(&x, 0.4, 7).unwrap());
        assert_ne!(a, perturb(&x, 0.4, 8).unwrap());
        assert!(a.min() >= 0.0 && a.max() <= 1.0);
    }
}
