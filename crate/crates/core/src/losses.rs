//! Training objectives: supervised saliency + depth loss, student/teacher
//! consistency, the Gaussian warm-up weight and the combined objective.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::LEVELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Depth term in the supervised loss.
    pub alpha: f64,
    /// Attention-map term in the consistency loss.
    pub gamma: f64,
    /// Reconstruction weight for labeled samples.
    pub beta1: f64,
    /// Reconstruction weight for unlabeled samples.
    pub beta2: f64,
    pub lambda_max: f64,
    /// Probability clamp for binary cross-entropy.
    pub bce_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 0.1,
            beta1: 0.01,
            beta2: 1.0,
            lambda_max: 1.0,
            bce_eps: 1e-7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("lambda_max", self.lambda_max),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be nonnegative, got {v}")));
            }
        }
        if !(self.bce_eps > 0.0 && self.bce_eps < 0.5) {
            return Err(Error::Config("loss.bce_eps must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

fn check_same(context: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(context, a.dims(), b.dims()));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same("mse operands", a, b)?;
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Mean binary cross-entropy with `p` clamped to `[eps, 1 - eps]`.
pub fn bce(p: &Tensor, g: &Tensor, eps: f64) -> Result<Tensor> {
    check_same("bce operands", p, g)?;
    let p = p.clamp(eps, 1.0 - eps)?;
    let pos = (g * p.log()?)?;
    let neg = (g.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// `BCE(p_s, g_s) + alpha * MSE(p_d, g_d)`.
pub fn supervised_loss(
    p_s: &Tensor,
    g_s: &Tensor,
    p_d: &Tensor,
    g_d: &Tensor,
    alpha: f64,
    eps: f64,
) -> Result<Tensor> {
    check_same("saliency vs depth prediction", p_s, p_d)?;
    Ok((bce(p_s, g_s, eps)? + (mse(p_d, g_d)? * alpha)?)?)
}

/// `MSE(S_s, T_s) + gamma * sum_l MSE(S_A^l, T_A^l)`, each level averaged
/// over its own elements. Attention lists are either both empty (the
/// fusion variant has no attention maps) or both hold four levels.
pub fn consistency_loss(
    s_sal: &Tensor,
    t_sal: &Tensor,
    s_attn: &[Tensor],
    t_attn: &[Tensor],
    gamma: f64,
) -> Result<Tensor> {
    if s_attn.len() != t_attn.len() {
        return Err(Error::WrongLevelCount {
            expected: s_attn.len(),
            actual: t_attn.len(),
        });
    }
    if !s_attn.is_empty() && s_attn.len() != LEVELS {
        return Err(Error::WrongLevelCount {
            expected: LEVELS,
            actual: s_attn.len(),
        });
    }
    let mut loss = mse(s_sal, t_sal)?;
    if gamma != 0.0 {
        for (s, t) in s_attn.iter().zip(t_attn) {
            loss = (loss + (mse(s, t)? * gamma)?)?;
        }
    } else {
        for (s, t) in s_attn.iter().zip(t_attn) {
            check_same("attention maps", s, t)?;
        }
    }
    Ok(loss)
}

/// `lambda_max * exp(-5 (1 - t / t_max)^2)`.
pub fn lambda_warmup(t: u64, t_max: u64, lambda_max: f64) -> Result<f64> {
    if t_max == 0 || t > t_max {
        return Err(Error::OutOfRange {
            name: "t",
            value: t as f64,
            min: 0.0,
            max: t_max as f64,
        });
    }
    let phase = 1.0 - t as f64 / t_max as f64;
    Ok(lambda_max * (-5.0 * phase * phase).exp())
}

/// Loss terms of one sample (or of a batch, as means over its samples).
#[derive(Debug, Clone)]
pub struct LossTerms {
    /// Supervised loss for labeled data, consistency loss for unlabeled.
    pub main: Tensor,
    /// Reconstruction losses summed over the four levels.
    pub reconstruction: Tensor,
}

fn mean_of(terms: &[LossTerms], beta: f64) -> Result<Tensor> {
    let mut sum: Option<Tensor> = None;
    for t in terms {
        let v = (&t.main + (&t.reconstruction * beta)?)?;
        sum = Some(match sum {
            Some(s) => (s + v)?,
            None => v,
        });
    }
    match sum {
        Some(s) => Ok((s / terms.len() as f64)?),
        None => Err(Error::EmptyLabeledBatch),
    }
}

/// Mean over unlabeled terms of `L_c + beta2 * sum_l L_r`; the quantity the
/// warm-up weight multiplies.
pub fn unlabeled_mean(unlabeled: &[LossTerms], weights: &LossWeights) -> Result<Option<Tensor>> {
    if unlabeled.is_empty() {
        return Ok(None);
    }
    mean_of(unlabeled, weights.beta2).map(Some)
}

/// Combined objective for an explicit unlabeled weight `lambda`.
pub fn total_loss_at(
    labeled: &[LossTerms],
    unlabeled: &[LossTerms],
    weights: &LossWeights,
    lambda: f64,
) -> Result<Tensor> {
    if labeled.is_empty() {
        return Err(Error::EmptyLabeledBatch);
    }
    let sup = mean_of(labeled, weights.beta1)?;
    match unlabeled_mean(unlabeled, weights)? {
        Some(u) => Ok((sup + (u * lambda)?)?),
        None => Ok(sup),
    }
}

/// Combined objective with the warm-up weight at iteration `t`.
pub fn total_loss(
    labeled: &[LossTerms],
    unlabeled: &[LossTerms],
    weights: &LossWeights,
    t: u64,
    t_max: u64,
) -> Result<Tensor> {
    let lambda = lambda_warmup(t, t_max, weights.lambda_max)?;
    total_loss_at(labeled, unlabeled, weights, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    fn filled(v: f64) -> Tensor {
        Tensor::full(v, (1, 1, 4, 4), &Device::Cpu).unwrap()
    }

    #[test]
    fn one_pixel_supervised_example() {
        let l = supervised_loss(&scalar(0.8), &scalar(1.0), &scalar(0.3), &scalar(0.5), 1.0, 1e-7).unwrap();
        // -ln 0.8 + 0.2^2
        assert!((val(&l) - 0.263_143_551_314_209_7).abs() < 1e-12);
    }

    #[test]
    fn bce_at_one_half_is_ln2() {
        let g = Tensor::new(&[[0f64, 1.0], [1.0, 0.0]], &Device::Cpu).unwrap();
        let p = Tensor::full(0.5f64, (2, 2), &Device::Cpu).unwrap();
        assert!((val(&bce(&p, &g, 1e-7).unwrap()) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn near_perfect_prediction() {
        let eps = 1e-7;
        let g = Tensor::new(&[0f64, 1.0, 1.0, 0.0], &Device::Cpu).unwrap();
        let d = Tensor::new(&[0.1f64, 0.2, 0.3, 0.4], &Device::Cpu).unwrap();
        let l = supervised_loss(&g, &g, &d, &d, 1.0, eps).unwrap();
        assert!((val(&l) + (1.0 - eps).ln()).abs() < 1e-15);
    }

    #[test]
    fn consistency_examples() {
        let attn: Vec<Tensor> = (0..4).map(|_| filled(0.3)).collect();
        let zero = consistency_loss(&filled(0.2), &filled(0.2), &attn, &attn, 0.1).unwrap();
        assert_eq!(val(&zero), 0.0);

        let mut shifted = attn.clone();
        shifted[2] = filled(1.3);
        let one = consistency_loss(&filled(0.2), &filled(0.2), &attn, &shifted, 0.1).unwrap();
        assert!((val(&one) - 0.1).abs() < 1e-12);

        let q = consistency_loss(&filled(0.75), &filled(0.25), &attn, &attn, 0.1).unwrap();
        assert!((val(&q) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn consistency_level_count() {
        let attn: Vec<Tensor> = (0..4).map(|_| filled(0.3)).collect();
        assert!(matches!(
            consistency_loss(&filled(0.0), &filled(0.0), &attn, &attn[..3], 0.1),
            Err(Error::WrongLevelCount { .. })
        ));
        assert!(matches!(
            consistency_loss(&filled(0.0), &filled(0.0), &attn[..2], &attn[..2], 0.1),
            Err(Error::WrongLevelCount { .. })
        ));
        assert!(consistency_loss(&filled(0.0), &filled(0.0), &[], &[], 0.1).is_ok());
    }

    #[test]
    fn warmup_values() {
        assert_eq!(lambda_warmup(100, 100, 1.0).unwrap(), 1.0);
        assert!((lambda_warmup(0, 100, 1.0).unwrap() - 0.006_737_946_999_085_467).abs() < 1e-15);
        assert!((lambda_warmup(50, 100, 1.0).unwrap() - 0.286_504_796_860_190_1).abs() < 1e-15);
        assert!(lambda_warmup(101, 100, 1.0).is_err());
        assert!(lambda_warmup(0, 0, 1.0).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let labeled = [LossTerms {
            main: scalar(1.0),
            reconstruction: scalar(2.0),
        }];
        let unlabeled = [LossTerms {
            main: scalar(0.5),
            reconstruction: scalar(1.0),
        }];
        let t = total_loss(&labeled, &unlabeled, &w, 10, 10).unwrap();
        assert!((val(&t) - 2.52).abs() < 1e-12);

        let sup_only = total_loss(&labeled, &[], &w, 3, 10).unwrap();
        assert!((val(&sup_only) - 1.02).abs() < 1e-12);

        let zeros = [LossTerms {
            main: scalar(0.0),
            reconstruction: scalar(0.0),
        }];
        assert_eq!(val(&total_loss(&zeros, &zeros, &w, 5, 10).unwrap()), 0.0);
        assert!(matches!(
            total_loss(&[], &unlabeled, &w, 1, 10),
            Err(Error::EmptyLabeledBatch)
        ));
    }

    #[test]
    fn weights_must_be_nonnegative() {
        let w = LossWeights {
            gamma: -0.1,
            ..Default::default()
        };
        assert!(w.validate().is_err());
        LossWeights::default().validate().unwrap();
    }
}
