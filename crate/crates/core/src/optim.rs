//! SGD with momentum and decoupled parameter groups, plus the poly
//! learning-rate schedule.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// `lr0 * (1 - t / t_max)^power`.
pub fn poly_lr(t: u64, t_max: u64, lr0: f64, power: f64) -> Result<f64> {
    if t_max == 0 || t > t_max {
        return Err(Error::OutOfRange {
            name: "t",
            value: t as f64,
            min: 0.0,
            max: t_max as f64,
        });
    }
    Ok(lr0 * (1.0 - t as f64 / t_max as f64).powf(power))
}

/// Normalization scales and biases are excluded from weight decay.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains("norm."))
}

/// PyTorch-style SGD: `g = grad + wd * p`, `buf = m * buf + g`,
/// `p -= lr * buf`. Parameters without a gradient are left untouched.
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    /// Parameter names in the decayed group and in the undecayed group.
    pub fn groups(store: &ParamStore) -> (Vec<String>, Vec<String>) {
        store.names().into_iter().partition(|n| decays(n))
    }

    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step_filtered(store, grads, lr, |_| true)
    }

    /// Updates only parameters whose name satisfies `keep`.
    pub fn step_filtered(
        &mut self,
        store: &ParamStore,
        grads: &GradStore,
        lr: f64,
        keep: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, var) in store.vars() {
            if !keep(&name) {
                continue;
            }
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let mut g = grad.clone();
            if self.weight_decay != 0.0 && decays(&name) {
                g = (g + (var.as_tensor() * self.weight_decay)?)?;
            }
            let buf = match self.buffers.get(&name) {
                Some(b) if self.momentum != 0.0 => ((b * self.momentum)? + g)?,
                _ => g,
            };
            let next = (var.as_tensor() - (&buf * lr)?)?;
            var.set(&next)?;
            if self.momentum != 0.0 {
                self.buffers.insert(name, buf.detach());
            }
        }
        Ok(())
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: BTreeMap<String, Tensor>) {
        self.buffers = buffers;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0, 20_000, 0.001, 0.9).unwrap(), 0.001);
        assert_eq!(poly_lr(20_000, 20_000, 0.001, 0.9).unwrap(), 0.0);
        let mid = poly_lr(10_000, 20_000, 0.001, 0.9).unwrap();
        assert!((mid - 5.358_867_312_681_466e-4).abs() < 1e-15);
        assert!(poly_lr(20_001, 20_000, 0.001, 0.9).is_err());
    }

    #[test]
    fn decay_grouping() {
        let store = ParamStore::new(DType::F32, Device::Cpu, 0);
        store.root().pp("conv").constant("weight", &[1], 1.0).unwrap();
        store.root().pp("conv").constant("bias", &[1], 1.0).unwrap();
        store.root().pp("stem_norm").constant("weight", &[1], 1.0).unwrap();
        store.root().pp("stage1").pp("norm").constant("weight", &[1], 1.0).unwrap();
        let (decayed, plain) = Sgd::groups(&store);
        assert_eq!(decayed, vec!["conv.weight".to_string()]);
        assert_eq!(plain.len(), 3);
    }

    #[test]
    fn momentum_matches_hand_iteration() {
        let store = ParamStore::new(DType::F64, Device::Cpu, 0);
        store.root().constant("w", &[1], 1.0).unwrap();
        let var = store.get("w").unwrap();
        let mut opt = Sgd::new(0.9, 0.1);
        // loss = w^2 / 2 -> grad = w
        let mut w = 1.0f64;
        let mut buf = 0.0f64;
        for step in 0..3 {
            let loss = (var.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&store, &grads, 0.5).unwrap();
            let g = w + 0.1 * w;
            buf = if step == 0 { g } else { 0.9 * buf + g };
            w -= 0.5 * buf;
            let got = var.as_tensor().to_vec1::<f64>().unwrap()[0];
            assert!((got - w).abs() < 1e-14, "step {step}: {got} vs {w}");
        }
    }
}
