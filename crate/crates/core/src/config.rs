//! Run configuration, read from and written to TOML.
//!
//! Every key has a default, so an empty file is a valid configuration.
//!
//! ```toml
//! seed = 0
//! input_size = 256
//!
//! [encoder]
//! name = "tiny"
//! channels_per_level = [16, 32, 64, 128]
//!
//! [dgm]
//! softmax = true
//! hw_cap = 4096
//!
//! [train]
//! max_iter = 20000
//! ablation = ["no_reconstruction"]
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::EncoderSpec;
use crate::decoder::{AsppSpec, DecoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{DgmConfig, DimConfig, FusionVariant};
use crate::losses::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoDam,
    NoDgm,
    NoDim,
    NoDepthBranch,
    NoReconstruction,
    NoAttentionConsistency,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoDam,
        Ablation::NoDgm,
        Ablation::NoDim,
        Ablation::NoDepthBranch,
        Ablation::NoReconstruction,
        Ablation::NoAttentionConsistency,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    DepthPretrain,
    PseudoDepth,
    Semi,
    SupervisedOnly,
}

/// How stage-3 training initializes the encoder and decoupling layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Load them from the stage-1 checkpoint.
    Stage1,
    /// Train everything from random initialization.
    Scratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherInput {
    Jitter,
    Clean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaConfig {
    pub decay: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { decay: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    /// Brightness/contrast/saturation factors are drawn from
    /// `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
    pub teacher: TeacherInput,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            jitter: 0.4,
            teacher: TeacherInput::Jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 10.0,
            flip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub max_iter: u64,
    pub lr0: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub init: InitMode,
    pub ablation: BTreeSet<Ablation>,
    /// Iterations between progress log lines; 0 disables logging.
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            batch_labeled: 4,
            batch_unlabeled: 4,
            max_iter: 20_000,
            lr0: 0.001,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 0.0005,
            init: InitMode::Stage1,
            ablation: BTreeSet::new(),
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub device: String,
    /// Side length every training and inference image is resized to.
    pub input_size: usize,
    pub encoder: EncoderSpec,
    pub dgm: DgmConfig,
    pub dim: DimConfig,
    pub decoder: DecoderConfig,
    pub aspp: AsppSpec,
    pub loss: LossWeights,
    pub ema: EmaConfig,
    pub perturb: PerturbConfig,
    pub augment: AugmentConfig,
    pub train: RunConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            device: "cpu".into(),
            input_size: 256,
            encoder: EncoderSpec::default(),
            dgm: DgmConfig::default(),
            dim: DimConfig::default(),
            decoder: DecoderConfig::default(),
            aspp: AsppSpec::default(),
            loss: LossWeights::default(),
            ema: EmaConfig::default(),
            perturb: PerturbConfig::default(),
            augment: AugmentConfig::default(),
            train: RunConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.train.ablation.contains(&a)
    }

    pub fn fusion_variant(&self) -> FusionVariant {
        FusionVariant {
            dam: !self.has(Ablation::NoDam),
            dgm: !self.has(Ablation::NoDgm),
            dim: !self.has(Ablation::NoDim),
            depth_branch: !self.has(Ablation::NoDepthBranch),
        }
    }

    /// Loss weights with ablated terms zeroed.
    pub fn effective_loss_weights(&self) -> LossWeights {
        let mut w = self.loss.clone();
        if self.has(Ablation::NoReconstruction) || self.has(Ablation::NoDepthBranch) {
            w.beta1 = 0.0;
            w.beta2 = 0.0;
        }
        if self.has(Ablation::NoDepthBranch) {
            w.alpha = 0.0;
        }
        if self.has(Ablation::NoAttentionConsistency) {
            w.gamma = 0.0;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 || self.input_size < 64 {
            return Err(Error::Config(format!(
                "input_size must be a multiple of 32 and at least 64, got {}",
                self.input_size
            )));
        }
        self.encoder.validate()?;
        self.loss.validate()?;
        if !(0.0..=1.0).contains(&self.ema.decay) {
            return Err(Error::Config("ema.decay must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.perturb.jitter) {
            return Err(Error::Config("perturb.jitter must lie in [0, 1]".into()));
        }
        if self.train.batch_labeled == 0 {
            return Err(Error::Config("train.batch_labeled must be at least 1".into()));
        }
        if self.train.max_iter == 0 {
            return Err(Error::Config("train.max_iter must be positive".into()));
        }
        if self.dim.attention_channels.is_some_and(|c| c != 1) {
            return Err(Error::Config("dim.attention_channels must be 1 or unset".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_recipe() {
        let c = Config::default();
        assert_eq!(c.train.batch_labeled, 4);
        assert_eq!(c.train.batch_unlabeled, 4);
        assert_eq!(c.train.max_iter, 20_000);
        assert_eq!(c.train.lr0, 0.001);
        assert_eq!(c.train.poly_power, 0.9);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.train.weight_decay, 0.0005);
        assert_eq!(c.aspp.rates, vec![1, 6, 12, 18]);
        assert_eq!(c.loss, LossWeights::default());
        assert_eq!(c.ema.decay, 0.99);
        assert_eq!(c.input_size, 256);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let mut c = Config::default();
        c.train.ablation.insert(Ablation::NoDgm);
        c.dim.attention_channels = Some(1);
        let s = c.to_toml_string().unwrap();
        assert_eq!(Config::from_toml_str(&s).unwrap(), c);

        let partial = "input_size = 64\n[dgm]\nsoftmax = false\n[train]\nablation = [\"no_dam\"]\n";
        let p = Config::from_toml_str(partial).unwrap();
        assert_eq!(p.input_size, 64);
        assert!(!p.dgm.softmax);
        assert_eq!(p.dgm.hw_cap, 4096);
        assert!(p.has(Ablation::NoDam));
        assert!(!p.fusion_variant().dam);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_toml_str("input_size = 100").is_err());
        assert!(Config::from_toml_str("[ema]\ndecay = 1.5").is_err());
        assert!(Config::from_toml_str("[encoder]\nchannels_per_level = [1, 2, 3]").is_err());
        assert!(Config::from_toml_str("bogus_key = 1").is_err());
    }

    #[test]
    fn ablations_zero_their_terms() {
        let mut c = Config::default();
        c.train.ablation.insert(Ablation::NoAttentionConsistency);
        c.train.ablation.insert(Ablation::NoReconstruction);
        let w = c.effective_loss_weights();
        assert_eq!((w.gamma, w.beta1, w.beta2), (0.0, 0.0, 0.0));
        assert_eq!(w.alpha, 1.0);
    }
}
