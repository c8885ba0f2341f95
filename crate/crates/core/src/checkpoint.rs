//! Versioned checkpoints stored as a single safetensors file.
//!
//! Tensors are keyed `student.<param>`, `teacher.<param>` and
//! `momentum.<param>`; the header metadata carries the format version, the
//! config as TOML, the stage, the iteration counter and the serialized
//! sampler state.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::config::{Config, Stage};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::params::ParamStore;

pub const FORMAT_VERSION: &str = "1";

const STUDENT: &str = "student.";
const TEACHER: &str = "teacher.";
const MOMENTUM: &str = "momentum.";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: Config,
    pub stage: Stage,
    pub iteration: u64,
    pub student: BTreeMap<String, Tensor>,
    pub teacher: Option<BTreeMap<String, Tensor>>,
    pub momentum: BTreeMap<String, Tensor>,
    /// JSON of the batch sampler, for resuming the data stream.
    pub sampler_state: Option<String>,
}

fn stage_name(stage: Stage) -> Result<String> {
    serde_json::to_string(&stage)
        .map(|s| s.trim_matches('"').to_string())
        .map_err(|e| Error::InvalidCheckpoint(e.to_string()))
}

fn parse_stage(s: &str) -> Result<Stage> {
    serde_json::from_str(&format!("\"{s}\"")).map_err(|_| Error::InvalidCheckpoint(format!("unknown stage {s}")))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        tensors.extend(self.student.iter().map(|(k, v)| (format!("{STUDENT}{k}"), v)));
        if let Some(t) = &self.teacher {
            tensors.extend(t.iter().map(|(k, v)| (format!("{TEACHER}{k}"), v)));
        }
        tensors.extend(self.momentum.iter().map(|(k, v)| (format!("{MOMENTUM}{k}"), v)));
        let mut meta = HashMap::new();
        meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
        meta.insert("config".to_string(), self.config.to_toml_string()?);
        meta.insert("stage".to_string(), stage_name(self.stage)?);
        meta.insert("iteration".to_string(), self.iteration.to_string());
        if let Some(s) = &self.sampler_state {
            meta.insert("sampler".to_string(), s.clone());
        }
        safetensors::serialize_to_file(tensors, Some(meta), path)
            .map_err(|e| Error::InvalidCheckpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        let invalid = |e: String| Error::InvalidCheckpoint(format!("{}: {e}", path.display()));
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| invalid(e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| invalid(format!("missing {k}")));
        let version = field("format_version")?;
        if version != FORMAT_VERSION {
            return Err(invalid(format!("unsupported format version {version}")));
        }
        let config = Config::from_toml_str(&field("config")?)?;
        let stage = parse_stage(&field("stage")?)?;
        let iteration = field("iteration")?.parse().map_err(|_| invalid("bad iteration".into()))?;
        let all = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let mut student = BTreeMap::new();
        let mut teacher = BTreeMap::new();
        let mut momentum = BTreeMap::new();
        for (k, v) in all {
            if let Some(n) = k.strip_prefix(STUDENT) {
                student.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix(TEACHER) {
                teacher.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix(MOMENTUM) {
                momentum.insert(n.to_string(), v);
            } else {
                return Err(invalid(format!("unexpected tensor {k}")));
            }
        }
        if student.is_empty() {
            return Err(invalid("no student parameters".into()));
        }
        Ok(Self {
            config,
            stage,
            iteration,
            student,
            teacher: if teacher.is_empty() { None } else { Some(teacher) },
            momentum,
            sampler_state: meta.get("sampler").cloned(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.student.values().next().map(|t| t.dtype()).unwrap_or(DType::F32)
    }

    /// An empty network for this checkpoint's config. Pretrained encoder
    /// files are not consulted since every parameter is overwritten.
    fn blank_network(&self) -> Result<Network> {
        let mut cfg = self.config.clone();
        cfg.encoder.pretrained = false;
        Network::new(&cfg, self.dtype(), cfg.seed)
    }

    /// Rebuilds the student network with its saved parameters.
    pub fn student_network(&self) -> Result<Network> {
        let net = self.blank_network()?;
        net.store.load_from(&self.student, &[])?;
        Ok(net)
    }

    /// Rebuilds the teacher network, if the checkpoint holds one.
    pub fn teacher_network(&self) -> Result<Option<Network>> {
        let Some(t) = &self.teacher else {
            return Ok(None);
        };
        let net = self.blank_network()?;
        net.store.load_from(t, &[])?;
        Ok(Some(net))
    }
}

/// Loads a checkpoint and its student network.
pub fn load_student(path: &Path) -> Result<(Checkpoint, Network)> {
    let ckpt = Checkpoint::load(path)?;
    let net = ckpt.student_network()?;
    Ok((ckpt, net))
}

/// Snapshot of a network as a checkpoint with no teacher and no optimizer
/// state.
pub fn snapshot(config: &Config, stage: Stage, iteration: u64, store: &ParamStore) -> Result<Checkpoint> {
    Ok(Checkpoint {
        config: config.clone(),
        stage,
        iteration,
        student: store.snapshot()?,
        teacher: None,
        momentum: BTreeMap::new(),
        sampler_state: None,
    })
}
