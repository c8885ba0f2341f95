//! The full two-branch network: RGB and depth encoders, depth decoupling
//! with its depth head, per-level depth-induced fusion and the saliency
//! decoder.

use candle_core::{DType, Device, Tensor};

use crate::backbone::PyramidEncoder;
use crate::config::Config;
use crate::decoder::SaliencyDecoder;
use crate::decoupling::{total_reconstruction_loss, Decoupler, DepthHead};
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::params::ParamStore;
use crate::types::{DecoupledFeatures, FeaturePyramid, FusionOutputs, PyramidSource};

/// Parameter-name prefixes of the depth branch, i.e. everything trained in
/// the depth pre-training stage.
pub const DEPTH_BRANCH_PREFIXES: [&str; 3] = ["rgb_encoder.", "decouple.", "depth_head."];

pub struct DdcnnOutput {
    /// `(B, 1, S, S)` in (0, 1).
    pub saliency: Tensor,
    /// `(B, 1, S, S)` in (0, 1); absent without a depth branch.
    pub depth: Option<Tensor>,
    pub rgb_features: FeaturePyramid,
    pub decoupled: Option<DecoupledFeatures>,
    pub fusion: FusionOutputs,
}

impl DdcnnOutput {
    pub fn attention_maps(&self) -> Vec<Tensor> {
        self.fusion.attention_maps()
    }

    /// Sum over levels of the reconstruction MSE, if the model decouples.
    pub fn reconstruction_loss(&self) -> Result<Option<Tensor>> {
        match &self.decoupled {
            Some(d) => Ok(Some(total_reconstruction_loss(d, &self.rgb_features.levels)?)),
            None => Ok(None),
        }
    }
}

pub struct Ddcnn {
    rgb_encoder: PyramidEncoder,
    depth_encoder: PyramidEncoder,
    decoupler: Option<Decoupler>,
    depth_head: Option<DepthHead>,
    fusion: Fusion,
    decoder: SaliencyDecoder,
    input_size: usize,
    device: Device,
}

impl Ddcnn {
    /// Builds the network, registering its parameters in `store`. Pretrained
    /// encoder weights named by the config are loaded into both encoders.
    pub fn new(store: &ParamStore, cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let root = store.root();
        let rgb_encoder = PyramidEncoder::new(&root.pp("rgb_encoder"), &cfg.encoder, PyramidSource::RgbEncoder)?;
        let depth_encoder =
            PyramidEncoder::new(&root.pp("depth_encoder"), &cfg.encoder, PyramidSource::DepthEncoder)?;
        let channels = rgb_encoder.output_channels();
        let variant = cfg.fusion_variant();
        let (decoupler, depth_head) = if variant.depth_branch {
            (
                Some(Decoupler::new(&root.pp("decouple"), &channels)?),
                Some(DepthHead::new(&root.pp("depth_head"), &channels)?),
            )
        } else {
            (None, None)
        };
        let fusion = Fusion::new(&root.pp("fusion"), &channels, variant, &cfg.dgm, &cfg.dim)?;
        let decoder = SaliencyDecoder::new(&root.pp("decoder"), &channels, &cfg.decoder, &cfg.aspp)?;
        let model = Self {
            rgb_encoder,
            depth_encoder,
            decoupler,
            depth_head,
            fusion,
            decoder,
            input_size: cfg.input_size,
            device: store.device().clone(),
        };
        if cfg.encoder.pretrained {
            if let Some(path) = &cfg.encoder.weights {
                load_encoder_weights(store, path)?;
            }
        }
        Ok(model)
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn has_depth_branch(&self) -> bool {
        self.decoupler.is_some()
    }

    pub fn rgb_encoder(&self) -> &PyramidEncoder {
        &self.rgb_encoder
    }

    pub fn depth_encoder(&self) -> &PyramidEncoder {
        &self.depth_encoder
    }

    pub fn decoupler(&self) -> Option<&Decoupler> {
        self.decoupler.as_ref()
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn decoder(&self) -> &SaliencyDecoder {
        &self.decoder
    }

    fn check_input(&self, x: &Tensor, channels: usize) -> Result<usize> {
        let (_, c, h, w) = x.dims4()?;
        if c != channels || h != w || h % 32 != 0 || h == 0 {
            return Err(Error::shape(
                "network input",
                format!("(B, {channels}, S, S) with S a multiple of 32"),
                x.dims(),
            ));
        }
        Ok(h)
    }

    /// `rgb` is `(B, 3, S, S)`, `depth` is `(B, 1, S, S)`.
    pub fn forward(&self, rgb: &Tensor, depth: &Tensor) -> Result<DdcnnOutput> {
        let size = self.check_input(rgb, 3)?;
        self.check_input(depth, 1)?;
        if rgb.dim(0)? != depth.dim(0)? || depth.dim(2)? != size {
            return Err(Error::shape("depth input", rgb.dims(), depth.dims()));
        }
        let rgb_features = self.rgb_encoder.encode(rgb)?;
        let depth_features = self.depth_encoder.encode(depth)?;
        let (decoupled, depth_pred, fusion) = match (&self.decoupler, &self.depth_head) {
            (Some(dec), Some(head)) => {
                let decoupled = dec.forward(&rgb_features.levels)?;
                let depth_pred = head.predict(&decoupled.depth_aware, size)?;
                let fusion = self.fusion.forward(
                    &decoupled.depth_dispelled,
                    Some(&decoupled.depth_aware),
                    &depth_features.levels,
                )?;
                (Some(decoupled), Some(depth_pred), fusion)
            }
            _ => {
                let fusion = self
                    .fusion
                    .forward(&rgb_features.levels, None, &depth_features.levels)?;
                (None, None, fusion)
            }
        };
        let saliency = self.decoder.decode(&fusion.fused(), size)?;
        Ok(DdcnnOutput {
            saliency,
            depth: depth_pred,
            rgb_features,
            decoupled,
            fusion,
        })
    }

    /// Depth prediction from RGB alone through the depth branch.
    pub fn forward_depth(&self, rgb: &Tensor) -> Result<Tensor> {
        let size = self.check_input(rgb, 3)?;
        let (dec, head) = match (&self.decoupler, &self.depth_head) {
            (Some(d), Some(h)) => (d, h),
            _ => return Err(Error::Config("model has no depth branch".into())),
        };
        let features = self.rgb_encoder.encode(rgb)?;
        let depth_aware = dec.depth_aware(&features.levels)?;
        head.predict(&depth_aware, size)
    }
}

/// Loads encoder weights from a safetensors file. Keys are encoder-relative
/// (`body.stem.weight`, ...) and are applied to both encoders.
fn load_encoder_weights(store: &ParamStore, path: &std::path::Path) -> Result<()> {
    let tensors = candle_core::safetensors::load(path, store.device())?;
    let mut written = 0;
    for prefix in ["rgb_encoder.", "depth_encoder."] {
        for name in store.names() {
            if let Some(key) = name.strip_prefix(prefix) {
                if let Some(t) = tensors.get(key) {
                    store.set(&name, t)?;
                    written += 1;
                }
            }
        }
    }
    if written == 0 {
        return Err(Error::Config(format!(
            "no encoder weights matched in {}",
            path.display()
        )));
    }
    Ok(())
}

/// Parses a device name; only the CPU backend is compiled in.
pub fn device_from_name(name: &str) -> Result<Device> {
    match name {
        "cpu" => Ok(Device::Cpu),
        other => Err(Error::UnsupportedDevice(other.to_string())),
    }
}

/// A network together with the store owning its parameters.
pub struct Network {
    pub store: ParamStore,
    pub model: Ddcnn,
}

impl Network {
    pub fn new(cfg: &Config, dtype: DType, seed: u64) -> Result<Self> {
        let device = device_from_name(&cfg.device)?;
        let store = ParamStore::new(dtype, device, seed);
        let model = Ddcnn::new(&store, cfg)?;
        Ok(Self { store, model })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Ablation;

    fn small_config() -> Config {
        let mut c = Config::default();
        c.input_size = 64;
        c.encoder.channels_per_level = vec![4, 8, 8, 8];
        c.decoder.width = 8;
        c
    }

    #[test]
    fn forward_shapes() {
        let cfg = small_config();
        let net = Network::new(&cfg, DType::F32, 0).unwrap();
        let rgb = Tensor::rand(0f32, 1f32, (2, 3, 64, 64), &Device::Cpu).unwrap();
        let d = Tensor::rand(0f32, 1f32, (2, 1, 64, 64), &Device::Cpu).unwrap();
        let out = net.model.forward(&rgb, &d).unwrap();
        assert_eq!(out.saliency.dims(), &[2, 1, 64, 64]);
        assert_eq!(out.depth.as_ref().unwrap().dims(), &[2, 1, 64, 64]);
        assert_eq!(out.attention_maps().len(), 4);
        assert!(out.reconstruction_loss().unwrap().is_some());
        assert_eq!(net.model.forward_depth(&rgb).unwrap().dims(), &[2, 1, 64, 64]);
    }

    #[test]
    fn rejects_bad_input_sizes() {
        let cfg = small_config();
        let net = Network::new(&cfg, DType::F32, 0).unwrap();
        let rgb = Tensor::zeros((1, 3, 60, 60), DType::F32, &Device::Cpu).unwrap();
        let d = Tensor::zeros((1, 1, 60, 60), DType::F32, &Device::Cpu).unwrap();
        assert!(net.model.forward(&rgb, &d).is_err());
    }

    #[test]
    fn no_depth_branch_variant() {
        let mut cfg = small_config();
        cfg.train.ablation.insert(Ablation::NoDepthBranch);
        let net = Network::new(&cfg, DType::F32, 0).unwrap();
        assert!(net.store.names().iter().all(|n| !n.starts_with("decouple.")));
        let rgb = Tensor::rand(0f32, 1f32, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let d = Tensor::rand(0f32, 1f32, (1, 1, 64, 64), &Device::Cpu).unwrap();
        let out = net.model.forward(&rgb, &d).unwrap();
        assert!(out.depth.is_none());
        assert!(out.attention_maps().is_empty());
        assert!(net.model.forward_depth(&rgb).is_err());
    }

    #[test]
    fn unknown_device() {
        assert!(matches!(device_from_name("tpu"), Err(Error::UnsupportedDevice(_))));
    }
}
