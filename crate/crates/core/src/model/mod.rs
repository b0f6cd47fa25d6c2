//! Segmentation networks: Attention-DeepLab (DeepLab-V3+ with two CBAM
//! blocks), the plain DeepLab-V3+ baseline, U-Net and gated U-Net.

mod aspp;
mod cbam;
mod deeplab;
pub(crate) mod layers;
mod resnet;
mod unet;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use burn::prelude::*;
use burn::record::{FullPrecisionSettings, NamedMpkFileRecorder};
use burn::tensor::activation::sigmoid;
use serde::{Deserialize, Serialize};

const PROB_MIN: f64 = f32::MIN_POSITIVE as f64;
const PROB_MAX: f64 = 1.0 - f32::EPSILON as f64 / 2.0;

pub use aspp::Aspp;
pub use cbam::Cbam;
pub use deeplab::DeepLab;
pub use layers::{conv2d_gemm, conv_forward, conv_transpose_forward, resize_bilinear, ConvBn};
pub use resnet::{BackboneKind, EncoderFeatures, ResNet, ResidualBlock};
pub use unet::{AttentionGate, DoubleConv, UNet, UpStage};

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown architecture '{0}' (expected attention_deeplab, deeplab_v3plus, unet or gated_unet)")]
    UnknownArchitecture(String),
    #[error("expected input [N, 3, {expected_h}, {expected_w}], got {got:?}")]
    InputSize {
        expected_h: usize,
        expected_w: usize,
        got: Vec<usize>,
    },
    #[error("expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("attention gate inputs are not aligned: x {x:?}, g {g:?}")]
    SpatialMismatch { x: Vec<usize>, g: Vec<usize> },
    #[error("cannot load encoder weights from {path}: {reason}")]
    EncoderWeights { path: PathBuf, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    AttentionDeeplab,
    DeeplabV3plus,
    Unet,
    GatedUnet,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::AttentionDeeplab,
        Architecture::DeeplabV3plus,
        Architecture::Unet,
        Architecture::GatedUnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::AttentionDeeplab => "attention_deeplab",
            Architecture::DeeplabV3plus => "deeplab_v3plus",
            Architecture::Unet => "unet",
            Architecture::GatedUnet => "gated_unet",
        }
    }

    /// Input sides must be a multiple of this.
    fn stride(self) -> usize {
        match self {
            Architecture::AttentionDeeplab | Architecture::DeeplabV3plus => 32,
            Architecture::Unet | Architecture::GatedUnet => 16,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| ModelError::UnknownArchitecture(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub backbone: BackboneKind,
    pub cbam_reduction_ratio: usize,
    pub aspp_rates: Vec<usize>,
    pub num_classes: usize,
    /// `[height, width]`.
    pub input_size: [usize; 2],
    pub aspp_channels: usize,
    pub low_level_channels: usize,
    pub decoder_channels: usize,
    /// First U-Net width; the encoder doubles it four times.
    pub unet_base_width: usize,
    /// Burn record of a [`ResNet`] with the configured backbone.
    pub encoder_weights: Option<PathBuf>,
    /// Seed for the random initialization of all weights.
    pub init_seed: u64,
    /// Initial foreground probability of the output layer: its bias starts at
    /// `ln(π / (1 - π))`. `None` starts it at zero.
    pub output_prior: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::AttentionDeeplab,
            backbone: BackboneKind::Resnet50,
            cbam_reduction_ratio: 16,
            aspp_rates: vec![6, 12, 18],
            num_classes: 4,
            input_size: [512, 512],
            aspp_channels: 256,
            low_level_channels: 48,
            decoder_channels: 256,
            unet_base_width: 64,
            encoder_weights: None,
            init_seed: 0,
            output_prior: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_classes == 0 {
            return err("num_classes must be >= 1".into());
        }
        let stride = self.architecture.stride();
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return err(format!(
                "input_size {h}x{w} must be a positive multiple of {stride} for {}",
                self.architecture
            ));
        }
        match self.architecture {
            Architecture::AttentionDeeplab | Architecture::DeeplabV3plus => {
                if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
                    return err(format!("aspp_rates must be non-empty and positive, got {:?}", self.aspp_rates));
                }
                if self.aspp_channels == 0 || self.low_level_channels == 0 || self.decoder_channels == 0 {
                    return err("decoder channel counts must be positive".into());
                }
                if self.architecture == Architecture::AttentionDeeplab {
                    let r = self.cbam_reduction_ratio;
                    for c in [self.aspp_channels, self.low_level_channels] {
                        if r == 0 || c % r != 0 {
                            return err(format!("CBAM reduction ratio {r} does not divide {c} channels"));
                        }
                    }
                }
            }
            Architecture::Unet | Architecture::GatedUnet => {
                if self.unet_base_width == 0 {
                    return err("unet_base_width must be >= 1".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Module, Debug)]
pub enum Network<B: Backend> {
    DeepLab(DeepLab<B>),
    UNet(UNet<B>),
}

/// Built network plus the input size it accepts.
#[derive(Module, Debug)]
pub struct SegmentationModel<B: Backend> {
    pub network: Network<B>,
    pub input_height: usize,
    pub input_width: usize,
    pub num_classes: usize,
}

impl<B: Backend> SegmentationModel<B> {
    fn check_input(&self, x: &Tensor<B, 4>) -> Result<(), ModelError> {
        let d = x.dims();
        if d[1] != 3 || d[2] != self.input_height || d[3] != self.input_width {
            return Err(ModelError::InputSize {
                expected_h: self.input_height,
                expected_w: self.input_width,
                got: d.to_vec(),
            });
        }
        Ok(())
    }

    /// Per-class logits `[N, K, H, W]`.
    pub fn forward_logits(&self, x: Tensor<B, 4>) -> Result<Tensor<B, 4>, ModelError> {
        self.forward_logits_with(x, false)
    }

    /// As [`Self::forward_logits`]; `identity_attention` bypasses any CBAM
    /// blocks.
    pub fn forward_logits_with(&self, x: Tensor<B, 4>, identity_attention: bool) -> Result<Tensor<B, 4>, ModelError> {
        self.check_input(&x)?;
        match &self.network {
            Network::DeepLab(m) => m.forward_logits(x, identity_attention),
            Network::UNet(m) => m.forward_logits(x),
        }
    }

    /// Per-class probabilities in (0, 1).
    ///
    /// Saturated values are clamped to the nearest f32 values inside the
    /// interval, so large logits never produce exactly 0 or 1.
    pub fn forward(&self, x: Tensor<B, 4>) -> Result<Tensor<B, 4>, ModelError> {
        self.forward_logits(x)
            .map(|logits| sigmoid(logits).clamp(PROB_MIN, PROB_MAX))
    }

    pub fn cbam_placements(&self) -> Vec<usize> {
        match &self.network {
            Network::DeepLab(m) => m.cbam_placements(),
            Network::UNet(_) => Vec::new(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.num_params()
    }
}

fn prior_logit(prior: f64) -> f64 {
    (prior / (1.0 - prior)).ln()
}

/// Builds the configured architecture. Weights are drawn from a generator
/// seeded by `config.init_seed`; the encoder is then replaced by
/// `config.encoder_weights` when given.
pub fn build_model<B: Backend>(config: &ModelConfig, device: &B::Device) -> Result<SegmentationModel<B>, ModelError> {
    config.validate()?;
    let network = match config.architecture {
        Architecture::AttentionDeeplab | Architecture::DeeplabV3plus => {
            let attention = config.architecture == Architecture::AttentionDeeplab;
            let mut net = layers::reinitialize(DeepLab::new(config, attention, device)?, config.init_seed);
            if let Some(path) = &config.encoder_weights {
                let recorder = NamedMpkFileRecorder::<FullPrecisionSettings>::new();
                net.encoder = net.encoder.load_file(path.clone(), &recorder, device).map_err(|e| {
                    ModelError::EncoderWeights {
                        path: path.clone(),
                        reason: e.to_string(),
                    }
                })?;
            }
            if let Some(prior) = config.output_prior {
                net.classifier = layers::set_conv_bias(net.classifier, prior_logit(prior));
            }
            Network::DeepLab(net)
        }
        Architecture::Unet | Architecture::GatedUnet => {
            if let Some(path) = &config.encoder_weights {
                return Err(ModelError::EncoderWeights {
                    path: path.clone(),
                    reason: format!("{} has no pretrained encoder", config.architecture),
                });
            }
            let gated = config.architecture == Architecture::GatedUnet;
            let mut net = layers::reinitialize(
                UNet::new(config.unet_base_width, config.num_classes, gated, device),
                config.init_seed,
            );
            if let Some(prior) = config.output_prior {
                net.head = layers::set_conv_bias(net.head, prior_logit(prior));
            }
            Network::UNet(net)
        }
    };
    let model = SegmentationModel {
        network,
        input_height: config.input_size[0],
        input_width: config.input_size[1],
        num_classes: config.num_classes,
    };
    log::info!("built {} with {} parameters", config.architecture, model.parameter_count());
    Ok(model)
}

/// Reference head on the tiny backbone at 64×64 input.
pub fn tiny_config(architecture: Architecture) -> ModelConfig {
    ModelConfig {
        architecture,
        backbone: BackboneKind::Tiny,
        input_size: [64, 64],
        unet_base_width: 4,
        ..ModelConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use burn::backend::{Autodiff, NdArray};
    use burn::module::{ModuleVisitor, ParamId};
    use burn::tensor::Distribution;

    type B = NdArray<f32>;

    fn small(architecture: Architecture) -> ModelConfig {
        ModelConfig {
            aspp_channels: 32,
            low_level_channels: 16,
            decoder_channels: 16,
            cbam_reduction_ratio: 4,
            ..tiny_config(architecture)
        }
    }

    #[test]
    fn architecture_parsing() {
        assert_eq!("gated_unet".parse::<Architecture>().unwrap(), Architecture::GatedUnet);
        assert!(matches!("segformer".parse::<Architecture>(), Err(ModelError::UnknownArchitecture(_))));
        assert!(serde_json::from_str::<ModelConfig>(r#"{"architecture":"segformer"}"#).is_err());
    }

    #[test]
    fn ratio_must_divide_placements() {
        let cfg = ModelConfig {
            cbam_reduction_ratio: 32,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(m)) if m.contains("48")));
    }

    #[test]
    fn cbam_counts() {
        let device = Default::default();
        let att = build_model::<B>(&tiny_config(Architecture::AttentionDeeplab), &device).unwrap();
        assert_eq!(att.cbam_placements(), vec![256, 48]);
        let base = build_model::<B>(&tiny_config(Architecture::DeeplabV3plus), &device).unwrap();
        assert!(base.cbam_placements().is_empty());
    }

    #[test]
    fn unet_reference_widths() {
        let device = Default::default();
        let cfg = ModelConfig {
            architecture: Architecture::Unet,
            unet_base_width: 64,
            ..ModelConfig::default()
        };
        cfg.validate().unwrap();
        let net = UNet::<B>::new(cfg.unet_base_width, 4, false, &device);
        assert_eq!(net.encoder_widths(), vec![64, 128, 256, 512, 1024]);
    }

    #[test]
    fn wrong_input_size_rejected() {
        let device = Default::default();
        let m = build_model::<B>(&small(Architecture::AttentionDeeplab), &device).unwrap();
        let err = m.forward(Tensor::zeros([1, 3, 32, 64], &device)).unwrap_err();
        assert!(matches!(err, ModelError::InputSize { .. }));
    }

    #[test]
    fn outputs_in_open_unit_interval() {
        let device = Default::default();
        for arch in Architecture::ALL {
            let m = build_model::<B>(&small(arch), &device).unwrap();
            for scale in [1.0, 1e5] {
                let x = Tensor::random([1, 3, 64, 64], Distribution::Normal(0.0, scale), &device);
                let y = m.forward(x).unwrap();
                assert_eq!(y.dims(), [1, 4, 64, 64]);
                let v = y.into_data().to_vec::<f32>().unwrap();
                assert!(v.iter().all(|&p| p > 0.0 && p < 1.0), "{arch} at scale {scale}");
            }
        }
    }

    #[test]
    fn saturated_logits_stay_inside_unit_interval() {
        let logits = Tensor::<B, 4>::from_floats([[[[-1e4f32, -120.0, 0.0, 40.0, 1e4]]]], &Default::default());
        let v = sigmoid(logits)
            .clamp(PROB_MIN, PROB_MAX)
            .into_data()
            .to_vec::<f32>()
            .unwrap();
        assert!(v.iter().all(|&p| p > 0.0 && p < 1.0), "{v:?}");
        assert_eq!(v[2], 0.5);
    }

    #[test]
    fn identity_attention_equals_baseline() {
        let device = Default::default();
        let m = build_model::<B>(&small(Architecture::AttentionDeeplab), &device).unwrap();
        let Network::DeepLab(net) = &m.network else { unreachable!() };
        let base = net.without_attention();
        let x = Tensor::<B, 4>::random([1, 3, 64, 64], Distribution::Normal(0.0, 1.0), &device);
        let a = m.forward_logits_with(x.clone(), true).unwrap();
        let b = base.forward_logits(x.clone(), false).unwrap();
        assert_eq!(a.into_data(), b.to_data());
        let c = m.forward_logits(x).unwrap();
        assert_ne!(c.into_data(), b.into_data());
    }

    #[test]
    fn batch_equals_per_sample() {
        let device = Default::default();
        for arch in [Architecture::AttentionDeeplab, Architecture::GatedUnet] {
            let m = build_model::<B>(&small(arch), &device).unwrap();
            let x = Tensor::<B, 4>::random([4, 3, 64, 64], Distribution::Normal(0.0, 1.0), &device);
            let batch = m.forward(x.clone()).unwrap();
            for i in 0..4 {
                let xi = x.clone().slice([i..i + 1]);
                let single = m.forward(xi).unwrap();
                let diff = (batch.clone().slice([i..i + 1]) - single).abs().max().into_scalar();
                assert!(diff <= 1e-5, "{arch} sample {i}: {diff}");
            }
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let device = Default::default();
        let cfg = small(Architecture::GatedUnet);
        let a = build_model::<B>(&cfg, &device).unwrap();
        let b = build_model::<B>(&cfg, &device).unwrap();
        assert_eq!(crate::tensor::weights_digest(&a), crate::tensor::weights_digest(&b));
        let c = build_model::<B>(&ModelConfig { init_seed: 1, ..cfg }, &device).unwrap();
        assert_ne!(crate::tensor::weights_digest(&a), crate::tensor::weights_digest(&c));
    }

    struct MirrorKernels;

    impl burn::module::ModuleMapper<B> for MirrorKernels {
        fn map_float<const D: usize>(&mut self, _id: ParamId, t: Tensor<B, D>) -> Tensor<B, D> {
            if D == 4 {
                (t.clone() + t.flip([3])).div_scalar(2.0)
            } else {
                t
            }
        }
    }

    #[test]
    fn mirrored_kernels_make_stride_one_blocks_flip_equivariant() {
        let device = Default::default();
        let aspp = layers::reinitialize(Aspp::<B>::new(8, 16, &[2, 3], &device), 1).map(&mut MirrorKernels);
        let cbam = layers::reinitialize(Cbam::<B>::new(16, 4, &device).unwrap(), 2).map(&mut MirrorKernels);
        let x = Tensor::<B, 4>::random([1, 8, 12, 12], Distribution::Normal(0.0, 1.0), &device);
        let run = |x| cbam.forward(aspp.forward(x)).unwrap();
        let direct = run(x.clone()).flip([3]);
        let flipped = run(x.flip([3]));
        let diff = (direct - flipped).abs().max().into_scalar();
        assert!(diff < 1e-5, "{diff}");
    }

    struct GradProbe<'a> {
        grads: &'a burn::optim::GradientsParams,
        dead: Vec<Vec<usize>>,
        total: usize,
    }

    impl ModuleVisitor<Autodiff<B>> for GradProbe<'_> {
        fn visit_float<const D: usize>(&mut self, id: ParamId, tensor: &Tensor<Autodiff<B>, D>) {
            // Batch-norm running statistics are buffers, not trainable.
            if !tensor.is_require_grad() {
                return;
            }
            self.total += 1;
            let nonzero = self
                .grads
                .get::<B, D>(id)
                .map(|g| g.abs().sum().into_scalar() > 0.0)
                .unwrap_or(false);
            if !nonzero {
                self.dead.push(tensor.dims().to_vec());
            }
        }
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let device = Default::default();
        for arch in Architecture::ALL {
            let m = build_model::<Autodiff<B>>(&small(arch), &device).unwrap();
            let x = Tensor::random([2, 3, 64, 64], Distribution::Normal(0.0, 1.0), &device);
            let t = Tensor::<Autodiff<B>, 4>::random([2, 4, 64, 64], Distribution::Bernoulli(0.3), &device);
            let loss = crate::losses::bce_loss(m.forward_logits(x).unwrap(), t).unwrap();
            let grads = burn::optim::GradientsParams::from_grads(loss.backward(), &m);
            let mut probe = GradProbe {
                grads: &grads,
                dead: Vec::new(),
                total: 0,
            };
            m.visit(&mut probe);
            assert!(probe.total > 0);
            assert!(probe.dead.is_empty(), "{arch}: dead parameters {:?}", probe.dead);
        }
    }

    #[test]
    fn encoder_weights_roundtrip() {
        let device = Default::default();
        let dir = tempfile::tempdir().unwrap();
        let src = build_model::<B>(&small(Architecture::DeeplabV3plus), &device).unwrap();
        let Network::DeepLab(net) = &src.network else { unreachable!() };
        let recorder = NamedMpkFileRecorder::<FullPrecisionSettings>::new();
        net.encoder.clone().save_file(dir.path().join("enc"), &recorder).unwrap();
        let cfg = ModelConfig {
            init_seed: 99,
            encoder_weights: Some(dir.path().join("enc.mpk")),
            ..small(Architecture::AttentionDeeplab)
        };
        let loaded = build_model::<B>(&cfg, &device).unwrap();
        let Network::DeepLab(l) = &loaded.network else { unreachable!() };
        assert_eq!(
            crate::tensor::weights_digest(&l.encoder),
            crate::tensor::weights_digest(&net.encoder)
        );
        let bad = ModelConfig {
            encoder_weights: Some(dir.path().join("missing.mpk")),
            ..cfg
        };
        assert!(matches!(build_model::<B>(&bad, &device), Err(ModelError::EncoderWeights { .. })));
    }
}
