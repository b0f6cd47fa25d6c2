use burn::nn::conv::Conv2d;
use burn::prelude::*;

use super::aspp::Aspp;
use super::cbam::Cbam;
use super::layers::{conv_forward, resize_bilinear, ConvBn, ConvSpec};
use super::resnet::ResNet;
use super::{ModelConfig, ModelError};

/// DeepLab-V3+ with optional CBAM blocks after ASPP (`cbam_high`) and after
/// the low-level 1×1 reduction (`cbam_low`). With both set to `None` this is
/// the plain baseline.
#[derive(Module, Debug)]
pub struct DeepLab<B: Backend> {
    pub encoder: ResNet<B>,
    pub aspp: Aspp<B>,
    pub cbam_high: Option<Cbam<B>>,
    pub low_reduce: ConvBn<B>,
    pub cbam_low: Option<Cbam<B>>,
    pub decoder: Vec<ConvBn<B>>,
    pub classifier: Conv2d<B>,
}

impl<B: Backend> DeepLab<B> {
    pub fn new(config: &ModelConfig, attention: bool, device: &B::Device) -> Result<Self, ModelError> {
        let kind = config.backbone;
        let (cbam_high, cbam_low) = if attention {
            (
                Some(Cbam::new(config.aspp_channels, config.cbam_reduction_ratio, device)?),
                Some(Cbam::new(config.low_level_channels, config.cbam_reduction_ratio, device)?),
            )
        } else {
            (None, None)
        };
        let concat = config.aspp_channels + config.low_level_channels;
        Ok(Self {
            encoder: ResNet::new(kind, device),
            aspp: Aspp::new(kind.high_level_channels(), config.aspp_channels, &config.aspp_rates, device),
            cbam_high,
            low_reduce: ConvBn::new(
                ConvSpec::new(kind.low_level_channels(), config.low_level_channels, 1),
                true,
                device,
            ),
            cbam_low,
            decoder: vec![
                ConvBn::new(ConvSpec::new(concat, config.decoder_channels, 3), true, device),
                ConvBn::new(ConvSpec::new(config.decoder_channels, config.decoder_channels, 3), true, device),
            ],
            classifier: ConvSpec::new(config.decoder_channels, config.num_classes, 1).bias().init(device),
        })
    }

    /// Channel counts of the CBAM placements, high-level first.
    pub fn cbam_placements(&self) -> Vec<usize> {
        [&self.cbam_high, &self.cbam_low]
            .into_iter()
            .flatten()
            .map(|c| c.channels)
            .collect()
    }

    /// Same weights with the attention blocks removed.
    pub fn without_attention(&self) -> Self {
        let mut m = self.clone();
        m.cbam_high = None;
        m.cbam_low = None;
        m
    }

    /// Logits at input resolution. `identity_attention` replaces both CBAM
    /// outputs by their inputs (attention ≡ 1).
    pub fn forward_logits(&self, x: Tensor<B, 4>, identity_attention: bool) -> Result<Tensor<B, 4>, ModelError> {
        let [_, _, h, w] = x.dims();
        let feats = self.encoder.forward(x);
        let mut high = self.aspp.forward(feats.high);
        if let (Some(cbam), false) = (&self.cbam_high, identity_attention) {
            high = cbam.forward(high)?;
        }
        let mut low = self.low_reduce.forward(feats.low);
        if let (Some(cbam), false) = (&self.cbam_low, identity_attention) {
            low = cbam.forward(low)?;
        }
        let [_, _, lh, lw] = low.dims();
        let high = resize_bilinear(high, lh, lw);
        let y = self
            .decoder
            .iter()
            .fold(Tensor::cat(vec![high, low], 1), |acc, c| c.forward(acc));
        let logits = conv_forward(&self.classifier, y);
        Ok(resize_bilinear(logits, h, w))
    }
}
