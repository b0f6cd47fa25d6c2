//! Residual encoders. Every variant exposes a stride-4 low-level tap and a
//! stride-32 deep feature map.

use burn::prelude::*;
use burn::tensor::activation::relu;
use burn::tensor::module::max_pool2d;
use serde::{Deserialize, Serialize};

use super::layers::{ConvBn, ConvSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Resnet18,
    Resnet34,
    Resnet50,
    Resnet101,
    /// Narrow four-stage residual net for tests and smoke runs.
    Tiny,
}

impl BackboneKind {
    /// Block counts per stage.
    fn layers(self) -> [usize; 4] {
        match self {
            BackboneKind::Resnet18 => [2, 2, 2, 2],
            BackboneKind::Resnet34 => [3, 4, 6, 3],
            BackboneKind::Resnet50 => [3, 4, 6, 3],
            BackboneKind::Resnet101 => [3, 4, 23, 3],
            BackboneKind::Tiny => [1, 1, 1, 1],
        }
    }

    fn bottleneck(self) -> bool {
        matches!(self, BackboneKind::Resnet50 | BackboneKind::Resnet101)
    }

    fn stem_width(self) -> usize {
        match self {
            BackboneKind::Tiny => 8,
            _ => 64,
        }
    }

    /// Channels of the stride-4 tap.
    pub fn low_level_channels(self) -> usize {
        if self.bottleneck() {
            4 * self.stem_width()
        } else {
            self.stem_width()
        }
    }

    /// Channels of the stride-32 output.
    pub fn high_level_channels(self) -> usize {
        self.low_level_channels() * 8
    }
}

/// Basic (two 3×3) or bottleneck (1×1, 3×3, 1×1) residual block.
#[derive(Module, Debug)]
pub struct ResidualBlock<B: Backend> {
    pub convs: Vec<ConvBn<B>>,
    pub downsample: Option<ConvBn<B>>,
}

impl<B: Backend> ResidualBlock<B> {
    fn basic(in_c: usize, out_c: usize, stride: usize, device: &B::Device) -> Self {
        let convs = vec![
            ConvBn::new(ConvSpec::new(in_c, out_c, 3).stride(stride), true, device),
            ConvBn::new(ConvSpec::new(out_c, out_c, 3), false, device),
        ];
        Self {
            convs,
            downsample: shortcut(in_c, out_c, stride, device),
        }
    }

    fn bottleneck(in_c: usize, mid: usize, stride: usize, device: &B::Device) -> Self {
        let out_c = mid * 4;
        let convs = vec![
            ConvBn::new(ConvSpec::new(in_c, mid, 1), true, device),
            ConvBn::new(ConvSpec::new(mid, mid, 3).stride(stride), true, device),
            ConvBn::new(ConvSpec::new(mid, out_c, 1), false, device),
        ];
        Self {
            convs,
            downsample: shortcut(in_c, out_c, stride, device),
        }
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let identity = match &self.downsample {
            Some(d) => d.forward(x.clone()),
            None => x.clone(),
        };
        let y = self.convs.iter().fold(x, |acc, c| c.forward(acc));
        relu(y + identity)
    }
}

fn shortcut<B: Backend>(in_c: usize, out_c: usize, stride: usize, device: &B::Device) -> Option<ConvBn<B>> {
    (stride != 1 || in_c != out_c).then(|| ConvBn::new(ConvSpec::new(in_c, out_c, 1).stride(stride), false, device))
}

#[derive(Module, Debug)]
pub struct ResNet<B: Backend> {
    pub stem: ConvBn<B>,
    pub layer1: Vec<ResidualBlock<B>>,
    pub layer2: Vec<ResidualBlock<B>>,
    pub layer3: Vec<ResidualBlock<B>>,
    pub layer4: Vec<ResidualBlock<B>>,
}

pub struct EncoderFeatures<B: Backend> {
    /// Stride 4.
    pub low: Tensor<B, 4>,
    /// Stride 32.
    pub high: Tensor<B, 4>,
}

impl<B: Backend> ResNet<B> {
    pub fn new(kind: BackboneKind, device: &B::Device) -> Self {
        let stem_c = kind.stem_width();
        let stem = ConvBn::new(ConvSpec::new(3, stem_c, 7).stride(2), true, device);
        let mut in_c = stem_c;
        let mut stages: Vec<Vec<ResidualBlock<B>>> = Vec::with_capacity(4);
        for (i, &blocks) in kind.layers().iter().enumerate() {
            let width = stem_c << i;
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let stride = if b == 0 && i > 0 { 2 } else { 1 };
                if kind.bottleneck() {
                    stage.push(ResidualBlock::bottleneck(in_c, width, stride, device));
                    in_c = width * 4;
                } else {
                    stage.push(ResidualBlock::basic(in_c, width, stride, device));
                    in_c = width;
                }
            }
            stages.push(stage);
        }
        let mut it = stages.into_iter();
        Self {
            stem,
            layer1: it.next().unwrap_or_default(),
            layer2: it.next().unwrap_or_default(),
            layer3: it.next().unwrap_or_default(),
            layer4: it.next().unwrap_or_default(),
        }
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> EncoderFeatures<B> {
        let x = self.stem.forward(x);
        let x = max_pool2d(x, [3, 3], [2, 2], [1, 1], [1, 1]);
        let run = |blocks: &[ResidualBlock<B>], x| blocks.iter().fold(x, |acc, b| b.forward(acc));
        let low = run(&self.layer1, x);
        let x = run(&self.layer2, low.clone());
        let x = run(&self.layer3, x);
        let high = run(&self.layer4, x);
        EncoderFeatures { low, high }
    }
}
