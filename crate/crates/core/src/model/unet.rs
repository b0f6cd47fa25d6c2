use burn::nn::conv::{Conv2d, ConvTranspose2d, ConvTranspose2dConfig};
use burn::prelude::*;
use burn::tensor::activation::sigmoid;
use burn::tensor::module::max_pool2d;

use super::layers::{conv_forward, conv_transpose_forward, ConvBn, ConvSpec};
use super::ModelError;

#[derive(Module, Debug)]
pub struct DoubleConv<B: Backend> {
    pub first: ConvBn<B>,
    pub second: ConvBn<B>,
}

impl<B: Backend> DoubleConv<B> {
    fn new(in_c: usize, out_c: usize, device: &B::Device) -> Self {
        Self {
            first: ConvBn::new(ConvSpec::new(in_c, out_c, 3), true, device),
            second: ConvBn::new(ConvSpec::new(out_c, out_c, 3), true, device),
        }
    }

    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        self.second.forward(self.first.forward(x))
    }
}

/// Additive attention gate on a skip connection:
/// `α = σ(ψ(σ(W_x x + W_g g + b_g)) + b_ψ)`, output `α ⊙ x`.
#[derive(Module, Debug)]
pub struct AttentionGate<B: Backend> {
    pub w_x: Conv2d<B>,
    /// Carries `b_g`.
    pub w_g: Conv2d<B>,
    /// Carries `b_ψ`.
    pub psi: Conv2d<B>,
}

impl<B: Backend> AttentionGate<B> {
    pub fn new(x_channels: usize, g_channels: usize, inter_channels: usize, device: &B::Device) -> Self {
        Self {
            w_x: ConvSpec::new(x_channels, inter_channels, 1).init(device),
            w_g: ConvSpec::new(g_channels, inter_channels, 1).bias().init(device),
            psi: ConvSpec::new(inter_channels, 1, 1).bias().init(device),
        }
    }

    /// Per-location coefficients `[N, 1, H, W]`.
    pub fn coefficients(&self, x: Tensor<B, 4>, g: Tensor<B, 4>) -> Result<Tensor<B, 4>, ModelError> {
        let (xd, gd) = (x.dims(), g.dims());
        if xd[0] != gd[0] || xd[2..] != gd[2..] {
            return Err(ModelError::SpatialMismatch {
                x: xd.to_vec(),
                g: gd.to_vec(),
            });
        }
        let inner = sigmoid(conv_forward(&self.w_x, x) + conv_forward(&self.w_g, g));
        Ok(sigmoid(conv_forward(&self.psi, inner)))
    }

    pub fn forward(&self, x: Tensor<B, 4>, g: Tensor<B, 4>) -> Result<Tensor<B, 4>, ModelError> {
        let alpha = self.coefficients(x.clone(), g)?;
        Ok(x * alpha)
    }
}

#[derive(Module, Debug)]
pub struct UpStage<B: Backend> {
    pub up: ConvTranspose2d<B>,
    pub gate: Option<AttentionGate<B>>,
    pub conv: DoubleConv<B>,
}

/// Four-level U-Net, optionally with attention gates on the skips.
#[derive(Module, Debug)]
pub struct UNet<B: Backend> {
    pub encoder: Vec<DoubleConv<B>>,
    pub decoder: Vec<UpStage<B>>,
    pub head: Conv2d<B>,
}

impl<B: Backend> UNet<B> {
    pub fn new(base_width: usize, num_classes: usize, gated: bool, device: &B::Device) -> Self {
        let widths: Vec<usize> = (0..5).map(|i| base_width << i).collect();
        let mut encoder = vec![DoubleConv::new(3, widths[0], device)];
        for i in 1..5 {
            encoder.push(DoubleConv::new(widths[i - 1], widths[i], device));
        }
        let decoder = (0..4)
            .rev()
            .map(|i| {
                let (skip, deep) = (widths[i], widths[i + 1]);
                let mut up = ConvTranspose2dConfig::new([deep, skip], [2, 2])
                    .with_stride([2, 2])
                    .init(device);
                up.bias = up.bias.map(super::layers::zero_param);
                UpStage {
                    up,
                    gate: gated.then(|| AttentionGate::new(skip, skip, (skip / 2).max(1), device)),
                    conv: DoubleConv::new(2 * skip, skip, device),
                }
            })
            .collect();
        Self {
            encoder,
            decoder,
            head: ConvSpec::new(widths[0], num_classes, 1).bias().init(device),
        }
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        self.encoder.iter().map(|d| d.second.conv.weight.dims()[0]).collect()
    }

    pub fn gate_count(&self) -> usize {
        self.decoder.iter().filter(|s| s.gate.is_some()).count()
    }

    pub fn forward_logits(&self, x: Tensor<B, 4>) -> Result<Tensor<B, 4>, ModelError> {
        let mut skips = Vec::with_capacity(4);
        let mut y = x;
        for (i, stage) in self.encoder.iter().enumerate() {
            if i > 0 {
                y = max_pool2d(y, [2, 2], [2, 2], [0, 0], [1, 1]);
            }
            y = stage.forward(y);
            if i < 4 {
                skips.push(y.clone());
            }
        }
        for stage in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let up = conv_transpose_forward(&stage.up, y);
            let skip = match &stage.gate {
                Some(gate) => gate.forward(skip, up.clone())?,
                None => skip,
            };
            y = stage.conv.forward(Tensor::cat(vec![skip, up], 1));
        }
        Ok(conv_forward(&self.head, y))
    }
}
