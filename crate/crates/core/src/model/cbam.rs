//! Convolutional block attention: channel attention followed by spatial
//! attention, both applied multiplicatively.

use burn::nn::conv::Conv2d;
use burn::nn::{Linear, LinearConfig};
use burn::prelude::*;
use burn::tensor::activation::{relu, sigmoid};

use super::layers::{conv_forward, ConvSpec};
use super::ModelError;

#[derive(Module, Debug)]
pub struct Cbam<B: Backend> {
    /// Shared MLP `C → C/r → C`.
    pub fc1: Linear<B>,
    pub fc2: Linear<B>,
    /// 7×7 over `[mean; max]` across channels.
    pub spatial_conv: Conv2d<B>,
    pub channels: usize,
}

fn zeroed_linear<B: Backend>(d_in: usize, d_out: usize, device: &B::Device) -> Linear<B> {
    let mut l = LinearConfig::new(d_in, d_out).init(device);
    l.bias = l.bias.map(super::layers::zero_param);
    l
}

impl<B: Backend> Cbam<B> {
    pub fn new(channels: usize, reduction: usize, device: &B::Device) -> Result<Self, ModelError> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "CBAM reduction ratio {reduction} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: zeroed_linear(channels, hidden, device),
            fc2: zeroed_linear(hidden, channels, device),
            spatial_conv: ConvSpec::new(2, 1, 7).bias().init(device),
            channels,
        })
    }

    pub fn hidden_width(&self) -> usize {
        self.fc1.weight.dims()[1]
    }

    fn check(&self, x: &Tensor<B, 4>) -> Result<(), ModelError> {
        let c = x.dims()[1];
        if c != self.channels {
            return Err(ModelError::ChannelMismatch {
                expected: self.channels,
                got: c,
            });
        }
        Ok(())
    }

    fn mlp(&self, v: Tensor<B, 2>) -> Tensor<B, 2> {
        self.fc2.forward(relu(self.fc1.forward(v)))
    }

    /// `σ(MLP(avgpool F) + MLP(maxpool F))`, shape `[N, C]`.
    pub fn channel_attention(&self, x: Tensor<B, 4>) -> Result<Tensor<B, 2>, ModelError> {
        self.check(&x)?;
        let [n, c, h, w] = x.dims();
        // Reductions run over the last axis; the ndarray max backward only
        // supports that layout.
        let flat = x.reshape([n, c, h * w]);
        let avg = flat.clone().mean_dim(2).reshape([n, c]);
        let max = flat.max_dim(2).reshape([n, c]);
        Ok(sigmoid(self.mlp(avg) + self.mlp(max)))
    }

    /// `σ(conv7×7([mean_c F; max_c F]))`, shape `[N, H, W]`.
    pub fn spatial_attention(&self, x: Tensor<B, 4>) -> Tensor<B, 3> {
        let [n, _, h, w] = x.dims();
        let max = x.clone().permute([0, 2, 3, 1]).max_dim(3).reshape([n, 1, h, w]);
        let pooled = Tensor::cat(vec![x.mean_dim(1), max], 1);
        sigmoid(conv_forward(&self.spatial_conv, pooled)).reshape([n, h, w])
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Result<Tensor<B, 4>, ModelError> {
        let [n, c, h, w] = x.dims();
        let mc = self.channel_attention(x.clone())?.reshape([n, c, 1, 1]);
        let refined = x * mc;
        let ms = self.spatial_attention(refined.clone()).reshape([n, 1, h, w]);
        Ok(refined * ms)
    }
}
