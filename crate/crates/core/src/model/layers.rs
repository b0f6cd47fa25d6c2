use burn::module::{Module, ModuleMapper, Param, ParamId};
use burn::nn::conv::{Conv2d, Conv2dConfig, ConvTranspose2d};
use burn::nn::{BatchNorm, BatchNormConfig, PaddingConfig2d};
use burn::prelude::*;
use burn::tensor::activation::relu;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub(crate) struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            dilation: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn bias(mut self) -> Self {
        self.bias = true;
        self
    }

    /// "Same" padding for odd kernels.
    pub fn init<B: Backend>(&self, device: &B::Device) -> Conv2d<B> {
        let pad = self.dilation * (self.kernel - 1) / 2;
        let conv = Conv2dConfig::new([self.in_channels, self.out_channels], [self.kernel, self.kernel])
            .with_stride([self.stride, self.stride])
            .with_dilation([self.dilation, self.dilation])
            .with_padding(PaddingConfig2d::Explicit(pad, pad))
            .with_bias(self.bias)
            .init(device);
        zero_conv_bias(conv)
    }
}

/// Replacement tensor that keeps the `require_grad` flag of `old`.
pub(crate) fn replace_value<B: Backend, const D: usize>(old: &Tensor<B, D>, new: Tensor<B, D>) -> Tensor<B, D> {
    if old.is_require_grad() {
        new.require_grad()
    } else {
        new
    }
}

pub(crate) fn zero_param<B: Backend, const D: usize>(p: Param<Tensor<B, D>>) -> Param<Tensor<B, D>> {
    let (id, t) = p.consume();
    let zeros = replace_value(&t, t.zeros_like());
    Param::initialized(id, zeros)
}

pub(crate) fn set_conv_bias<B: Backend>(mut conv: Conv2d<B>, value: f64) -> Conv2d<B> {
    conv.bias = conv.bias.map(|p| {
        let (id, t) = p.consume();
        let filled = replace_value(&t, t.zeros_like().add_scalar(value));
        Param::initialized(id, filled)
    });
    conv
}

pub(crate) fn zero_conv_bias<B: Backend>(mut conv: Conv2d<B>) -> Conv2d<B> {
    conv.bias = conv.bias.map(zero_param);
    conv
}

/// 2D cross-correlation as shifted slices plus one batched matrix product.
/// Matches `burn::tensor::module::conv2d` with one group; its backward pass
/// only involves slicing and matmul, which is far faster on the ndarray
/// backend than the transposed-convolution gradient.
pub fn conv2d_gemm<B: Backend>(
    x: Tensor<B, 4>,
    weight: Tensor<B, 4>,
    bias: Option<Tensor<B, 1>>,
    stride: [usize; 2],
    padding: [usize; 2],
    dilation: [usize; 2],
) -> Tensor<B, 4> {
    let [n, c, h, w] = x.dims();
    let [o, _, kh, kw] = weight.dims();
    let ho = (h + 2 * padding[0] - dilation[0] * (kh - 1) - 1) / stride[0] + 1;
    let wo = (w + 2 * padding[1] - dilation[1] * (kw - 1) - 1) / stride[1] + 1;
    let xp = if padding != [0, 0] {
        x.pad((padding[1], padding[1], padding[0], padding[0]), 0.0)
    } else {
        x
    };
    let [_, _, hp, wp] = xp.dims();
    let (need_h, need_w) = (stride[0] * ho, stride[1] * wo);
    let mut taps = Vec::with_capacity(kh * kw);
    for i in 0..kh {
        for j in 0..kw {
            let (oy, ox) = (i * dilation[0], j * dilation[1]);
            let tap = if stride == [1, 1] {
                xp.clone().narrow(2, oy, ho).narrow(3, ox, wo)
            } else {
                let mut t = xp
                    .clone()
                    .narrow(2, oy, (hp - oy).min(need_h))
                    .narrow(3, ox, (wp - ox).min(need_w));
                let [_, _, th, tw] = t.dims();
                if th < need_h || tw < need_w {
                    t = t.pad((0, need_w - tw, 0, need_h - th), 0.0);
                }
                t.reshape([n, c, ho, stride[0], wo, stride[1]])
                    .narrow(3, 0, 1)
                    .narrow(5, 0, 1)
                    .reshape([n, c, ho, wo])
            };
            taps.push(tap);
        }
    }
    let k = kh * kw * c;
    let cols = if taps.len() == 1 {
        taps.pop().unwrap().reshape([n, c, ho * wo])
    } else {
        Tensor::cat(taps, 1).reshape([n, k, ho * wo])
    };
    let wm = weight.permute([0, 2, 3, 1]).reshape([1, o, k]).expand([n, o, k]);
    let y = wm.matmul(cols).reshape([n, o, ho, wo]);
    match bias {
        Some(b) => y + b.reshape([1, o, 1, 1]),
        None => y,
    }
}

/// Forward pass of `conv` through [`conv2d_gemm`].
pub fn conv_forward<B: Backend>(conv: &Conv2d<B>, x: Tensor<B, 4>) -> Tensor<B, 4> {
    let padding = match &conv.padding.0 {
        PaddingConfig2d::Explicit(ph, pw) => [*ph, *pw],
        PaddingConfig2d::Valid => [0, 0],
        PaddingConfig2d::Same => return conv.forward(x),
    };
    if conv.groups != 1 {
        return conv.forward(x);
    }
    conv2d_gemm(
        x,
        conv.weight.val(),
        conv.bias.as_ref().map(|b| b.val()),
        conv.stride,
        padding,
        conv.dilation,
    )
}

/// Forward pass of a kernel-2, stride-2 transposed convolution as one
/// matrix product and a pixel shuffle. Other shapes use the backend op.
pub fn conv_transpose_forward<B: Backend>(conv: &ConvTranspose2d<B>, x: Tensor<B, 4>) -> Tensor<B, 4> {
    let simple = conv.kernel_size == [2, 2]
        && conv.stride == [2, 2]
        && conv.padding == [0, 0]
        && conv.padding_out == [0, 0]
        && conv.dilation == [1, 1]
        && conv.groups == 1;
    if !simple {
        return conv.forward(x);
    }
    let [n, c, h, w] = x.dims();
    let o = conv.weight.dims()[1];
    let wm = conv.weight.val().reshape([c, o * 4]).transpose().reshape([1, o * 4, c]).expand([n, o * 4, c]);
    let y = wm
        .matmul(x.reshape([n, c, h * w]))
        .reshape([n, o, 2, 2, h, w])
        .permute([0, 1, 4, 2, 5, 3])
        .reshape([n, o, 2 * h, 2 * w]);
    match &conv.bias {
        Some(b) => y + b.val().reshape([1, o, 1, 1]),
        None => y,
    }
}

/// Convolution followed by batch norm and an optional ReLU.
#[derive(Module, Debug)]
pub struct ConvBn<B: Backend> {
    pub conv: Conv2d<B>,
    pub bn: BatchNorm<B, 2>,
    pub relu: bool,
}

impl<B: Backend> ConvBn<B> {
    pub(crate) fn new(spec: ConvSpec, relu: bool, device: &B::Device) -> Self {
        Self {
            bn: BatchNormConfig::new(spec.out_channels).init(device),
            conv: spec.init(device),
            relu,
        }
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let y = self.bn.forward(conv_forward(&self.conv, x));
        if self.relu {
            relu(y)
        } else {
            y
        }
    }
}

/// `[out, in]` bilinear interpolation weights with half-pixel centres and
/// edge clamping.
pub(crate) fn interpolation_matrix(input: usize, output: usize) -> Vec<f32> {
    let mut m = vec![0f32; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let w = (src - i0 as f64) as f32;
        m[o * input + i0] += 1.0 - w;
        m[o * input + i1] += w;
    }
    m
}

/// Bilinear resize of an `[N, C, H, W]` tensor to `[N, C, height, width]`,
/// written as two matrix products so that it is differentiable on every
/// backend.
pub fn resize_bilinear<B: Backend>(x: Tensor<B, 4>, height: usize, width: usize) -> Tensor<B, 4> {
    let [n, c, h, w] = x.dims();
    let device = x.device();
    let mut x = x;
    if w != width {
        let ux = Tensor::<B, 2>::from_data(TensorData::new(interpolation_matrix(w, width), [width, w]), &device);
        x = x.reshape([n * c * h, w]).matmul(ux.transpose()).reshape([n, c, h, width]);
    }
    if h != height {
        let uy = Tensor::<B, 2>::from_data(TensorData::new(interpolation_matrix(h, height), [height, h]), &device);
        x = x
            .swap_dims(2, 3)
            .reshape([n * c * width, h])
            .matmul(uy.transpose())
            .reshape([n, c, width, height])
            .swap_dims(2, 3);
    }
    x
}

/// Re-draws every convolution and linear weight from a seeded fan-in-scaled
/// normal distribution (He init). Biases and norm parameters are left as
/// built.
pub(crate) struct SeededKaiming {
    rng: ChaCha8Rng,
}

impl SeededKaiming {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl<B: Backend> ModuleMapper<B> for SeededKaiming {
    fn map_float<const D: usize>(&mut self, _id: ParamId, tensor: Tensor<B, D>) -> Tensor<B, D> {
        let dims = tensor.dims();
        let fan_in = match D {
            // Conv weights: [out, in, kh, kw].
            4 => dims[1] * dims[2] * dims[3],
            // Linear weights: [in, out].
            2 => dims[0],
            _ => return tensor,
        };
        let std = (2.0 / fan_in.max(1) as f64).sqrt() as f32;
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let count: usize = dims.iter().product();
        let values: Vec<f32> = (0..count).map(|_| normal.sample(&mut self.rng)).collect();
        let fresh = Tensor::from_data(TensorData::new(values, dims), &tensor.device());
        replace_value(&tensor, fresh)
    }
}

pub(crate) fn reinitialize<B: Backend, M: Module<B>>(module: M, seed: u64) -> M {
    module.map(&mut SeededKaiming::new(seed))
}
