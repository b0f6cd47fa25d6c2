use burn::prelude::*;
use burn::tensor::module::adaptive_avg_pool2d;

use super::layers::{ConvBn, ConvSpec};

/// Atrous spatial pyramid pooling: a 1×1 branch, one dilated 3×3 branch per
/// rate and an image-pooling branch, concatenated and projected.
#[derive(Module, Debug)]
pub struct Aspp<B: Backend> {
    pub branches: Vec<ConvBn<B>>,
    pub pooling: ConvBn<B>,
    pub project: ConvBn<B>,
}

impl<B: Backend> Aspp<B> {
    pub fn new(in_channels: usize, out_channels: usize, rates: &[usize], device: &B::Device) -> Self {
        let mut branches = vec![ConvBn::new(ConvSpec::new(in_channels, out_channels, 1), true, device)];
        for &rate in rates {
            branches.push(ConvBn::new(
                ConvSpec::new(in_channels, out_channels, 3).dilation(rate),
                true,
                device,
            ));
        }
        let n = branches.len() + 1;
        Self {
            branches,
            pooling: ConvBn::new(ConvSpec::new(in_channels, out_channels, 1), true, device),
            project: ConvBn::new(ConvSpec::new(n * out_channels, out_channels, 1), true, device),
        }
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let [n, _, h, w] = x.dims();
        let mut outs: Vec<Tensor<B, 4>> = self.branches.iter().map(|b| b.forward(x.clone())).collect();
        let pooled = self.pooling.forward(adaptive_avg_pool2d(x, [1, 1]));
        let c = pooled.dims()[1];
        outs.push(pooled.expand([n, c, h, w]));
        self.project.forward(Tensor::cat(outs, 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::reinitialize;
    use burn::backend::NdArray;
    use burn::module::Param;
    use burn::nn::conv::Conv2dConfig;
    use burn::nn::PaddingConfig2d;
    use burn::tensor::Distribution;

    type B = NdArray<f32>;

    #[test]
    fn shape_contract() {
        let device = Default::default();
        let aspp = Aspp::<B>::new(64, 256, &[6, 12, 18], &device);
        let y = aspp.forward(Tensor::random([1, 64, 16, 16], Distribution::Default, &device));
        assert_eq!(y.dims(), [1, 256, 16, 16]);
        assert_eq!(aspp.branches.len(), 4);
        assert_eq!(aspp.branches[3].conv.dilation, [18, 18]);
    }

    #[test]
    fn rate_one_matches_plain_convolution() {
        let device = Default::default();
        let dilated = reinitialize(ConvSpec::new(3, 4, 3).dilation(1).init::<B>(&device), 1);
        let mut plain = Conv2dConfig::new([3, 4], [3, 3])
            .with_padding(PaddingConfig2d::Explicit(1, 1))
            .with_bias(false)
            .init::<B>(&device);
        plain.weight = Param::from_tensor(dilated.weight.val());
        let x = Tensor::<B, 4>::random([1, 3, 9, 9], Distribution::Default, &device);
        let a = dilated.forward(x.clone()).into_data().to_vec::<f32>().unwrap();
        let b = plain.forward(x).into_data().to_vec::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_input_gives_constant_interior() {
        let device = Default::default();
        let aspp = reinitialize(Aspp::<B>::new(8, 16, &[2, 3], &device), 4);
        let x = Tensor::<B, 4>::ones([1, 8, 20, 20], &device);
        let y = aspp.forward(x).into_data().to_vec::<f32>().unwrap();
        // Rate 3 reaches 3 pixels; the interior starts there.
        for c in 0..16 {
            let plane = &y[c * 400..(c + 1) * 400];
            let v0 = plane[3 * 20 + 3];
            for yy in 3..17 {
                for xx in 3..17 {
                    assert!((plane[yy * 20 + xx] - v0).abs() < 1e-5);
                }
            }
        }
    }
}
