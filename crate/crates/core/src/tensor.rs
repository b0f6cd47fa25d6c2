//! Conversions between `ndarray` samples and backend tensors, plus a weight
//! fingerprint.

use burn::module::{Module, ModuleVisitor, ParamId};
use burn::prelude::*;
use ndarray::{Array3, ArrayView3};
use sha2::{Digest, Sha256};

pub type Cpu = burn::backend::NdArray<f32>;
pub type CpuAutodiff = burn::backend::Autodiff<Cpu>;
pub type CpuDevice = burn::backend::ndarray::NdArrayDevice;

/// Stacks `C×H×W` arrays into an `[N, C, H, W]` tensor.
pub fn stack_images<B: Backend>(images: &[ArrayView3<f32>], device: &B::Device) -> Tensor<B, 4> {
    let (c, h, w) = images.first().map_or((0, 0, 0), |a| a.dim());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        assert_eq!(img.dim(), (c, h, w), "images in a batch must share a shape");
        data.extend(img.iter().copied());
    }
    Tensor::from_data(TensorData::new(data, [images.len(), c, h, w]), device)
}

/// Stacks `K×H×W` binary masks into a float `[N, K, H, W]` tensor.
pub fn stack_masks<B: Backend>(masks: &[ArrayView3<u8>], device: &B::Device) -> Tensor<B, 4> {
    let (c, h, w) = masks.first().map_or((0, 0, 0), |a| a.dim());
    let mut data = Vec::with_capacity(masks.len() * c * h * w);
    for m in masks {
        assert_eq!(m.dim(), (c, h, w), "masks in a batch must share a shape");
        data.extend(m.iter().map(|&v| f32::from(v)));
    }
    Tensor::from_data(TensorData::new(data, [masks.len(), c, h, w]), device)
}

/// Splits an `[N, C, H, W]` tensor into `N` arrays.
pub fn unstack<B: Backend>(t: Tensor<B, 4>) -> Vec<Array3<f32>> {
    let [n, c, h, w] = t.dims();
    let data = t.into_data().convert::<f32>();
    let values = data.as_slice::<f32>().expect("f32 data");
    values
        .chunks_exact((c * h * w).max(1))
        .take(n)
        .map(|chunk| Array3::from_shape_vec((c, h, w), chunk.to_vec()).expect("chunk size"))
        .collect()
}

struct Hasher(Sha256);

impl<B: Backend> ModuleVisitor<B> for Hasher {
    fn visit_float<const D: usize>(&mut self, _id: ParamId, tensor: &Tensor<B, D>) {
        let data = tensor.to_data().convert::<f32>();
        for d in tensor.dims() {
            self.0.update((d as u64).to_le_bytes());
        }
        self.0.update(data.as_bytes());
    }
}

/// SHA-256 over every float tensor of a module (shapes and values), in
/// visiting order.
pub fn weights_digest<B: Backend, M: Module<B>>(module: &M) -> String {
    let mut hasher = Hasher(Sha256::new());
    module.visit(&mut hasher);
    format!("{:x}", hasher.0.finalize())
}
