use burn::module::{ModuleVisitor, ParamId};
use burn::optim::GradientsParams;
use burn::prelude::*;
use burn::tensor::backend::AutodiffBackend;

use crate::model::SegmentationModel;

struct SquaredNorm<'a> {
    grads: &'a GradientsParams,
    total: f64,
}

impl<B: AutodiffBackend> ModuleVisitor<B> for SquaredNorm<'_> {
    fn visit_float<const D: usize>(&mut self, id: ParamId, _tensor: &Tensor<B, D>) {
        if let Some(g) = self.grads.get::<B::InnerBackend, D>(id) {
            self.total += g.powi_scalar(2).sum().into_scalar().elem::<f64>();
        }
    }
}

struct Scale<'a> {
    grads: &'a mut GradientsParams,
    factor: f64,
}

impl<B: AutodiffBackend> ModuleVisitor<B> for Scale<'_> {
    fn visit_float<const D: usize>(&mut self, id: ParamId, _tensor: &Tensor<B, D>) {
        if let Some(g) = self.grads.remove::<B::InnerBackend, D>(id) {
            self.grads.register(id, g.mul_scalar(self.factor));
        }
    }
}

/// L2 norm over all parameter gradients of the model.
pub fn global_grad_norm<B: AutodiffBackend>(model: &SegmentationModel<B>, grads: &GradientsParams) -> f64 {
    let mut v = SquaredNorm { grads, total: 0.0 };
    model.visit(&mut v);
    v.total.sqrt()
}

/// Rescales all gradients so that their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<B: AutodiffBackend>(
    model: &SegmentationModel<B>,
    grads: &mut GradientsParams,
    max_norm: Option<f64>,
) -> f64 {
    let norm = global_grad_norm(model, grads);
    if let Some(max) = max_norm {
        if norm > max {
            let mut s = Scale {
                grads,
                factor: max / (norm + 1e-6),
            };
            model.visit(&mut s);
        }
    }
    norm
}
