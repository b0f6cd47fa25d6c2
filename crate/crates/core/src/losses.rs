//! Segmentation losses over `[batch, class, height, width]` tensors: binary
//! cross-entropy, focal, Dice and Sobel-weighted boundary loss, plus their
//! weighted combination.
//!
//! Every function takes raw logits except [`dice_loss`], which takes
//! probabilities. Element-wise terms are averaged over all batch, class and
//! pixel positions.

use burn::tensor::backend::Backend;
use burn::tensor::{ElementConversion, Tensor, TensorData};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("logits shape {logits:?} does not match targets shape {targets:?}")]
    ShapeMismatch { logits: Vec<usize>, targets: Vec<usize> },
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

/// How the boundary loss turns the ground-truth gradient magnitude into a
/// per-pixel weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryWeightMode {
    /// `exp(-θ‖∇T‖)`: edge pixels are down-weighted.
    #[default]
    AsWritten,
    /// `exp(+θ‖∇T‖)` divided by its mean: edge pixels are up-weighted and the
    /// average weight stays 1.
    Emphasize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub w_dice: f64,
    pub w_bce: f64,
    pub w_focal: f64,
    pub w_boundary: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub boundary_theta: f64,
    /// Smoothing for Dice and for the Sobel gradient magnitude.
    pub epsilon: f64,
    pub boundary_weight_mode: BoundaryWeightMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_dice: 1.0,
            w_bce: 0.5,
            w_focal: 1.0,
            w_boundary: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            boundary_theta: 1.5,
            epsilon: 1e-6,
            boundary_weight_mode: BoundaryWeightMode::AsWritten,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let weights = [
            ("w_dice", self.w_dice),
            ("w_bce", self.w_bce),
            ("w_focal", self.w_focal),
            ("w_boundary", self.w_boundary),
        ];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(LossError::InvalidConfig(format!("{name} must be >= 0, got {w}")));
            }
        }
        if !(self.focal_gamma.is_finite() && self.focal_gamma >= 0.0) {
            return Err(LossError::InvalidConfig(format!(
                "focal_gamma must be >= 0, got {}",
                self.focal_gamma
            )));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(LossError::InvalidConfig(format!(
                "focal_alpha must lie in (0, 1), got {}",
                self.focal_alpha
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(LossError::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !self.boundary_theta.is_finite() {
            return Err(LossError::InvalidConfig("boundary_theta must be finite".into()));
        }
        Ok(())
    }
}

/// Scalar values of each term and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub dice: f64,
    pub bce: f64,
    pub focal: f64,
    pub boundary: f64,
}

impl LossBreakdown {
    /// Builds a breakdown whose total is the weighted sum of the given terms.
    pub fn from_terms(config: &LossConfig, dice: f64, bce: f64, focal: f64, boundary: f64) -> Self {
        let total = config.w_dice * dice
            + config.w_bce * bce
            + config.w_focal * focal
            + config.w_boundary * boundary;
        Self {
            total,
            dice,
            bce,
            focal,
            boundary,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.dice, self.bce, self.focal, self.boundary]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Running mean helper: `self * (n / (n + 1)) + other / (n + 1)`.
    pub fn accumulate(&mut self, other: &LossBreakdown, n: usize) {
        let a = n as f64 / (n as f64 + 1.0);
        let b = 1.0 / (n as f64 + 1.0);
        self.total = self.total * a + other.total * b;
        self.dice = self.dice * a + other.dice * b;
        self.bce = self.bce * a + other.bce * b;
        self.focal = self.focal * a + other.focal * b;
        self.boundary = self.boundary * a + other.boundary * b;
    }
}

/// Differentiable loss terms; `total` is the tensor to back-propagate.
#[derive(Clone, Debug)]
pub struct LossTerms<B: Backend> {
    pub total: Tensor<B, 1>,
    pub dice: Tensor<B, 1>,
    pub bce: Tensor<B, 1>,
    pub focal: Tensor<B, 1>,
    pub boundary: Tensor<B, 1>,
}

impl<B: Backend> LossTerms<B> {
    pub fn breakdown(&self, config: &LossConfig) -> LossBreakdown {
        LossBreakdown::from_terms(
            config,
            scalar(&self.dice),
            scalar(&self.bce),
            scalar(&self.focal),
            scalar(&self.boundary),
        )
    }
}

fn scalar<B: Backend>(t: &Tensor<B, 1>) -> f64 {
    t.clone().into_scalar().elem::<f64>()
}

fn check_shapes<B: Backend>(a: &Tensor<B, 4>, b: &Tensor<B, 4>) -> Result<(), LossError> {
    let (sa, sb) = (a.dims(), b.dims());
    if sa != sb {
        return Err(LossError::ShapeMismatch {
            logits: sa.to_vec(),
            targets: sb.to_vec(),
        });
    }
    Ok(())
}

/// Per-element `-[y log σ(x) + (1-y) log(1-σ(x))]` in the overflow-free form
/// `max(x, 0) - x·y + log(1 + exp(-|x|))`.
fn bce_elementwise<B: Backend>(logits: Tensor<B, 4>, targets: Tensor<B, 4>) -> Tensor<B, 4> {
    let softplus_neg_abs = logits.clone().abs().neg().exp().log1p();
    logits.clone().clamp_min(0.0) - logits * targets + softplus_neg_abs
}

pub fn bce_loss<B: Backend>(logits: Tensor<B, 4>, targets: Tensor<B, 4>) -> Result<Tensor<B, 1>, LossError> {
    check_shapes(&logits, &targets)?;
    Ok(bce_elementwise(logits, targets).mean())
}

/// Mean of `-α_t (1 - p_t)^γ log p_t`.
pub fn focal_loss<B: Backend>(
    logits: Tensor<B, 4>,
    targets: Tensor<B, 4>,
    alpha: f64,
    gamma: f64,
) -> Result<Tensor<B, 1>, LossError> {
    check_shapes(&logits, &targets)?;
    // -log p_t is exactly the element-wise BCE.
    let nll = bce_elementwise(logits, targets.clone());
    let alpha_t = targets.clone().mul_scalar(alpha) + targets.neg().add_scalar(1.0).mul_scalar(1.0 - alpha);
    let weighted = if gamma == 0.0 {
        nll * alpha_t
    } else {
        let one_minus_pt = nll.clone().neg().exp().neg().add_scalar(1.0);
        nll * alpha_t * one_minus_pt.powf_scalar(gamma)
    };
    Ok(weighted.mean())
}

/// `1 - mean_c (2 Σ p·t + ε) / (Σ p + Σ t + ε)`, sums taken per class over
/// batch and pixels.
pub fn dice_loss<B: Backend>(probs: Tensor<B, 4>, targets: Tensor<B, 4>, epsilon: f64) -> Result<Tensor<B, 1>, LossError> {
    check_shapes(&probs, &targets)?;
    let classes = probs.dims()[1];
    let per_class = |t: Tensor<B, 4>| -> Tensor<B, 1> {
        t.sum_dim(0).sum_dim(2).sum_dim(3).reshape([classes])
    };
    let intersection = per_class(probs.clone() * targets.clone());
    let denominator = per_class(probs) + per_class(targets);
    let dice = (intersection.mul_scalar(2.0).add_scalar(epsilon)) / denominator.add_scalar(epsilon);
    Ok(dice.mean().neg().add_scalar(1.0))
}

/// `√((S_x * T)² + (S_y * T)² + ε)` per class channel, using 3×3 Sobel
/// kernels and replicated borders.
pub fn sobel_magnitude<B: Backend>(targets: Tensor<B, 4>, epsilon: f64) -> Tensor<B, 4> {
    let [n, c, h, w] = targets.dims();
    let device = targets.device();
    let flat = targets.reshape([n * c, 1, h, w]);
    let padded = replicate_pad(flat);
    #[rustfmt::skip]
    let kernels: [f32; 18] = [
        -1.0, 0.0, 1.0,
        -2.0, 0.0, 2.0,
        -1.0, 0.0, 1.0,
        -1.0, -2.0, -1.0,
         0.0,  0.0,  0.0,
         1.0,  2.0,  1.0,
    ];
    let weight = Tensor::<B, 4>::from_data(TensorData::new(kernels.to_vec(), [2, 1, 3, 3]), &device);
    let grads = burn::tensor::module::conv2d(
        padded,
        weight,
        None,
        burn::tensor::ops::ConvOptions::new([1, 1], [0, 0], [1, 1], 1),
    );
    let gx = grads.clone().narrow(1, 0, 1);
    let gy = grads.narrow(1, 1, 1);
    (gx.powi_scalar(2) + gy.powi_scalar(2))
        .add_scalar(epsilon)
        .sqrt()
        .reshape([n, c, h, w])
}

fn replicate_pad<B: Backend>(x: Tensor<B, 4>) -> Tensor<B, 4> {
    let [_, _, h, w] = x.dims();
    let rows = Tensor::cat(vec![x.clone().narrow(2, 0, 1), x.clone(), x.narrow(2, h - 1, 1)], 2);
    Tensor::cat(
        vec![rows.clone().narrow(3, 0, 1), rows.clone(), rows.narrow(3, w - 1, 1)],
        3,
    )
}

/// Per-pixel BCE weighted by a function of the ground-truth edge strength.
pub fn boundary_loss<B: Backend>(
    logits: Tensor<B, 4>,
    targets: Tensor<B, 4>,
    theta: f64,
    epsilon: f64,
    mode: BoundaryWeightMode,
) -> Result<Tensor<B, 1>, LossError> {
    check_shapes(&logits, &targets)?;
    let magnitude = sobel_magnitude(targets.clone().detach(), epsilon);
    let weights = match mode {
        BoundaryWeightMode::AsWritten => magnitude.mul_scalar(-theta).exp(),
        BoundaryWeightMode::Emphasize => {
            let w = magnitude.mul_scalar(theta).exp();
            let mean = w.clone().mean().reshape([1, 1, 1, 1]);
            w / mean
        }
    };
    Ok((bce_elementwise(logits, targets) * weights.detach()).mean())
}

/// `σ(x) = exp(-softplus(-x))` evaluated in the tensor's own precision, with
/// finite gradients for any finite logit.
pub fn sigmoid<B: Backend, const D: usize>(logits: Tensor<B, D>) -> Tensor<B, D> {
    let neg = logits.clone().neg();
    let softplus = neg.clamp_min(0.0) + logits.abs().neg().exp().log1p();
    softplus.neg().exp()
}

/// All four terms from raw logits; Dice sees `sigmoid(logits)`.
pub fn combined_loss<B: Backend>(
    logits: Tensor<B, 4>,
    targets: Tensor<B, 4>,
    config: &LossConfig,
) -> Result<LossTerms<B>, LossError> {
    check_shapes(&logits, &targets)?;
    let dice = dice_loss(sigmoid(logits.clone()), targets.clone(), config.epsilon)?;
    let bce = bce_loss(logits.clone(), targets.clone())?;
    let focal = focal_loss(logits.clone(), targets.clone(), config.focal_alpha, config.focal_gamma)?;
    let boundary = boundary_loss(
        logits,
        targets,
        config.boundary_theta,
        config.epsilon,
        config.boundary_weight_mode,
    )?;
    let total = dice.clone().mul_scalar(config.w_dice)
        + bce.clone().mul_scalar(config.w_bce)
        + focal.clone().mul_scalar(config.w_focal)
        + boundary.clone().mul_scalar(config.w_boundary);
    Ok(LossTerms {
        total,
        dice,
        bce,
        focal,
        boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use burn::backend::NdArray;

    type B = NdArray<f64>;

    fn t4(values: &[f64], shape: [usize; 4]) -> Tensor<B, 4> {
        Tensor::from_data(TensorData::new(values.to_vec(), shape), &Default::default())
    }

    fn val(t: Tensor<B, 1>) -> f64 {
        t.into_scalar()
    }

    #[test]
    fn bce_saturated_correct_is_tiny() {
        let y = [1.0, 0.0, 0.0, 1.0];
        let x: Vec<f64> = y.iter().map(|v| if *v == 1.0 { 20.0 } else { -20.0 }).collect();
        let l = val(bce_loss(t4(&x, [1, 1, 2, 2]), t4(&y, [1, 1, 2, 2])).unwrap());
        assert!(l < 1e-6, "{l}");
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let y = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let l = val(bce_loss(t4(&[0.0; 8], [1, 2, 2, 2]), t4(&y, [1, 2, 2, 2])).unwrap());
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_single_pixel() {
        let l = val(bce_loss(t4(&[3f64.ln()], [1, 1, 1, 1]), t4(&[1.0], [1, 1, 1, 1])).unwrap());
        assert!((l - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((l - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch() {
        let err = bce_loss(t4(&[0.0; 4], [1, 1, 2, 2]), t4(&[0.0; 4], [1, 4, 1, 1])).unwrap_err();
        assert!(matches!(err, LossError::ShapeMismatch { .. }));
    }

    #[test]
    fn focal_single_pixel() {
        let l = val(focal_loss(t4(&[0.0], [1, 1, 1, 1]), t4(&[1.0], [1, 1, 1, 1]), 0.25, 2.0).unwrap());
        let expected = 0.25 * 0.25 * -(0.5f64.ln());
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.04332).abs() < 1e-5);
    }

    #[test]
    fn focal_confident_correct_vanishes() {
        let l = val(focal_loss(t4(&[30.0, -30.0], [1, 1, 1, 2]), t4(&[1.0, 0.0], [1, 1, 1, 2]), 0.25, 2.0).unwrap());
        assert!(l < 1e-12);
    }

    #[test]
    fn dice_hand_count() {
        let p = t4(&[1.0, 1.0, 0.0, 0.0], [1, 1, 1, 4]);
        let t = t4(&[0.0, 1.0, 1.0, 0.0], [1, 1, 1, 4]);
        let l = val(dice_loss(p, t, 1e-12).unwrap());
        assert!((l - 0.5).abs() < 1e-9);
    }

    #[test]
    fn dice_perfect_and_empty() {
        let t = t4(&[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0], [1, 2, 1, 4]);
        assert!(val(dice_loss(t.clone(), t, 1e-6).unwrap()).abs() < 1e-12);
        let z = t4(&[0.0; 8], [1, 2, 1, 4]);
        assert!(val(dice_loss(z.clone(), z, 1e-6).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sobel_step_edge_is_four() {
        // Columns 0..3 background, 3..6 foreground.
        let mut v = vec![0.0; 36];
        for r in 0..6 {
            for c in 3..6 {
                v[r * 6 + c] = 1.0;
            }
        }
        let g: Vec<f64> = sobel_magnitude(t4(&v, [1, 1, 6, 6]), 0.0).into_data().to_vec().unwrap();
        for r in 0..6 {
            assert_eq!(g[r * 6 + 2], 4.0);
            assert_eq!(g[r * 6 + 3], 4.0);
            assert_eq!(g[r * 6 + 0], 0.0);
            assert_eq!(g[r * 6 + 5], 0.0);
        }
    }

    #[test]
    fn boundary_on_flat_mask_scales_bce() {
        let x = [0.3, -1.2, 2.0, 0.7];
        let y = [0.0; 4];
        let bce = val(bce_loss(t4(&x, [1, 1, 2, 2]), t4(&y, [1, 1, 2, 2])).unwrap());
        let eps = 1e-6;
        let b = val(boundary_loss(t4(&x, [1, 1, 2, 2]), t4(&y, [1, 1, 2, 2]), 1.5, eps, BoundaryWeightMode::AsWritten).unwrap());
        assert!((b - bce * (-1.5 * eps.sqrt()).exp()).abs() < 1e-12);
    }

    #[test]
    fn boundary_edge_weight() {
        let mut y = vec![0.0; 36];
        for r in 0..6 {
            for c in 3..6 {
                y[r * 6 + c] = 1.0;
            }
        }
        // Only the edge pixel (0, 2) carries a nonzero per-pixel BCE term.
        let mut x = vec![-60.0; 36];
        for r in 0..6 {
            for c in 3..6 {
                x[r * 6 + c] = 60.0;
            }
        }
        x[2] = 0.0;
        let l = val(boundary_loss(t4(&x, [1, 1, 6, 6]), t4(&y, [1, 1, 6, 6]), 1.5, 1e-6, BoundaryWeightMode::AsWritten).unwrap());
        let weight = (-1.5 * (16.0f64 + 1e-6).sqrt()).exp();
        let expected = std::f64::consts::LN_2 * weight / 36.0;
        assert!((l - expected).abs() < 1e-15, "{l} vs {expected}");
    }

    #[test]
    fn boundary_emphasize_upweights_edges() {
        let mut y = vec![0.0; 36];
        for r in 0..6 {
            for c in 3..6 {
                y[r * 6 + c] = 1.0;
            }
        }
        let mut x_edge = vec![-60.0; 36];
        let mut x_flat = vec![-60.0; 36];
        for r in 0..6 {
            for c in 3..6 {
                x_edge[r * 6 + c] = 60.0;
                x_flat[r * 6 + c] = 60.0;
            }
        }
        x_edge[2] = 0.0; // edge pixel uncertain
        x_flat[0] = 0.0; // flat pixel uncertain
        let run = |x: &[f64], mode| val(boundary_loss(t4(x, [1, 1, 6, 6]), t4(&y, [1, 1, 6, 6]), 1.5, 1e-6, mode).unwrap());
        assert!(run(&x_edge, BoundaryWeightMode::Emphasize) > run(&x_flat, BoundaryWeightMode::Emphasize));
        assert!(run(&x_edge, BoundaryWeightMode::AsWritten) < run(&x_flat, BoundaryWeightMode::AsWritten));
    }

    #[test]
    fn combined_composition() {
        let cfg = LossConfig {
            w_dice: 0.0,
            w_bce: 0.0,
            w_focal: 0.0,
            w_boundary: 0.0,
            ..LossConfig::default()
        };
        let x = t4(&[0.1, 0.2, -0.3, 0.4], [1, 1, 2, 2]);
        let y = t4(&[1.0, 0.0, 1.0, 0.0], [1, 1, 2, 2]);
        let terms = combined_loss(x.clone(), y.clone(), &cfg).unwrap();
        assert_eq!(val(terms.total.clone()), 0.0);
        assert_eq!(terms.breakdown(&cfg).total, 0.0);

        let cfg = LossConfig::default();
        let terms = combined_loss(x, y, &cfg).unwrap();
        let b = terms.breakdown(&cfg);
        let weighted = b.dice + 0.5 * b.bce + b.focal + 0.5 * b.boundary;
        assert!((b.total - weighted).abs() <= 1e-12 * weighted.abs());
        assert!((val(terms.total) - b.total).abs() < 1e-12);
    }

    #[test]
    fn combined_saturated_flat_is_small() {
        let x = t4(&[-40.0; 64], [1, 4, 4, 4]);
        let y = t4(&[0.0; 64], [1, 4, 4, 4]);
        let terms = combined_loss(x, y, &LossConfig::default()).unwrap();
        assert!(terms.breakdown(&LossConfig::default()).total < 1e-4);
    }

    #[test]
    fn combined_saturated_with_lesions_is_small() {
        // Every class has foreground so Dice can reach zero.
        let y: Vec<f64> = (0..64).map(|i| if i % 16 < 8 { 1.0 } else { 0.0 }).collect();
        let x: Vec<f64> = y.iter().map(|v| if *v == 1.0 { 40.0 } else { -40.0 }).collect();
        let terms = combined_loss(t4(&x, [1, 4, 4, 4]), t4(&y, [1, 4, 4, 4]), &LossConfig::default()).unwrap();
        assert!(terms.breakdown(&LossConfig::default()).total < 1e-4);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            w_dice: -1.0,
            ..LossConfig::default()
        };
        assert!(matches!(bad.validate(), Err(LossError::InvalidConfig(m)) if m.contains("w_dice")));
        let bad = LossConfig {
            focal_alpha: 1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
