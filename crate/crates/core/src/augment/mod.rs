//! Training-time augmentation and the deterministic evaluation transform.
//!
//! A draw is split in two steps: [`Pipeline::sample_plan`] decides which ops
//! fire and with which parameters, and [`Pipeline::execute`] applies that
//! plan to an image and its masks. Geometric ops move the image
//! (bilinear) and all mask channels (nearest neighbour) with one shared
//! coordinate field; photometric ops touch the image only. The order is
//! fixed: resize, flips/rot90, shift-scale-rotate, color one-of, noise,
//! blur, geometric one-of, normalize.

mod color;
mod warp;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FundusSample;
use warp::SourceMap;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftScaleRotateConfig {
    /// Fraction of width/height.
    pub shift_limit: f64,
    /// Relative scale change.
    pub scale_limit: f64,
    /// Degrees.
    pub rotate_limit: f64,
    pub p: f64,
}

impl Default for ShiftScaleRotateConfig {
    fn default() -> Self {
        Self {
            shift_limit: 0.0625,
            scale_limit: 0.1,
            rotate_limit: 15.0,
            p: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BrightnessContrastConfig {
    pub brightness_limit: f64,
    pub contrast_limit: f64,
    pub p: f64,
}

impl Default for BrightnessContrastConfig {
    fn default() -> Self {
        Self {
            brightness_limit: 0.2,
            contrast_limit: 0.2,
            p: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GammaConfig {
    pub low: f64,
    pub high: f64,
    pub p: f64,
}

impl Default for GammaConfig {
    fn default() -> Self {
        Self {
            low: 0.8,
            high: 1.2,
            p: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HsvConfig {
    /// Degrees.
    pub hue_limit: f64,
    /// Additive, fraction of full scale.
    pub saturation_limit: f64,
    /// Additive, fraction of full scale.
    pub value_limit: f64,
    pub p: f64,
}

impl Default for HsvConfig {
    fn default() -> Self {
        Self {
            hue_limit: 10.0,
            saturation_limit: 0.15,
            value_limit: 0.1,
            p: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColorGroupConfig {
    pub p: f64,
    pub brightness_contrast: BrightnessContrastConfig,
    pub gamma: GammaConfig,
    pub hsv: HsvConfig,
}

impl Default for ColorGroupConfig {
    fn default() -> Self {
        Self {
            p: 0.5,
            brightness_contrast: BrightnessContrastConfig::default(),
            gamma: GammaConfig::default(),
            hsv: HsvConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Variance range in squared 8-bit intensity units.
    pub var_low: f64,
    pub var_high: f64,
    pub p: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            var_low: 10.0,
            var_high: 50.0,
            p: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlurConfig {
    /// Largest odd kernel size; sizes are drawn from the odd values in 3..=max.
    pub max_kernel: usize,
    pub p: f64,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self { max_kernel: 3, p: 0.15 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElasticConfig {
    pub alpha: f64,
    pub sigma: f64,
    pub p: f64,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            sigma: 50.0,
            p: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridDistortionConfig {
    pub steps: usize,
    pub distort_limit: f64,
    pub p: f64,
}

impl Default for GridDistortionConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            distort_limit: 0.3,
            p: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpticalDistortionConfig {
    pub distort_limit: f64,
    /// Principal-point shift in pixels.
    pub shift_limit: f64,
    pub p: f64,
}

impl Default for OpticalDistortionConfig {
    fn default() -> Self {
        Self {
            distort_limit: 1.0,
            shift_limit: 0.5,
            p: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometricGroupConfig {
    pub p: f64,
    pub elastic: ElasticConfig,
    pub grid_distortion: GridDistortionConfig,
    pub optical_distortion: OpticalDistortionConfig,
}

impl Default for GeometricGroupConfig {
    fn default() -> Self {
        Self {
            p: 0.3,
            elastic: ElasticConfig::default(),
            grid_distortion: GridDistortionConfig::default(),
            optical_distortion: OpticalDistortionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// `[height, width]`.
    pub target_size: [usize; 2],
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_rot90: f64,
    pub shift_scale_rotate: ShiftScaleRotateConfig,
    pub color: ColorGroupConfig,
    pub gaussian_noise: NoiseConfig,
    pub gaussian_blur: BlurConfig,
    pub geometric: GeometricGroupConfig,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            target_size: [512, 512],
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_rot90: 0.5,
            shift_scale_rotate: ShiftScaleRotateConfig::default(),
            color: ColorGroupConfig::default(),
            gaussian_noise: NoiseConfig::default(),
            gaussian_blur: BlurConfig::default(),
            geometric: GeometricGroupConfig::default(),
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl AugmentationConfig {
    /// Same schedule with every probability set to zero: resize + normalize.
    pub fn disabled() -> Self {
        let mut c = Self::default();
        c.p_hflip = 0.0;
        c.p_vflip = 0.0;
        c.p_rot90 = 0.0;
        c.shift_scale_rotate.p = 0.0;
        c.color.p = 0.0;
        c.gaussian_noise.p = 0.0;
        c.gaussian_blur.p = 0.0;
        c.geometric.p = 0.0;
        c
    }

    pub fn with_target_size(mut self, height: usize, width: usize) -> Self {
        self.target_size = [height, width];
        self
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let err = |m: String| Err(AugmentError::InvalidConfig(m));
        let probs = [
            ("p_hflip", self.p_hflip),
            ("p_vflip", self.p_vflip),
            ("p_rot90", self.p_rot90),
            ("shift_scale_rotate.p", self.shift_scale_rotate.p),
            ("color.p", self.color.p),
            ("color.brightness_contrast.p", self.color.brightness_contrast.p),
            ("color.gamma.p", self.color.gamma.p),
            ("color.hsv.p", self.color.hsv.p),
            ("gaussian_noise.p", self.gaussian_noise.p),
            ("gaussian_blur.p", self.gaussian_blur.p),
            ("geometric.p", self.geometric.p),
            ("geometric.elastic.p", self.geometric.elastic.p),
            ("geometric.grid_distortion.p", self.geometric.grid_distortion.p),
            ("geometric.optical_distortion.p", self.geometric.optical_distortion.p),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        let limits = [
            ("shift_scale_rotate.shift_limit", self.shift_scale_rotate.shift_limit),
            ("shift_scale_rotate.scale_limit", self.shift_scale_rotate.scale_limit),
            ("shift_scale_rotate.rotate_limit", self.shift_scale_rotate.rotate_limit),
            ("color.brightness_contrast.brightness_limit", self.color.brightness_contrast.brightness_limit),
            ("color.brightness_contrast.contrast_limit", self.color.brightness_contrast.contrast_limit),
            ("color.hsv.hue_limit", self.color.hsv.hue_limit),
            ("color.hsv.saturation_limit", self.color.hsv.saturation_limit),
            ("color.hsv.value_limit", self.color.hsv.value_limit),
            ("geometric.elastic.alpha", self.geometric.elastic.alpha),
            ("geometric.grid_distortion.distort_limit", self.geometric.grid_distortion.distort_limit),
            ("geometric.optical_distortion.distort_limit", self.geometric.optical_distortion.distort_limit),
            ("geometric.optical_distortion.shift_limit", self.geometric.optical_distortion.shift_limit),
        ];
        for (name, v) in limits {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if self.shift_scale_rotate.scale_limit >= 1.0 {
            return err("shift_scale_rotate.scale_limit must be < 1".into());
        }
        if self.target_size.iter().any(|&s| s == 0) {
            return err(format!("target_size must be positive, got {:?}", self.target_size));
        }
        let g = &self.color.gamma;
        if !(g.low > 0.0 && g.low <= g.high && g.high.is_finite()) {
            return err(format!("gamma range must satisfy 0 < low <= high, got [{}, {}]", g.low, g.high));
        }
        let n = &self.gaussian_noise;
        if !(n.var_low >= 0.0 && n.var_low <= n.var_high && n.var_high.is_finite()) {
            return err(format!("noise variance range invalid: [{}, {}]", n.var_low, n.var_high));
        }
        if self.gaussian_blur.max_kernel < 3 || self.gaussian_blur.max_kernel % 2 == 0 {
            return err(format!("gaussian_blur.max_kernel must be odd and >= 3, got {}", self.gaussian_blur.max_kernel));
        }
        if !(self.geometric.elastic.sigma > 0.0 && self.geometric.elastic.sigma.is_finite()) {
            return err("geometric.elastic.sigma must be > 0".into());
        }
        if self.geometric.grid_distortion.steps == 0 {
            return err("geometric.grid_distortion.steps must be >= 1".into());
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return err(format!("normalization std must be > 0, got {:?}", self.std));
        }
        Ok(())
    }

    /// Probability that each named op fires in one draw.
    pub fn expected_rates(&self) -> Vec<(&'static str, f64)> {
        let color = &self.color;
        let cw = [color.brightness_contrast.p, color.gamma.p, color.hsv.p];
        let geo = &self.geometric;
        let gw = [geo.elastic.p, geo.grid_distortion.p, geo.optical_distortion.p];
        let share = |group_p: f64, w: &[f64; 3], i: usize| {
            let total: f64 = w.iter().sum();
            if total > 0.0 {
                group_p * w[i] / total
            } else {
                0.0
            }
        };
        vec![
            ("hflip", self.p_hflip),
            ("vflip", self.p_vflip),
            ("rot90", self.p_rot90),
            ("shift_scale_rotate", self.shift_scale_rotate.p),
            ("brightness_contrast", share(color.p, &cw, 0)),
            ("gamma", share(color.p, &cw, 1)),
            ("hsv", share(color.p, &cw, 2)),
            ("gaussian_noise", self.gaussian_noise.p),
            ("gaussian_blur", self.gaussian_blur.p),
            ("elastic", share(geo.p, &gw, 0)),
            ("grid_distortion", share(geo.p, &gw, 1)),
            ("optical_distortion", share(geo.p, &gw, 2)),
        ]
    }
}

/// One executed op with the parameters that were sampled for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AppliedOp {
    Resize { height: usize, width: usize },
    Hflip,
    Vflip,
    /// Counter-clockwise quarter turns.
    Rot90 { k: u8 },
    ShiftScaleRotate { dx: f64, dy: f64, scale: f64, angle_deg: f64 },
    BrightnessContrast { brightness: f64, contrast: f64 },
    Gamma { gamma: f64 },
    Hsv { hue_deg: f64, saturation: f64, value: f64 },
    GaussianNoise { variance: f64, seed: u64 },
    GaussianBlur { kernel: usize, sigma: f64 },
    Elastic { alpha: f64, sigma: f64, seed: u64 },
    GridDistortion { x_steps: Vec<f64>, y_steps: Vec<f64> },
    OpticalDistortion { k: f64, dx: f64, dy: f64 },
    Normalize,
}

impl AppliedOp {
    pub fn name(&self) -> &'static str {
        match self {
            AppliedOp::Resize { .. } => "resize",
            AppliedOp::Hflip => "hflip",
            AppliedOp::Vflip => "vflip",
            AppliedOp::Rot90 { .. } => "rot90",
            AppliedOp::ShiftScaleRotate { .. } => "shift_scale_rotate",
            AppliedOp::BrightnessContrast { .. } => "brightness_contrast",
            AppliedOp::Gamma { .. } => "gamma",
            AppliedOp::Hsv { .. } => "hsv",
            AppliedOp::GaussianNoise { .. } => "gaussian_noise",
            AppliedOp::GaussianBlur { .. } => "gaussian_blur",
            AppliedOp::Elastic { .. } => "elastic",
            AppliedOp::GridDistortion { .. } => "grid_distortion",
            AppliedOp::OpticalDistortion { .. } => "optical_distortion",
            AppliedOp::Normalize => "normalize",
        }
    }

    pub fn is_geometric(&self) -> bool {
        matches!(
            self,
            AppliedOp::Resize { .. }
                | AppliedOp::Hflip
                | AppliedOp::Vflip
                | AppliedOp::Rot90 { .. }
                | AppliedOp::ShiftScaleRotate { .. }
                | AppliedOp::Elastic { .. }
                | AppliedOp::GridDistortion { .. }
                | AppliedOp::OpticalDistortion { .. }
        )
    }
}

/// Network-ready sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    /// 3×H×W, normalized.
    pub image: Array3<f32>,
    /// 4×H×W in {0, 1}.
    pub masks: Array3<u8>,
    pub applied_ops: Vec<AppliedOp>,
    pub sample_id: String,
}

#[derive(Serialize)]
struct AuditRecord<'a> {
    sample_id: &'a str,
    ops: &'a [AppliedOp],
}

impl AugmentedSample {
    /// One JSON line describing the ops applied to this sample.
    pub fn audit_line(&self) -> String {
        serde_json::to_string(&AuditRecord {
            sample_id: &self.sample_id,
            ops: &self.applied_ops,
        })
        .expect("audit record serializes")
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, worker, draw)`.
pub fn stream_rng(seed: u64, worker_id: u64, draw_index: u64) -> ChaCha8Rng {
    let mixed = splitmix64(splitmix64(splitmix64(seed) ^ worker_id) ^ draw_index);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Immutable augmentation sampler.
#[derive(Clone, Debug)]
pub struct Pipeline {
    config: AugmentationConfig,
    seed: u64,
}

pub fn build_pipeline(config: AugmentationConfig, seed: u64) -> Result<Pipeline, AugmentError> {
    config.validate()?;
    Ok(Pipeline { config, seed })
}

fn symmetric(rng: &mut impl Rng, limit: f64) -> f64 {
    if limit == 0.0 {
        0.0
    } else {
        rng.random_range(-limit..=limit)
    }
}

fn uniform(rng: &mut impl Rng, low: f64, high: f64) -> f64 {
    if low == high {
        low
    } else {
        rng.random_range(low..=high)
    }
}

/// Picks a member index proportionally to `weights`, or `None` when all are 0.
fn pick_weighted(rng: &mut impl Rng, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return Some(i);
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0)
}

impl Pipeline {
    pub fn config(&self) -> &AugmentationConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Samples the op sequence for one draw. Every Bernoulli trial is drawn
    /// whether or not its op is enabled, so the stream layout does not
    /// depend on the probabilities.
    pub fn sample_plan(&self, rng: &mut impl Rng) -> Vec<AppliedOp> {
        let c = &self.config;
        let [height, width] = c.target_size;
        let mut ops = vec![AppliedOp::Resize { height, width }];

        if rng.random_bool(c.p_hflip) {
            ops.push(AppliedOp::Hflip);
        }
        if rng.random_bool(c.p_vflip) {
            ops.push(AppliedOp::Vflip);
        }
        if rng.random_bool(c.p_rot90) {
            ops.push(AppliedOp::Rot90 { k: rng.random_range(1..=3) });
        }
        let ssr = &c.shift_scale_rotate;
        if rng.random_bool(ssr.p) {
            ops.push(AppliedOp::ShiftScaleRotate {
                dx: symmetric(rng, ssr.shift_limit),
                dy: symmetric(rng, ssr.shift_limit),
                scale: 1.0 + symmetric(rng, ssr.scale_limit),
                angle_deg: symmetric(rng, ssr.rotate_limit),
            });
        }

        let color = &c.color;
        if rng.random_bool(color.p) {
            let weights = [color.brightness_contrast.p, color.gamma.p, color.hsv.p];
            match pick_weighted(rng, &weights) {
                Some(0) => ops.push(AppliedOp::BrightnessContrast {
                    brightness: symmetric(rng, color.brightness_contrast.brightness_limit),
                    contrast: 1.0 + symmetric(rng, color.brightness_contrast.contrast_limit),
                }),
                Some(1) => ops.push(AppliedOp::Gamma {
                    gamma: uniform(rng, color.gamma.low, color.gamma.high),
                }),
                Some(_) => ops.push(AppliedOp::Hsv {
                    hue_deg: symmetric(rng, color.hsv.hue_limit),
                    saturation: symmetric(rng, color.hsv.saturation_limit),
                    value: symmetric(rng, color.hsv.value_limit),
                }),
                None => {}
            }
        }

        if rng.random_bool(c.gaussian_noise.p) {
            ops.push(AppliedOp::GaussianNoise {
                variance: uniform(rng, c.gaussian_noise.var_low, c.gaussian_noise.var_high),
                seed: rng.random(),
            });
        }
        if rng.random_bool(c.gaussian_blur.p) {
            let choices = (c.gaussian_blur.max_kernel - 1) / 2;
            let kernel = 2 * rng.random_range(1..=choices) + 1;
            // OpenCV's default sigma for a given kernel size.
            let sigma = 0.3 * ((kernel as f64 - 1.0) * 0.5 - 1.0) + 0.8;
            ops.push(AppliedOp::GaussianBlur { kernel, sigma });
        }

        let geo = &c.geometric;
        if rng.random_bool(geo.p) {
            let weights = [geo.elastic.p, geo.grid_distortion.p, geo.optical_distortion.p];
            match pick_weighted(rng, &weights) {
                Some(0) => ops.push(AppliedOp::Elastic {
                    alpha: geo.elastic.alpha,
                    sigma: geo.elastic.sigma,
                    seed: rng.random(),
                }),
                Some(1) => {
                    let g = &geo.grid_distortion;
                    let mut steps = || -> Vec<f64> {
                        (0..=g.steps).map(|_| 1.0 + symmetric(rng, g.distort_limit)).collect()
                    };
                    let x_steps = steps();
                    let y_steps = steps();
                    ops.push(AppliedOp::GridDistortion { x_steps, y_steps });
                }
                Some(_) => {
                    let o = &geo.optical_distortion;
                    ops.push(AppliedOp::OpticalDistortion {
                        k: symmetric(rng, o.distort_limit),
                        dx: symmetric(rng, o.shift_limit),
                        dy: symmetric(rng, o.shift_limit),
                    });
                }
                None => {}
            }
        }

        ops.push(AppliedOp::Normalize);
        ops
    }

    /// Applies a plan to a sample.
    pub fn execute(&self, plan: &[AppliedOp], sample: &FundusSample) -> AugmentedSample {
        let mut image = sample.image.mapv(f32::from);
        let mut masks = sample.masks.clone();
        let mut normalized = None;
        for op in plan {
            match op {
                AppliedOp::Resize { height, width } => {
                    image = warp::resize_image(&image, *height, *width);
                    masks = warp::resize_masks(&masks, *height, *width);
                }
                AppliedOp::Hflip => {
                    warp::hflip_image(&mut image);
                    warp::hflip_masks(&mut masks);
                }
                AppliedOp::Vflip => {
                    warp::vflip_image(&mut image);
                    warp::vflip_masks(&mut masks);
                }
                AppliedOp::Rot90 { k } => {
                    image = warp::rot90_image(&image, *k);
                    masks = warp::rot90_masks(&masks, *k);
                }
                AppliedOp::ShiftScaleRotate {
                    dx,
                    dy,
                    scale,
                    angle_deg,
                } => {
                    let map = shift_scale_rotate_map(image.dim().0, image.dim().1, *dx, *dy, *scale, *angle_deg);
                    image = warp::remap_image(&image, &map);
                    masks = warp::remap_masks(&masks, &map);
                }
                AppliedOp::BrightnessContrast { brightness, contrast } => {
                    color::brightness_contrast(&mut image, *brightness, *contrast)
                }
                AppliedOp::Gamma { gamma } => color::gamma(&mut image, *gamma),
                AppliedOp::Hsv {
                    hue_deg,
                    saturation,
                    value,
                } => color::hsv_shift(&mut image, *hue_deg, *saturation, *value),
                AppliedOp::GaussianNoise { variance, seed } => color::gaussian_noise(&mut image, *variance, *seed),
                AppliedOp::GaussianBlur { kernel, sigma } => {
                    let taps = warp::gaussian_kernel(*sigma, kernel / 2);
                    image = warp::blur_image(&image, &taps);
                }
                AppliedOp::Elastic { alpha, sigma, seed } => {
                    let map = elastic_map(image.dim().0, image.dim().1, *alpha, *sigma, *seed);
                    image = warp::remap_image(&image, &map);
                    masks = warp::remap_masks(&masks, &map);
                }
                AppliedOp::GridDistortion { x_steps, y_steps } => {
                    let map = grid_distortion_map(image.dim().0, image.dim().1, x_steps, y_steps);
                    image = warp::remap_image(&image, &map);
                    masks = warp::remap_masks(&masks, &map);
                }
                AppliedOp::OpticalDistortion { k, dx, dy } => {
                    let map = optical_distortion_map(image.dim().0, image.dim().1, *k, *dx, *dy);
                    image = warp::remap_image(&image, &map);
                    masks = warp::remap_masks(&masks, &map);
                }
                AppliedOp::Normalize => {
                    normalized = Some(normalize(&image, &self.config.mean, &self.config.std));
                }
            }
        }
        let image = normalized.unwrap_or_else(|| {
            image
                .permuted_axes([2, 0, 1])
                .as_standard_layout()
                .into_owned()
        });
        AugmentedSample {
            image,
            masks,
            applied_ops: plan.to_vec(),
            sample_id: sample.sample_id.clone(),
        }
    }

    /// Stochastic training transform for draw `draw_index` of worker 0.
    pub fn apply_train(&self, sample: &FundusSample, draw_index: u64) -> AugmentedSample {
        self.apply_train_worker(sample, 0, draw_index)
    }

    pub fn apply_train_worker(&self, sample: &FundusSample, worker_id: u64, draw_index: u64) -> AugmentedSample {
        let mut rng = stream_rng(self.seed, worker_id, draw_index);
        let plan = self.sample_plan(&mut rng);
        self.execute(&plan, sample)
    }

    /// Deterministic evaluation transform: resize and normalize.
    pub fn apply_eval(&self, sample: &FundusSample) -> AugmentedSample {
        let [height, width] = self.config.target_size;
        self.execute(&[AppliedOp::Resize { height, width }, AppliedOp::Normalize], sample)
    }
}

/// `(x / 255 - mean) / std`, returned channel-first.
fn normalize(img: &Array3<f32>, mean: &[f64; 3], std: &[f64; 3]) -> Array3<f32> {
    let (h, w, _) = img.dim();
    let mut out = Array3::<f32>::zeros((3, h, w));
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (m, s) = (mean[c] as f32, std[c] as f32);
        let src = img.index_axis(Axis(2), c);
        plane.zip_mut_with(&src, |o, &v| *o = (v / 255.0 - m) / s);
    }
    out
}

/// Inverse of "rotate and scale about the centre, then translate".
fn shift_scale_rotate_map(h: usize, w: usize, dx: f64, dy: f64, scale: f64, angle_deg: f64) -> SourceMap {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (tx, ty) = (dx * w as f64, dy * h as f64);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    SourceMap::from_fn(h, w, |y, x| {
        let u = x as f64 - cx - tx;
        let v = y as f64 - cy - ty;
        // Inverse rotation (R^T) then inverse scale.
        let sx = (cos * u - sin * v) / scale + cx;
        let sy = (sin * u + cos * v) / scale + cy;
        (sx, sy)
    })
}

fn elastic_map(h: usize, w: usize, alpha: f64, sigma: f64, seed: u64) -> SourceMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = ((3.0 * sigma).ceil() as usize).min(h.max(w));
    let kernel = warp::gaussian_kernel(sigma, radius);
    let mut field = || {
        let raw = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0f32..=1.0));
        warp::blur_field(&raw, &kernel)
    };
    let fx = field();
    let fy = field();
    SourceMap::from_fn(h, w, |y, x| {
        (
            x as f64 + alpha * f64::from(fx[[y, x]]),
            y as f64 + alpha * f64::from(fy[[y, x]]),
        )
    })
}

/// Piecewise-linear source coordinates along one axis: cell `i` of size
/// `len / steps` is stretched by `steps[i]`; the last cell is pinned to the
/// border.
fn grid_axis(len: usize, steps: &[f64]) -> Vec<f64> {
    let n_steps = steps.len().saturating_sub(1).max(1);
    let step = (len / n_steps).max(1);
    let mut out = vec![0.0; len];
    let mut prev = 0.0;
    for (idx, start) in (0..len).step_by(step).enumerate() {
        let mut end = start + step;
        let cur = if end >= len {
            end = len;
            len as f64
        } else {
            prev + step as f64 * steps[idx.min(steps.len() - 1)]
        };
        let n = end - start;
        for (i, slot) in out[start..end].iter_mut().enumerate() {
            let t = i as f64 / n as f64;
            *slot = prev + (cur - prev) * t;
        }
        prev = cur;
    }
    out
}

fn grid_distortion_map(h: usize, w: usize, x_steps: &[f64], y_steps: &[f64]) -> SourceMap {
    let xs = grid_axis(w, x_steps);
    let ys = grid_axis(h, y_steps);
    SourceMap::from_fn(h, w, |y, x| (xs[x], ys[y]))
}

/// Radial lens distortion `r' = r (1 + k r² + k r⁴)` with focal length equal
/// to the image size and principal point shifted by `(dx, dy)` pixels.
fn optical_distortion_map(h: usize, w: usize, k: f64, dx: f64, dy: f64) -> SourceMap {
    let (fx, fy) = (w as f64, h as f64);
    let (cx, cy) = (w as f64 * 0.5 + dx, h as f64 * 0.5 + dy);
    SourceMap::from_fn(h, w, |y, x| {
        let u = (x as f64 - cx) / fx;
        let v = (y as f64 - cy) / fy;
        let r2 = u * u + v * v;
        let factor = 1.0 + k * r2 + k * r2 * r2;
        (u * factor * fx + cx, v * factor * fy + cy)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use ndarray::s;

    fn sample(h: usize, w: usize) -> FundusSample {
        let image = Array3::from_shape_fn((h, w, 3), |(y, x, c)| ((y * 7 + x * 3 + c * 50) % 256) as u8);
        let mut masks = Array3::<u8>::zeros((4, h, w));
        masks.slice_mut(s![0, h / 4..h / 4 + 3, w / 3..w / 3 + 4]).fill(1);
        masks.slice_mut(s![3, h / 2.., ..w / 2]).fill(1);
        FundusSample {
            image,
            masks,
            sample_id: "s".into(),
            split: Split::Train,
        }
    }

    fn only(name: &str) -> AugmentationConfig {
        let mut c = AugmentationConfig::disabled().with_target_size(32, 32);
        match name {
            "hflip" => c.p_hflip = 1.0,
            "ssr" => c.shift_scale_rotate.p = 1.0,
            _ => unreachable!(),
        }
        c
    }

    #[test]
    fn invalid_probability_rejected() {
        let mut c = AugmentationConfig::default();
        c.color.gamma.p = 1.5;
        let err = build_pipeline(c, 0).unwrap_err();
        assert!(err.to_string().contains("color.gamma.p"));
        let mut c = AugmentationConfig::default();
        c.gaussian_blur.max_kernel = 4;
        assert!(build_pipeline(c, 0).is_err());
    }

    #[test]
    fn same_seed_same_output() {
        let p = build_pipeline(AugmentationConfig::default().with_target_size(48, 48), 7).unwrap();
        let s = sample(60, 50);
        for draw in 0..20 {
            assert_eq!(p.apply_train(&s, draw), p.apply_train(&s, draw));
        }
        let q = build_pipeline(AugmentationConfig::default().with_target_size(48, 48), 8).unwrap();
        let differs = (0..20).any(|d| p.apply_train(&s, d).applied_ops != q.apply_train(&s, d).applied_ops);
        assert!(differs);
    }

    #[test]
    fn disabled_schedule_is_resize_and_normalize() {
        let p = build_pipeline(AugmentationConfig::disabled().with_target_size(40, 40), 3).unwrap();
        let s = sample(80, 80);
        let out = p.apply_train(&s, 5);
        assert_eq!(out.applied_ops, vec![AppliedOp::Resize { height: 40, width: 40 }, AppliedOp::Normalize]);
        assert_eq!(out, p.apply_eval(&s));
    }

    #[test]
    fn forced_hflip_moves_pixel() {
        let p = build_pipeline(only("hflip"), 0).unwrap();
        let mut s = sample(32, 32);
        s.masks.fill(0);
        let (r, c) = (5, 9);
        s.masks[[2, r, c]] = 1;
        let out = p.apply_train(&s, 0);
        assert!(out.applied_ops.contains(&AppliedOp::Hflip));
        assert_eq!(out.masks[[2, r, 31 - c]], 1);
        assert_eq!(out.masks.iter().filter(|&&v| v == 1).count(), 1);
    }

    #[test]
    fn unit_gamma_leaves_image_unchanged() {
        let p = build_pipeline(AugmentationConfig::disabled().with_target_size(16, 16), 0).unwrap();
        let s = sample(16, 16);
        let plain = p.execute(&[AppliedOp::Resize { height: 16, width: 16 }], &s);
        let gamma = p.execute(&[AppliedOp::Resize { height: 16, width: 16 }, AppliedOp::Gamma { gamma: 1.0 }], &s);
        assert_eq!(plain.image, gamma.image);
        assert_eq!(plain.image, s.image.mapv(f32::from).permuted_axes([2, 0, 1]));
    }

    #[test]
    fn zero_masks_stay_zero_and_binary_everywhere() {
        let p = build_pipeline(AugmentationConfig::default().with_target_size(40, 40), 11).unwrap();
        let mut empty = sample(50, 45);
        empty.masks.fill(0);
        let full = sample(50, 45);
        for draw in 0..60 {
            assert!(p.apply_train(&empty, draw).masks.iter().all(|&v| v == 0));
            assert!(p.apply_train(&full, draw).masks.iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn eval_on_target_size_keeps_masks() {
        let p = build_pipeline(AugmentationConfig::default().with_target_size(24, 24), 0).unwrap();
        let s = sample(24, 24);
        let out = p.apply_eval(&s);
        assert_eq!(out.masks, s.masks);
        let expected = (f32::from(s.image[[3, 4, 1]]) / 255.0 - 0.456) / 0.224;
        assert!((out.image[[1, 3, 4]] - expected).abs() < 1e-6);
    }

    #[test]
    fn eval_downscale_keeps_small_block() {
        let p = build_pipeline(AugmentationConfig::default().with_target_size(64, 64), 0).unwrap();
        let mut s = sample(128, 128);
        s.masks.fill(0);
        s.masks.slice_mut(s![1, 41..43, 77..79]).fill(1);
        let out = p.apply_eval(&s);
        let hits: Vec<(usize, usize)> = out
            .masks
            .index_axis(Axis(0), 1)
            .indexed_iter()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(hits, vec![(21, 39)]);
    }

    #[test]
    fn mean_gray_normalizes_to_zero() {
        let p = build_pipeline(AugmentationConfig::default().with_target_size(8, 8), 0).unwrap();
        let mut s = sample(8, 8);
        for (c, m) in [0.485f64, 0.456, 0.406].iter().enumerate() {
            s.image.slice_mut(s![.., .., c]).fill((m * 255.0).round() as u8);
        }
        let out = p.apply_eval(&s);
        assert!(out.image.iter().all(|v| v.abs() < 0.01));
    }

    #[test]
    fn translation_moves_image_and_mask_together() {
        let p = build_pipeline(only("ssr"), 0).unwrap();
        let mut s = sample(32, 32);
        s.image.fill(0);
        s.masks.fill(0);
        s.image.slice_mut(s![10..14, 8..12, ..]).fill(255);
        s.masks.slice_mut(s![0, 10..14, 8..12]).fill(1);
        let plan = vec![
            AppliedOp::Resize { height: 32, width: 32 },
            AppliedOp::ShiftScaleRotate {
                dx: 0.125,
                dy: 0.0625,
                scale: 1.0,
                angle_deg: 0.0,
            },
        ];
        let out = p.execute(&plan, &s);
        let centroid = |plane: ndarray::ArrayView2<f32>| {
            let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
            for ((y, x), &v) in plane.indexed_iter() {
                sy += y as f64 * v as f64;
                sx += x as f64 * v as f64;
                n += v as f64;
            }
            (sy / n, sx / n)
        };
        let img_c = centroid(out.image.index_axis(Axis(0), 0));
        let mask_c = centroid(out.masks.index_axis(Axis(0), 0).mapv(f32::from).view());
        assert!((img_c.0 - 13.5).abs() < 1e-6 && (img_c.1 - 13.5).abs() < 1e-6, "{img_c:?}");
        assert_eq!(img_c, mask_c);
    }

    #[test]
    fn one_of_groups_fire_at_most_one_member() {
        let p = build_pipeline(AugmentationConfig::default().with_target_size(8, 8), 1).unwrap();
        for draw in 0..2000 {
            let plan = p.sample_plan(&mut stream_rng(1, 0, draw));
            let count = |names: &[&str]| plan.iter().filter(|o| names.contains(&o.name())).count();
            assert!(count(&["brightness_contrast", "gamma", "hsv"]) <= 1);
            assert!(count(&["elastic", "grid_distortion", "optical_distortion"]) <= 1);
        }
    }

    #[test]
    fn audit_line_is_json() {
        let p = build_pipeline(AugmentationConfig::default().with_target_size(8, 8), 1).unwrap();
        let out = p.apply_train(&sample(8, 8), 3);
        let v: serde_json::Value = serde_json::from_str(&out.audit_line()).unwrap();
        assert_eq!(v["ops"][0]["op"], "resize");
    }

    #[test]
    fn grid_axis_identity_for_unit_steps() {
        let xs = grid_axis(20, &[1.0; 6]);
        for (i, v) in xs.iter().enumerate() {
            assert!((v - i as f64).abs() < 1e-9, "{i} {v}");
        }
    }
}
