use std::path::Path;

use anyhow::{Context, Result};
use lesionseg::augment::{build_pipeline, AugmentedSample, Pipeline};
use lesionseg::model::{resize_bilinear, SegmentationModel};
use lesionseg::tensor::{stack_images, unstack, Cpu, CpuDevice};
use lesionseg::trainer::{load_model, CheckpointState};
use lesionseg::{FundusSample, Split};
use ndarray::Array3;

/// A checkpointed model with the eval transform it was trained with.
pub struct Predictor {
    pub model: SegmentationModel<Cpu>,
    pub pipeline: Pipeline,
    pub state: CheckpointState,
    device: CpuDevice,
}

impl Predictor {
    pub fn load(checkpoint: &Path, device: &CpuDevice) -> Result<Self> {
        let (model, state) = load_model::<Cpu>(checkpoint, None, device)
            .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
        let pipeline = build_pipeline(state.config.augment.clone(), state.config.train.seed)?;
        Ok(Self {
            model,
            pipeline,
            state,
            device: device.clone(),
        })
    }

    /// Probabilities `[K, H, W]` at model resolution for already
    /// transformed samples.
    pub fn probabilities(&self, batch: &[AugmentedSample]) -> Result<Vec<Array3<f32>>> {
        let views: Vec<_> = batch.iter().map(|s| s.image.view()).collect();
        let x = stack_images::<Cpu>(&views, &self.device);
        Ok(unstack(self.model.forward(x)?))
    }

    /// Probabilities for a raw RGB image, resized back to its own size.
    pub fn predict_image(&self, id: &str, image: Array3<u8>) -> Result<Array3<f32>> {
        let (h, w, _) = image.dim();
        let sample = FundusSample {
            image,
            masks: Array3::zeros((lesionseg::LesionClass::COUNT, h, w)),
            sample_id: id.to_string(),
            split: Split::Test,
        };
        let eval = self.pipeline.apply_eval(&sample);
        let views = [eval.image.view()];
        let probs = self.model.forward(stack_images::<Cpu>(&views, &self.device))?;
        let [_, _, mh, mw] = probs.dims();
        let probs = if (mh, mw) == (h, w) {
            probs
        } else {
            resize_bilinear(probs, h, w).clamp(0.0, 1.0)
        };
        Ok(unstack(probs).remove(0))
    }
}

/// Reads any supported raster as `H×W×3` RGB.
pub fn read_rgb(path: &Path) -> Result<Array3<u8>> {
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .with_context(|| format!("decoding {}", path.display()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())?)
}

/// `p > tau` per pixel of one class plane.
pub fn threshold(probs: &Array3<f32>, tau: f64) -> Array3<u8> {
    probs.mapv(|p| u8::from(f64::from(p) > tau))
}
