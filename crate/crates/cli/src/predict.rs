//! `predict`: for each image writes `<id>_<CLASS>_prob.png` (16-bit,
//! `round(p · 65535)`) and `<id>_<CLASS>_mask.png` (0/255) at the image's
//! own resolution. A failing image is reported and skipped.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use image::{GrayImage, ImageBuffer, ImageFormat, Luma};
use lesionseg::tensor::CpuDevice;
use lesionseg::LesionClass;
use ndarray::Array3;
use serde::Serialize;

use crate::args::PredictArgs;
use crate::inference::{read_rgb, threshold, Predictor};
use crate::util::{file_stem, list_images, write_if_changed, write_json};

pub struct PredictOutcome {
    pub written: Vec<PathBuf>,
    pub failures: Vec<(PathBuf, String)>,
}

pub fn prob_file(id: &str, class: LesionClass) -> String {
    format!("{id}_{class}_prob.png")
}

pub fn mask_file(id: &str, class: LesionClass) -> String {
    format!("{id}_{class}_mask.png")
}

fn encode(img: impl FnOnce(&mut Cursor<Vec<u8>>) -> image::ImageResult<()>) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img(&mut buf)?;
    Ok(buf.into_inner())
}

/// 16-bit PNG of one probability plane.
pub fn prob_png(plane: ndarray::ArrayView2<f32>) -> Result<Vec<u8>> {
    let (h, w) = plane.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = plane[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(f64::from(p) * 65535.0).round() as u16])
    });
    encode(|b| img.write_to(b, ImageFormat::Png))
}

pub fn mask_png(plane: ndarray::ArrayView2<u8>) -> Result<Vec<u8>> {
    let (h, w) = plane.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([plane[[y as usize, x as usize]] * 255]));
    encode(|b| img.write_to(b, ImageFormat::Png))
}

/// Writes the eight files for one image.
pub fn write_prediction(out: &Path, id: &str, probs: &Array3<f32>, tau: f64) -> Result<Vec<PathBuf>> {
    let masks = threshold(probs, tau);
    let mut paths = Vec::new();
    for class in LesionClass::ALL {
        let c = class.channel_index();
        let prob = out.join(prob_file(id, class));
        write_if_changed(&prob, &prob_png(probs.index_axis(ndarray::Axis(0), c))?)?;
        let mask = out.join(mask_file(id, class));
        write_if_changed(&mask, &mask_png(masks.index_axis(ndarray::Axis(0), c))?)?;
        paths.extend([prob, mask]);
    }
    Ok(paths)
}

#[derive(Serialize)]
struct Invocation<'a> {
    command: &'static str,
    args: &'a PredictArgs,
    tau: f64,
}

pub fn cmd_predict(args: &PredictArgs, device: &CpuDevice) -> Result<PredictOutcome> {
    let predictor = Predictor::load(&args.checkpoint, device)?;
    let tau = args.tau.unwrap_or(predictor.state.config.metrics.tau);
    anyhow::ensure!(tau > 0.0 && tau < 1.0, "--tau must lie in (0, 1), got {tau}");
    let inputs = list_images(&args.input)?;
    anyhow::ensure!(!inputs.is_empty(), "no images found at {}", args.input.display());
    write_json(
        &args.out.join("invocation.json"),
        &Invocation {
            command: "predict",
            args,
            tau,
        },
    )?;

    let mut outcome = PredictOutcome {
        written: Vec::new(),
        failures: Vec::new(),
    };
    for path in inputs {
        let id = file_stem(&path);
        let result = read_rgb(&path)
            .and_then(|rgb| predictor.predict_image(&id, rgb))
            .and_then(|probs| write_prediction(&args.out, &id, &probs, tau))
            .with_context(|| format!("predicting {}", path.display()));
        match result {
            Ok(paths) => outcome.written.extend(paths),
            Err(e) => {
                log::error!("{e:#}");
                outcome.failures.push((path, format!("{e:#}")));
            }
        }
    }
    Ok(outcome)
}
