//! `overlay`: alpha-blend class colours over a fundus image in the order
//! MA, EX, SE, HE, so later classes cover earlier ones. Several sources are
//! drawn as panels left to right.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Result};
use image::RgbImage;
use lesionseg::dataset::standardize_mask;
use lesionseg::tensor::CpuDevice;
use lesionseg::trainer::STATE_FILE;
use lesionseg::LesionClass;
use ndarray::{s, Array3};

use crate::args::OverlayArgs;
use crate::inference::{read_rgb, threshold, Predictor};
use crate::predict::mask_file;
use crate::util::file_stem;

#[derive(Clone, Debug, PartialEq)]
pub struct OverlaySpec {
    /// Colour per class in channel order.
    pub colors: [[u8; 3]; 4],
    pub alpha: f64,
}

impl Default for OverlaySpec {
    fn default() -> Self {
        Self {
            colors: LesionClass::ALL.map(LesionClass::overlay_color),
            alpha: 0.5,
        }
    }
}

/// `image` is H×W×3, `masks` K×H×W.
pub fn blend(image: &Array3<u8>, masks: &Array3<u8>, spec: &OverlaySpec) -> Result<Array3<u8>> {
    let (h, w, _) = image.dim();
    let (k, mh, mw) = masks.dim();
    ensure!((mh, mw) == (h, w), "mask size {mw}x{mh} does not match image size {w}x{h}");
    ensure!(k == spec.colors.len(), "expected {} mask channels, got {k}", spec.colors.len());
    ensure!((0.0..=1.0).contains(&spec.alpha), "alpha must lie in [0, 1], got {}", spec.alpha);
    let mut out = image.clone();
    for class in LesionClass::ALL {
        let c = class.channel_index();
        let color = spec.colors[c];
        for y in 0..h {
            for x in 0..w {
                if masks[[c, y, x]] == 0 {
                    continue;
                }
                for ch in 0..3 {
                    let v = f64::from(out[[y, x, ch]]);
                    out[[y, x, ch]] = ((1.0 - spec.alpha) * v + spec.alpha * f64::from(color[ch])).round() as u8;
                }
            }
        }
    }
    Ok(out)
}

fn find_mask(dir: &Path, id: &str, class: LesionClass) -> Option<PathBuf> {
    let mut candidates = vec![dir.join(mask_file(id, class))];
    for sub in [dir.join(class.name()), dir.join("label").join(class.name())] {
        for ext in ["png", "tif", "tiff"] {
            candidates.push(sub.join(format!("{id}.{ext}")));
        }
    }
    candidates.into_iter().find(|p| p.is_file())
}

/// Masks for `image_path` from a prediction directory, a label tree, or a
/// checkpoint (predicted on the fly). Missing class files are empty masks.
pub fn load_masks(source: &Path, image_path: &Path, image: &Array3<u8>, device: &CpuDevice) -> Result<Array3<u8>> {
    let (h, w, _) = image.dim();
    let id = file_stem(image_path);
    if source.join(STATE_FILE).is_file() {
        let predictor = Predictor::load(source, device)?;
        let probs = predictor.predict_image(&id, image.clone())?;
        return Ok(threshold(&probs, predictor.state.config.metrics.tau));
    }
    if !source.is_dir() {
        bail!("overlay source {} is neither a mask directory nor a checkpoint", source.display());
    }
    let mut masks = Array3::<u8>::zeros((LesionClass::COUNT, h, w));
    for class in LesionClass::ALL {
        if let Some(path) = find_mask(source, &id, class) {
            let m = standardize_mask(&path)?;
            ensure!(
                m.dim() == (h, w),
                "mask {} is {}x{} but image is {w}x{h}",
                path.display(),
                m.width(),
                m.height()
            );
            masks.slice_mut(s![class.channel_index(), .., ..]).assign(m.as_array());
        }
    }
    Ok(masks)
}

pub fn to_rgb_image(a: &Array3<u8>) -> RgbImage {
    let (h, w, _) = a.dim();
    RgbImage::from_raw(w as u32, h as u32, a.iter().copied().collect()).expect("h*w*3 buffer")
}

pub fn cmd_overlay(args: &OverlayArgs, device: &CpuDevice) -> Result<PathBuf> {
    let image = read_rgb(&args.image)?;
    let spec = OverlaySpec {
        alpha: args.alpha,
        ..OverlaySpec::default()
    };
    let panels = args
        .source
        .iter()
        .map(|src| blend(&image, &load_masks(src, &args.image, &image, device)?, &spec))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = panels.iter().map(|p| p.view()).collect();
    let composite = ndarray::concatenate(ndarray::Axis(1), &views)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    to_rgb_image(&composite).save_with_format(&args.out, image::ImageFormat::Png)?;
    Ok(args.out.clone())
}
