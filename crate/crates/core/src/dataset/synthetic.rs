//! Procedural fundus-like images with known lesion masks, for tests and
//! smoke runs.

use std::path::Path;

use image::RgbImage;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_mask_png, BinaryMask, DatasetError, FundusSample, LesionClass, Result, Split};

/// Lesion colour and radius range per class.
const STYLE: [([u8; 3], (f64, f64)); 4] = [
    ([110, 20, 15], (1.0, 2.0)),
    ([235, 215, 90], (2.0, 4.0)),
    ([230, 225, 200], (3.5, 6.0)),
    ([90, 10, 10], (3.0, 5.0)),
];

/// An `h`×`w` sample with a reddish disc background and up to three
/// non-overlapping blobs per class. Each class is absent with probability
/// 0.25.
pub fn synthetic_sample(sample_id: &str, split: Split, height: usize, width: usize, seed: u64) -> FundusSample {
    synthetic_sample_scaled(sample_id, split, height, width, seed, 1.0)
}

/// [`synthetic_sample`] with every lesion radius multiplied by `lesion_scale`.
pub fn synthetic_sample_scaled(
    sample_id: &str,
    split: Split,
    height: usize,
    width: usize,
    seed: u64,
    lesion_scale: f64,
) -> FundusSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = Array3::<u8>::zeros((height, width, 3));
    let (cy, cx) = (height as f64 / 2.0, width as f64 / 2.0);
    let radius = 0.48 * height.min(width) as f64;
    for y in 0..height {
        for x in 0..width {
            let r = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            if r <= radius {
                let shade = 1.0 - 0.4 * r / radius;
                let jitter: f64 = rng.random_range(-6.0..6.0);
                image[[y, x, 0]] = (190.0 * shade + jitter).clamp(0.0, 255.0) as u8;
                image[[y, x, 1]] = (80.0 * shade + jitter).clamp(0.0, 255.0) as u8;
                image[[y, x, 2]] = (40.0 * shade + jitter).clamp(0.0, 255.0) as u8;
            }
        }
    }
    let mut masks = Array3::<u8>::zeros((LesionClass::COUNT, height, width));
    for (c, (color, (rmin, rmax))) in STYLE.iter().enumerate() {
        if rng.random_bool(0.25) {
            continue;
        }
        for _ in 0..rng.random_range(1..=3) {
            let r: f64 = rng.random_range(*rmin..=*rmax) * lesion_scale;
            // A few attempts at a spot that does not touch an earlier blob.
            for _ in 0..20 {
                let by = rng.random_range(cy - 0.6 * radius..cy + 0.6 * radius);
                let bx = rng.random_range(cx - 0.6 * radius..cx + 0.6 * radius);
                let pixels: Vec<(usize, usize)> = (0..height)
                    .flat_map(|y| (0..width).map(move |x| (y, x)))
                    .filter(|&(y, x)| (y as f64 - by).powi(2) + (x as f64 - bx).powi(2) <= (r + 1.0).powi(2))
                    .collect();
                if pixels.iter().any(|&(y, x)| (0..LesionClass::COUNT).any(|k| masks[[k, y, x]] != 0)) {
                    continue;
                }
                for (y, x) in pixels {
                    if (y as f64 - by).powi(2) + (x as f64 - bx).powi(2) <= r * r {
                        masks[[c, y, x]] = 1;
                        image[[y, x, 0]] = color[0];
                        image[[y, x, 1]] = color[1];
                        image[[y, x, 2]] = color[2];
                    }
                }
                break;
            }
        }
    }
    FundusSample {
        image,
        masks,
        sample_id: sample_id.to_string(),
        split,
    }
}

/// Writes `counts[split]` synthetic samples per split under `root` in the
/// standard layout. Sample ids are `<split>_<nnn>`. Empty masks are not
/// written, so absent annotations are exercised too.
pub fn write_synthetic_dataset(
    root: &Path,
    counts: &[(Split, usize)],
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<FundusSample>> {
    let mut out = Vec::new();
    for &(split, n) in counts {
        let split_dir = root.join(split.name());
        let image_dir = split_dir.join("image");
        std::fs::create_dir_all(&image_dir).map_err(|source| DatasetError::Io {
            path: image_dir.clone(),
            source,
        })?;
        for i in 0..n {
            let id = format!("{}_{i:03}", split.name());
            let sample_seed = seed ^ ((split as u64) << 32) ^ i as u64;
            let sample = synthetic_sample(&id, split, height, width, sample_seed);
            let path = image_dir.join(format!("{id}.png"));
            let (h, w, _) = sample.image.dim();
            let rgb = RgbImage::from_raw(w as u32, h as u32, sample.image.iter().copied().collect())
                .expect("buffer is h*w*3");
            rgb.save(&path)
                .map_err(|source| DatasetError::Encode { path: path.clone(), source })?;
            for class in LesionClass::ALL {
                let plane: Array2<u8> = sample.masks.index_axis(ndarray::Axis(0), class.channel_index()).to_owned();
                if plane.iter().all(|&v| v == 0) {
                    continue;
                }
                let mask_path = split_dir.join("label").join(class.name()).join(format!("{id}.png"));
                write_mask_png(&BinaryMask::from_nonzero(plane), &mask_path)?;
            }
            out.push(sample);
        }
    }
    Ok(out)
}
