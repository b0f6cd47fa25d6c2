//! Photometric ops on H×W×3 `f32` images in [0, 255]. Masks are never
//! touched here.

use ndarray::{Array3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn clamp_pixel(v: f32) -> f32 {
    v.clamp(0.0, 255.0)
}

/// `img · contrast + brightness · 255`.
pub(crate) fn brightness_contrast(img: &mut Array3<f32>, brightness: f64, contrast: f64) {
    let (b, c) = ((brightness * 255.0) as f32, contrast as f32);
    img.mapv_inplace(|v| clamp_pixel(v * c + b));
}

/// `255 · (img / 255)^gamma`.
pub(crate) fn gamma(img: &mut Array3<f32>, gamma: f64) {
    if gamma == 1.0 {
        return;
    }
    let g = gamma as f32;
    img.mapv_inplace(|v| 255.0 * (v / 255.0).max(0.0).powf(g));
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Shifts hue by `hue_deg` degrees and adds `saturation` / `value` (as
/// fractions of full scale) to S and V.
pub(crate) fn hsv_shift(img: &mut Array3<f32>, hue_deg: f64, saturation: f64, value: f64) {
    let (h, w, _) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (img[[y, x, 0]] / 255.0, img[[y, x, 1]] / 255.0, img[[y, x, 2]] / 255.0);
            let (hh, ss, vv) = rgb_to_hsv(r, g, b);
            let (r, g, b) = hsv_to_rgb(
                hh + hue_deg as f32,
                (ss + saturation as f32).clamp(0.0, 1.0),
                (vv + value as f32).clamp(0.0, 1.0),
            );
            img[[y, x, 0]] = clamp_pixel(r * 255.0);
            img[[y, x, 1]] = clamp_pixel(g * 255.0);
            img[[y, x, 2]] = clamp_pixel(b * 255.0);
        }
    }
}

/// Adds zero-mean Gaussian noise with the given variance (in squared 8-bit
/// intensity units) drawn from a stream seeded by `seed`.
pub(crate) fn gaussian_noise(img: &mut Array3<f32>, variance: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, variance.sqrt() as f32).expect("finite std");
    Zip::from(img).for_each(|v| *v = clamp_pixel(*v + normal.sample(&mut rng)));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_roundtrip() {
        for (r, g, b) in [(0.2, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_hsv_shift_is_identity() {
        let mut img = Array3::from_shape_fn((3, 3, 3), |(y, x, c)| (y * 70 + x * 20 + c * 5) as f32);
        let orig = img.clone();
        hsv_shift(&mut img, 0.0, 0.0, 0.0);
        assert!(img.iter().zip(orig.iter()).all(|(a, b)| (a - b).abs() < 1e-3));
    }

    #[test]
    fn unit_gamma_is_identity() {
        let mut img = Array3::from_shape_fn((4, 4, 3), |(y, x, c)| (y * 60 + x * 3 + c) as f32);
        let orig = img.clone();
        gamma(&mut img, 1.0);
        assert_eq!(img, orig);
    }

    #[test]
    fn hue_rotation_of_red() {
        let mut img = Array3::<f32>::zeros((1, 1, 3));
        img[[0, 0, 0]] = 255.0;
        hsv_shift(&mut img, 120.0, 0.0, 0.0);
        assert!((img[[0, 0, 1]] - 255.0).abs() < 1e-3);
        assert!(img[[0, 0, 0]].abs() < 1e-3);
    }
}
