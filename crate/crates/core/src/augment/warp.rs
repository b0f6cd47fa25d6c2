//! Geometric resampling shared by the augmentation ops. Images are H×W×3
//! `f32` in [0, 255]; masks are K×H×W `u8`. Every warp is expressed as a
//! source coordinate per destination pixel so that image and masks are
//! moved by the same field.

use ndarray::{Array2, Array3, Axis};

/// OpenCV's `BORDER_REFLECT_101`: `gfedcb|abcdefgh|gfedcba`.
pub(crate) fn reflect101(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as i64;
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Source coordinates `(x, y)` for every destination pixel, row-major.
pub(crate) struct SourceMap {
    pub height: usize,
    pub width: usize,
    pub xs: Vec<f32>,
    pub ys: Vec<f32>,
}

impl SourceMap {
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> Self {
        let mut xs = Vec::with_capacity(height * width);
        let mut ys = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (sx, sy) = f(y, x);
                xs.push(sx as f32);
                ys.push(sy as f32);
            }
        }
        Self { height, width, xs, ys }
    }
}

pub(crate) fn remap_image(img: &Array3<f32>, map: &SourceMap) -> Array3<f32> {
    let (h, w, c) = img.dim();
    let src = img.as_slice().expect("standard layout");
    let mut out = Array3::<f32>::zeros((map.height, map.width, c));
    let dst = out.as_slice_mut().expect("standard layout");
    for (i, (&sx, &sy)) in map.xs.iter().zip(&map.ys).enumerate() {
        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = sx - x0;
        let fy = sy - y0;
        let xa = reflect101(x0 as i64, w);
        let xb = reflect101(x0 as i64 + 1, w);
        let ya = reflect101(y0 as i64, h);
        let yb = reflect101(y0 as i64 + 1, h);
        for ch in 0..c {
            let p = |y: usize, x: usize| src[(y * w + x) * c + ch];
            let top = p(ya, xa) * (1.0 - fx) + p(ya, xb) * fx;
            let bottom = p(yb, xa) * (1.0 - fx) + p(yb, xb) * fx;
            dst[i * c + ch] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

pub(crate) fn remap_masks(masks: &Array3<u8>, map: &SourceMap) -> Array3<u8> {
    let (k, h, w) = masks.dim();
    let mut out = Array3::<u8>::zeros((k, map.height, map.width));
    for (i, (&sx, &sy)) in map.xs.iter().zip(&map.ys).enumerate() {
        let x = reflect101(sx.round() as i64, w);
        let y = reflect101(sy.round() as i64, h);
        let (oy, ox) = (i / map.width, i % map.width);
        for ch in 0..k {
            out[[ch, oy, ox]] = masks[[ch, y, x]];
        }
    }
    out
}

/// Bilinear resize with half-pixel centers and clamped borders.
pub(crate) fn resize_image(img: &Array3<f32>, height: usize, width: usize) -> Array3<f32> {
    let (h, w, _) = img.dim();
    if (h, w) == (height, width) {
        return img.clone();
    }
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let map = SourceMap::from_fn(height, width, |y, x| {
        (
            ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64),
            ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64),
        )
    });
    remap_image(img, &map)
}

/// Nearest-neighbour resize: destination pixel `d` reads source
/// `floor(d · in / out)`.
pub(crate) fn resize_masks(masks: &Array3<u8>, height: usize, width: usize) -> Array3<u8> {
    let (k, h, w) = masks.dim();
    if (h, w) == (height, width) {
        return masks.clone();
    }
    let mut out = Array3::<u8>::zeros((k, height, width));
    for y in 0..height {
        let src_y = ((y * h) / height).min(h - 1);
        for x in 0..width {
            let src_x = ((x * w) / width).min(w - 1);
            for ch in 0..k {
                out[[ch, y, x]] = masks[[ch, src_y, src_x]];
            }
        }
    }
    out
}

pub(crate) fn hflip_image(img: &mut Array3<f32>) {
    img.invert_axis(Axis(1));
    *img = img.as_standard_layout().into_owned();
}

pub(crate) fn hflip_masks(masks: &mut Array3<u8>) {
    masks.invert_axis(Axis(2));
    *masks = masks.as_standard_layout().into_owned();
}

pub(crate) fn vflip_image(img: &mut Array3<f32>) {
    img.invert_axis(Axis(0));
    *img = img.as_standard_layout().into_owned();
}

pub(crate) fn vflip_masks(masks: &mut Array3<u8>) {
    masks.invert_axis(Axis(1));
    *masks = masks.as_standard_layout().into_owned();
}

/// Rotates by `k` quarter turns counter-clockwise.
pub(crate) fn rot90_image(img: &Array3<f32>, k: u8) -> Array3<f32> {
    let mut out = img.clone();
    for _ in 0..k % 4 {
        // (y, x) -> (w - 1 - x, y)
        let mut v = out.view();
        v.swap_axes(0, 1);
        let mut v = v.to_owned();
        v.invert_axis(Axis(0));
        out = v.as_standard_layout().into_owned();
    }
    out
}

pub(crate) fn rot90_masks(masks: &Array3<u8>, k: u8) -> Array3<u8> {
    let mut out = masks.clone();
    for _ in 0..k % 4 {
        let mut v = out.view();
        v.swap_axes(1, 2);
        let mut v = v.to_owned();
        v.invert_axis(Axis(1));
        out = v.as_standard_layout().into_owned();
    }
    out
}

/// Normalized 1-D Gaussian taps for `sigma`, truncated at `radius`.
pub(crate) fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f32> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable filtering of a single-channel field with reflect-101 borders.
pub(crate) fn blur_field(field: &Array2<f32>, kernel: &[f32]) -> Array2<f32> {
    let (h, w) = field.dim();
    let r = (kernel.len() / 2) as i64;
    let src = field.as_slice().expect("standard layout");
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0f32;
            for (t, &kv) in kernel.iter().enumerate() {
                acc += kv * row[reflect101(x as i64 + t as i64 - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    let dst = out.as_slice_mut().expect("standard layout");
    for y in 0..h {
        for (t, &kv) in kernel.iter().enumerate() {
            let sy = reflect101(y as i64 + t as i64 - r, h);
            let src_row = &tmp[sy * w..(sy + 1) * w];
            let dst_row = &mut dst[y * w..(y + 1) * w];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += kv * s;
            }
        }
    }
    out
}

/// Blurs each channel of an H×W×C image.
pub(crate) fn blur_image(img: &Array3<f32>, kernel: &[f32]) -> Array3<f32> {
    let (h, w, c) = img.dim();
    let mut out = Array3::<f32>::zeros((h, w, c));
    for ch in 0..c {
        let plane = img.index_axis(Axis(2), ch).to_owned();
        let blurred = blur_field(&plane, kernel);
        out.index_axis_mut(Axis(2), ch).assign(&blurred);
    }
    out
}
