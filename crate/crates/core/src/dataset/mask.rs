use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader};
use ndarray::Array2;

use super::{DatasetError, Result};

/// Masks are binarized with `intensity > threshold`.
pub const DEFAULT_MASK_THRESHOLD: u8 = 127;

/// An H×W mask holding only 0 and 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask(Array2<u8>);

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Array2::zeros((height, width)))
    }

    /// Binarizes arbitrary intensities: nonzero becomes 1.
    pub fn from_nonzero(values: Array2<u8>) -> Self {
        Self(values.mapv(|v| u8::from(v != 0)))
    }

    pub fn height(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn count_foreground(&self) -> usize {
        self.0.iter().filter(|&&v| v != 0).count()
    }

    pub fn as_array(&self) -> &Array2<u8> {
        &self.0
    }

    pub fn into_array(self) -> Array2<u8> {
        self.0
    }
}

pub fn standardize_mask(path: &Path) -> Result<BinaryMask> {
    standardize_mask_with(path, DEFAULT_MASK_THRESHOLD)
}

/// Reads a PNG or TIFF annotation and binarizes it. For color rasters the
/// intensity of a pixel is its largest channel value, so colored strokes
/// survive regardless of hue.
pub fn standardize_mask_with(path: &Path, threshold: u8) -> Result<BinaryMask> {
    let img = decode(path)?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Array2::<u8>::zeros((h, w));
    for (x, y, px) in rgb.enumerate_pixels() {
        let intensity = px.0.iter().copied().max().unwrap_or(0);
        out[[y as usize, x as usize]] = u8::from(intensity > threshold);
    }
    Ok(BinaryMask(out))
}

/// Writes a mask as an 8-bit PNG with foreground 255.
pub fn write_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask.0[[y as usize, x as usize]] != 0 { 255 } else { 0 }])
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| DatasetError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| DatasetError::Encode {
            path: path.to_path_buf(),
            source,
        })
}

pub(crate) fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    reader.decode().map_err(|source| DatasetError::Decode {
        path: path.to_path_buf(),
        source,
    })
}
