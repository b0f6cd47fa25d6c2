use std::ops::Index;

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use super::mask::{decode, standardize_mask};
use super::{DatasetError, DatasetIndex, IndexEntry, LesionClass, Result, Split};

/// One fundus photograph with its stacked lesion masks.
#[derive(Clone, Debug, PartialEq)]
pub struct FundusSample {
    /// H×W×3, RGB, 8 bits per channel.
    pub image: Array3<u8>,
    /// 4×H×W with values in {0, 1}; channel `c` is `LesionClass::from_channel(c)`.
    pub masks: Array3<u8>,
    pub sample_id: String,
    pub split: Split,
}

impl FundusSample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn has_lesion(&self, class: LesionClass) -> bool {
        self.masks
            .slice(s![class.channel_index(), .., ..])
            .iter()
            .any(|&v| v != 0)
    }
}

/// Decodes the image as RGB and stacks the four standardized masks in
/// channel order, materializing absent masks as zeros.
pub fn load_sample(entry: &IndexEntry) -> Result<FundusSample> {
    let rgb = decode(&entry.image_path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let image = Array3::from_shape_vec((h, w, 3), rgb.into_raw()).expect("rgb buffer is h*w*3");

    let mut masks = Array3::<u8>::zeros((LesionClass::COUNT, h, w));
    for class in LesionClass::ALL {
        let Some(path) = entry.masks.get(class) else {
            continue;
        };
        let mask = standardize_mask(path)?;
        if mask.dim() != (h, w) {
            return Err(DatasetError::SizeMismatch {
                image: entry.image_path.clone(),
                mask: path.to_path_buf(),
                image_size: (h, w),
                mask_size: mask.dim(),
            });
        }
        masks
            .slice_mut(s![class.channel_index(), .., ..])
            .assign(mask.as_array());
    }
    Ok(FundusSample {
        image,
        masks,
        sample_id: entry.sample_id.clone(),
        split: entry.split,
    })
}

/// Number of images containing each lesion class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    #[serde(rename = "MA")]
    pub ma: usize,
    #[serde(rename = "EX")]
    pub ex: usize,
    #[serde(rename = "SE")]
    pub se: usize,
    #[serde(rename = "HE")]
    pub he: usize,
}

impl ClassCounts {
    pub fn from_array(counts: [usize; 4]) -> Self {
        Self {
            ma: counts[0],
            ex: counts[1],
            se: counts[2],
            he: counts[3],
        }
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.ma, self.ex, self.se, self.he]
    }
}

impl Index<LesionClass> for ClassCounts {
    type Output = usize;

    fn index(&self, class: LesionClass) -> &usize {
        match class {
            LesionClass::MA => &self.ma,
            LesionClass::EX => &self.ex,
            LesionClass::SE => &self.se,
            LesionClass::HE => &self.he,
        }
    }
}

/// Counts, per class, the images whose mask has at least one foreground
/// pixel. Only mask files are read.
pub fn class_presence_stats(index: &DatasetIndex) -> Result<ClassCounts> {
    let mut counts = [0usize; 4];
    for entry in &index.entries {
        for class in LesionClass::ALL {
            if let Some(path) = entry.masks.get(class) {
                if standardize_mask(path)?.count_foreground() > 0 {
                    counts[class.channel_index()] += 1;
                }
            }
        }
    }
    Ok(ClassCounts::from_array(counts))
}
