//! Discovery, validation and loading of lesion-segmentation datasets laid
//! out like the public DDR release:
//!
//! ```text
//! <root>/<split>/image/<id>.jpg
//! <root>/<split>/label/<CLASS>/<id>.png|tif
//! ```

mod index;
mod mask;
mod sample;
mod synthetic;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use index::{scan_dataset, DatasetIndex, IndexEntry, MaskPaths, SplitLayout};
pub use mask::{standardize_mask, standardize_mask_with, write_mask_png, BinaryMask, DEFAULT_MASK_THRESHOLD};
pub use sample::{class_presence_stats, load_sample, ClassCounts, FundusSample};
pub use synthetic::{synthetic_sample, synthetic_sample_scaled, write_synthetic_dataset};

/// Errors raised while scanning or loading a dataset.
#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read dataset root {path}: {source}")]
    UnreadableRoot {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot decode raster {path}: {source}")]
    Decode {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("cannot encode raster {path}: {source}")]
    Encode {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("size mismatch: image {image} is {image_size:?} but mask {mask} is {mask_size:?}")]
    SizeMismatch {
        image: PathBuf,
        mask: PathBuf,
        image_size: (usize, usize),
        mask_size: (usize, usize),
    },
    #[error("sample id {0:?} appears in more than one split")]
    DuplicateSampleId(String),
    #[error("invalid index file {path}: {reason}")]
    InvalidIndex { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// The four annotated lesion types. The declaration order is the channel
/// order of every mask stack and model output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LesionClass {
    /// Microaneurysm.
    MA,
    /// Hard exudate.
    EX,
    /// Soft exudate.
    SE,
    /// Hemorrhage.
    HE,
}

impl LesionClass {
    pub const ALL: [LesionClass; 4] = [LesionClass::MA, LesionClass::EX, LesionClass::SE, LesionClass::HE];
    pub const COUNT: usize = 4;

    pub fn channel_index(self) -> usize {
        self as usize
    }

    pub fn from_channel(channel: usize) -> Option<Self> {
        Self::ALL.get(channel).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LesionClass::MA => "MA",
            LesionClass::EX => "EX",
            LesionClass::SE => "SE",
            LesionClass::HE => "HE",
        }
    }

    /// Color used when drawing this class over a fundus image.
    pub fn overlay_color(self) -> [u8; 3] {
        match self {
            LesionClass::MA => [255, 0, 0],
            LesionClass::EX => [0, 255, 0],
            LesionClass::SE => [0, 255, 255],
            LesionClass::HE => [0, 0, 255],
        }
    }
}

impl fmt::Display for LesionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LesionClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown lesion class {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}
