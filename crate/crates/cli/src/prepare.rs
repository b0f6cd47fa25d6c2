//! `prepare`: index a dataset tree, rewrite every mask as a 0/255 PNG under
//! `<out>/standardized/<split>/label/<CLASS>/<id>.png`, and count lesion
//! presence. Outputs are only rewritten when their content changes.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::{GrayImage, ImageFormat, Luma};
use lesionseg::dataset::{scan_dataset, standardize_mask, BinaryMask, ClassCounts, DatasetIndex, SplitLayout};
use lesionseg::{LesionClass, Split};
use serde::{Deserialize, Serialize};

use crate::args::PrepareArgs;
use crate::util::{write_if_changed, write_json};

pub const INDEX_FILE: &str = "index.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub images: usize,
    pub split_sizes: BTreeMap<Split, usize>,
    /// Images with at least one foreground pixel, per class.
    pub presence: ClassCounts,
    pub presence_by_split: BTreeMap<Split, ClassCounts>,
    /// Images without an annotation file, per split and class.
    pub absent_masks: BTreeMap<Split, ClassCounts>,
    #[serde(skip)]
    pub files_written: usize,
}

impl PrepareSummary {
    pub fn to_text(&self) -> String {
        let mut s = format!("images: {}\n", self.images);
        for (split, n) in &self.split_sizes {
            s += &format!("  {}: {n}\n", split.name());
        }
        s += "images containing each class:\n";
        for class in LesionClass::ALL {
            s += &format!("  {class}: {}\n", self.presence[class]);
        }
        s += &format!("files written: {}\n", self.files_written);
        s
    }
}

fn png_bytes(mask: &BinaryMask) -> Result<Vec<u8>> {
    let (h, w) = mask.dim();
    let a = mask.as_array();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([a[[y as usize, x as usize]] * 255]));
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn cmd_prepare(args: &PrepareArgs) -> Result<PrepareSummary> {
    prepare(&args.root, &args.out, &SplitLayout::default())
}

pub fn prepare(root: &Path, out: &Path, layout: &SplitLayout) -> Result<PrepareSummary> {
    let root = std::path::absolute(root)?;
    let out = std::path::absolute(out)?;
    let scanned = scan_dataset(&root, layout)?;
    if scanned.is_empty() {
        bail!("no images found under {}", root.display());
    }

    let mut index = DatasetIndex::default();
    let mut presence = [0usize; 4];
    let mut by_split: BTreeMap<Split, [usize; 4]> = BTreeMap::new();
    let mut absent: BTreeMap<Split, [usize; 4]> = BTreeMap::new();
    let mut written = 0;
    for entry in &scanned.entries {
        let (iw, ih) = image::image_dimensions(&entry.image_path)
            .with_context(|| format!("reading image {}", entry.image_path.display()))?;
        let mut standardized = entry.clone();
        for class in LesionClass::ALL {
            let c = class.channel_index();
            let Some(src) = entry.masks.get(class) else {
                absent.entry(entry.split).or_default()[c] += 1;
                continue;
            };
            let mask = standardize_mask(src)?;
            if mask.dim() != (ih as usize, iw as usize) {
                bail!(
                    "mask {} is {}x{} but image {} is {iw}x{ih}",
                    src.display(),
                    mask.width(),
                    mask.height(),
                    entry.image_path.display()
                );
            }
            if mask.count_foreground() > 0 {
                presence[c] += 1;
                by_split.entry(entry.split).or_default()[c] += 1;
            }
            let dst: PathBuf = out
                .join("standardized")
                .join(entry.split.name())
                .join("label")
                .join(class.name())
                .join(format!("{}.png", entry.sample_id));
            written += usize::from(write_if_changed(&dst, &png_bytes(&mask)?)?);
            standardized.masks.set(class, Some(dst));
        }
        index.entries.push(standardized);
    }
    for (split, counts) in &absent {
        log::info!(
            "{}: absent annotations MA {} EX {} SE {} HE {} (treated as empty)",
            split.name(),
            counts[0],
            counts[1],
            counts[2],
            counts[3]
        );
    }

    let split_sizes = index.split_sizes();
    let to_counts = |m: BTreeMap<Split, [usize; 4]>| -> BTreeMap<Split, ClassCounts> {
        split_sizes
            .keys()
            .map(|s| (*s, ClassCounts::from_array(m.get(s).copied().unwrap_or_default())))
            .collect()
    };
    let mut summary = PrepareSummary {
        images: index.len(),
        presence: ClassCounts::from_array(presence),
        presence_by_split: to_counts(by_split),
        absent_masks: to_counts(absent),
        split_sizes,
        files_written: 0,
    };
    written += usize::from(write_json(&out.join(INDEX_FILE), &index)?);
    written += usize::from(write_json(&out.join(SUMMARY_FILE), &summary)?);
    summary.files_written = written;
    Ok(summary)
}
