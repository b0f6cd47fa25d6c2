use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetError, LesionClass, Result, Split};

const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png", "tif", "tiff"];
const MASK_EXTENSIONS: &[&str] = &["png", "tif", "tiff"];

/// Directory names used under the dataset root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitLayout {
    /// Candidate directory names per split; the first one that exists wins.
    pub train_dirs: Vec<String>,
    pub val_dirs: Vec<String>,
    pub test_dirs: Vec<String>,
    pub image_dir: String,
    pub label_dir: String,
}

impl Default for SplitLayout {
    fn default() -> Self {
        Self {
            train_dirs: vec!["train".into()],
            val_dirs: vec!["val".into(), "valid".into()],
            test_dirs: vec!["test".into()],
            image_dir: "image".into(),
            label_dir: "label".into(),
        }
    }
}

impl SplitLayout {
    fn candidates(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train_dirs,
            Split::Val => &self.val_dirs,
            Split::Test => &self.test_dirs,
        }
    }
}

/// Per-class mask references; `None` records an absent annotation, which is
/// materialized as an all-zero mask at load time.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPaths {
    #[serde(rename = "MA")]
    pub ma: Option<PathBuf>,
    #[serde(rename = "EX")]
    pub ex: Option<PathBuf>,
    #[serde(rename = "SE")]
    pub se: Option<PathBuf>,
    #[serde(rename = "HE")]
    pub he: Option<PathBuf>,
}

impl MaskPaths {
    pub fn get(&self, class: LesionClass) -> Option<&Path> {
        match class {
            LesionClass::MA => self.ma.as_deref(),
            LesionClass::EX => self.ex.as_deref(),
            LesionClass::SE => self.se.as_deref(),
            LesionClass::HE => self.he.as_deref(),
        }
    }

    pub fn set(&mut self, class: LesionClass, path: Option<PathBuf>) {
        let slot = match class {
            LesionClass::MA => &mut self.ma,
            LesionClass::EX => &mut self.ex,
            LesionClass::SE => &mut self.se,
            LesionClass::HE => &mut self.he,
        };
        *slot = path;
    }

    pub fn present_count(&self) -> usize {
        LesionClass::ALL.iter().filter(|c| self.get(**c).is_some()).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub sample_id: String,
    pub split: Split,
    pub image_path: PathBuf,
    pub masks: MaskPaths,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn split_sizes(&self) -> BTreeMap<Split, usize> {
        let mut sizes: BTreeMap<Split, usize> = Split::ALL.iter().map(|s| (*s, 0)).collect();
        for e in &self.entries {
            *sizes.entry(e.split).or_default() += 1;
        }
        sizes
    }

    /// Copy of this index restricted to one split.
    pub fn subset(&self, split: Split) -> DatasetIndex {
        DatasetIndex {
            entries: self.split(split).cloned().collect(),
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("index serializes");
        fs::write(path, text).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| DatasetError::InvalidIndex {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Indexes every image under `root` following `layout`. Missing split
/// directories are treated as empty; missing class masks are recorded as
/// absent. Entries are sorted by split then sample id.
pub fn scan_dataset(root: &Path, layout: &SplitLayout) -> Result<DatasetIndex> {
    fs::read_dir(root).map_err(|source| DatasetError::UnreadableRoot {
        path: root.to_path_buf(),
        source,
    })?;

    let mut entries = Vec::new();
    let mut seen: HashMap<String, Split> = HashMap::new();
    for split in Split::ALL {
        let Some(split_dir) = layout
            .candidates(split)
            .iter()
            .map(|d| root.join(d))
            .find(|p| p.is_dir())
        else {
            continue;
        };
        let images = list_files(&split_dir.join(&layout.image_dir), IMAGE_EXTENSIONS)?;
        let label_root = split_dir.join(&layout.label_dir);
        let class_files: Vec<BTreeMap<String, PathBuf>> = LesionClass::ALL
            .iter()
            .map(|c| list_files(&label_root.join(c.name()), MASK_EXTENSIONS))
            .collect::<Result<_>>()?;

        let mut absent = [0usize; LesionClass::COUNT];
        for (id, image_path) in images {
            if seen.insert(id.clone(), split).is_some() {
                return Err(DatasetError::DuplicateSampleId(id));
            }
            let mut masks = MaskPaths::default();
            for class in LesionClass::ALL {
                let found = class_files[class.channel_index()].get(&id).cloned();
                if found.is_none() {
                    absent[class.channel_index()] += 1;
                }
                masks.set(class, found);
            }
            if masks.present_count() == 0 {
                log::warn!("{split}/{id}: no lesion masks found, indexing with all classes absent");
            }
            entries.push(IndexEntry {
                sample_id: id,
                split,
                image_path,
                masks,
            });
        }
        if absent.iter().any(|&n| n > 0) {
            log::info!(
                "{split}: absent masks MA={} EX={} SE={} HE={} (materialized as zeros)",
                absent[0],
                absent[1],
                absent[2],
                absent[3]
            );
        }
    }
    Ok(DatasetIndex { entries })
}

/// Files in `dir` with one of `extensions`, keyed by file stem. A missing
/// directory yields an empty map. When a stem exists with several
/// extensions, PNG is preferred over TIFF/JPEG.
fn list_files(dir: &Path, extensions: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out: BTreeMap<String, PathBuf> = BTreeMap::new();
    let read = match fs::read_dir(dir) {
        Ok(r) => r,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(source) => {
            return Err(DatasetError::Io {
                path: dir.to_path_buf(),
                source,
            })
        }
    };
    for item in read {
        let item = item.map_err(|source| DatasetError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = item.path();
        if !path.is_file() {
            continue;
        }
        let Some(ext) = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) else {
            continue;
        };
        let Some(rank) = extensions.iter().position(|e| *e == ext) else {
            continue;
        };
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
            continue;
        };
        let keep_existing = out.get(&stem).is_some_and(|existing| {
            let existing_ext = existing
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase)
                .unwrap_or_default();
            let existing_rank = extensions.iter().position(|e| *e == existing_ext).unwrap_or(usize::MAX);
            existing_rank <= rank
        });
        if !keep_existing {
            out.insert(stem, path);
        }
    }
    Ok(out)
}
