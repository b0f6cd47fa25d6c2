//! Checkpoint directories: `model.mpk`, `optimizer.mpk` (optional) and
//! `state.json` with the run config, counters and SHA-256 of both record
//! files. Directories are written beside the target and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use burn::module::Module;
use burn::prelude::*;
use burn::record::{FullPrecisionSettings, NamedMpkFileRecorder, Record, Recorder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::schedule::{EarlyStopping, PlateauScheduler};
use super::EpochRecord;
use crate::config::RunConfig;
use crate::model::{build_model, ModelConfig, SegmentationModel};

pub const MODEL_FILE: &str = "model.mpk";
pub const OPTIMIZER_FILE: &str = "optimizer.mpk";
pub const STATE_FILE: &str = "state.json";
const FORMAT_VERSION: u32 = 1;

pub(crate) type CheckpointRecorder = NamedMpkFileRecorder<FullPrecisionSettings>;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("checkpoint {path} does not match the requested config: {field} is {found}, expected {expected}")]
    ConfigMismatch {
        path: PathBuf,
        field: &'static str,
        expected: String,
        found: String,
    },
    #[error("checkpoint {path}: {reason}")]
    Model { path: PathBuf, reason: String },
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub format_version: u32,
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub learning_rate: f64,
    pub scheduler: PlateauScheduler,
    pub early_stopping: EarlyStopping,
    pub best_metric: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub model_sha256: String,
    pub optimizer_sha256: Option<String>,
}

impl CheckpointState {
    pub fn new(config: RunConfig, scheduler: PlateauScheduler, early_stopping: EarlyStopping) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            learning_rate: scheduler.lr,
            best_metric: early_stopping.best,
            config,
            epoch: 0,
            scheduler,
            early_stopping,
            history: Vec::new(),
            model_sha256: String::new(),
            optimizer_sha256: None,
        }
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

/// Writes a checkpoint directory atomically. `optimizer` is any record
/// (typically `Optimizer::to_record`).
pub fn save_checkpoint<B: Backend, R: Record<B>>(
    dir: &Path,
    model: &SegmentationModel<B>,
    optimizer: Option<R>,
    state: &CheckpointState,
) -> Result<PathBuf> {
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;

    let recorder = CheckpointRecorder::new();
    let model_path = tmp.join(MODEL_FILE);
    model
        .clone()
        .save_file(model_path.with_extension(""), &recorder)
        .map_err(|e| CheckpointError::Model {
            path: model_path.clone(),
            reason: e.to_string(),
        })?;
    let mut state = state.clone();
    state.format_version = FORMAT_VERSION;
    state.model_sha256 = file_sha256(&model_path)?;
    state.optimizer_sha256 = match optimizer {
        Some(record) => {
            let opt_path = tmp.join(OPTIMIZER_FILE);
            Recorder::<B>::record(&recorder, record, opt_path.with_extension("")).map_err(|e| {
                CheckpointError::Model {
                    path: opt_path.clone(),
                    reason: e.to_string(),
                }
            })?;
            Some(file_sha256(&opt_path)?)
        }
        None => None,
    };
    let state_path = tmp.join(STATE_FILE);
    let json = serde_json::to_vec_pretty(&state).expect("checkpoint state serializes");
    fs::write(&state_path, json).map_err(io_err(&state_path))?;

    if dir.exists() {
        let old = sibling(dir, "old");
        if old.exists() {
            fs::remove_dir_all(&old).map_err(io_err(&old))?;
        }
        fs::rename(dir, &old).map_err(io_err(dir))?;
        fs::rename(&tmp, dir).map_err(io_err(dir))?;
        fs::remove_dir_all(&old).map_err(io_err(&old))?;
    } else {
        fs::rename(&tmp, dir).map_err(io_err(dir))?;
    }
    Ok(dir.to_path_buf())
}

fn verify(path: &Path, expected: &str) -> Result<()> {
    let found = file_sha256(path)?;
    if found != expected {
        return Err(CheckpointError::Corrupt {
            path: path.to_path_buf(),
            reason: format!("sha256 {found} does not match recorded {expected}"),
        });
    }
    Ok(())
}

/// Reads `state.json` and verifies the record files against it.
pub fn read_state(dir: &Path) -> Result<CheckpointState> {
    let state_path = dir.join(STATE_FILE);
    let text = fs::read(&state_path).map_err(io_err(&state_path))?;
    let state: CheckpointState = serde_json::from_slice(&text).map_err(|e| CheckpointError::Corrupt {
        path: state_path.clone(),
        reason: e.to_string(),
    })?;
    if state.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Corrupt {
            path: state_path,
            reason: format!("unsupported format version {}", state.format_version),
        });
    }
    verify(&dir.join(MODEL_FILE), &state.model_sha256)?;
    if let Some(h) = &state.optimizer_sha256 {
        verify(&dir.join(OPTIMIZER_FILE), h)?;
    }
    Ok(state)
}

fn check_compatible(path: &Path, found: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    let fields: [(&'static str, String, String); 5] = [
        ("num_classes", found.num_classes.to_string(), expected.num_classes.to_string()),
        ("architecture", found.architecture.to_string(), expected.architecture.to_string()),
        ("backbone", format!("{:?}", found.backbone), format!("{:?}", expected.backbone)),
        ("input_size", format!("{:?}", found.input_size), format!("{:?}", expected.input_size)),
        (
            "channels",
            format!("{}/{}/{}", found.aspp_channels, found.low_level_channels, found.decoder_channels),
            format!("{}/{}/{}", expected.aspp_channels, expected.low_level_channels, expected.decoder_channels),
        ),
    ];
    for (field, f, e) in fields {
        if f != e {
            return Err(CheckpointError::ConfigMismatch {
                path: path.to_path_buf(),
                field,
                expected: e,
                found: f,
            });
        }
    }
    Ok(())
}

/// Rebuilds the network recorded in `dir` and loads its weights. With
/// `expected`, the recorded model config must agree on every shape-relevant
/// field.
pub fn load_model<B: Backend>(
    dir: &Path,
    expected: Option<&ModelConfig>,
    device: &B::Device,
) -> Result<(SegmentationModel<B>, CheckpointState)> {
    let state = read_state(dir)?;
    if let Some(expected) = expected {
        check_compatible(dir, &state.config.model, expected)?;
    }
    let mut model_config = state.config.model.clone();
    model_config.encoder_weights = None;
    let model_path = dir.join(MODEL_FILE);
    let skeleton = build_model::<B>(&model_config, device).map_err(|e| CheckpointError::Model {
        path: model_path.clone(),
        reason: e.to_string(),
    })?;
    let model = skeleton
        .load_file(model_path.with_extension(""), &CheckpointRecorder::new(), device)
        .map_err(|e| CheckpointError::Corrupt {
            path: model_path.clone(),
            reason: e.to_string(),
        })?;
    Ok((model, state))
}

pub(crate) fn load_optimizer_record<B: Backend, R: Record<B>>(dir: &Path, device: &B::Device) -> Result<R> {
    let path = dir.join(OPTIMIZER_FILE);
    Recorder::<B>::load(&CheckpointRecorder::new(), path.with_extension(""), device).map_err(|e| {
        CheckpointError::Corrupt {
            path: path.clone(),
            reason: e.to_string(),
        }
    })
}
