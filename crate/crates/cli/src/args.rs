use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lesionseg::dataset::Split;
use lesionseg::metrics::ApMode;
use serde::Serialize;

/// Default compute device, overridden by `--device`.
pub const DEVICE_ENV: &str = "LESIONSEG_DEVICE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    /// Multi-threaded CPU tensors.
    Cpu,
}

impl DeviceKind {
    pub fn device(self) -> lesionseg::tensor::CpuDevice {
        match self {
            DeviceKind::Cpu => Default::default(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lesionseg", version, about = "Lesion segmentation for fundus images")]
pub struct Cli {
    #[arg(long, global = true, env = DEVICE_ENV, value_enum, default_value = "cpu")]
    pub device: DeviceKind,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Index a dataset tree, standardize its masks and count lesion presence.
    Prepare(PrepareArgs),
    /// Train a model from a TOML run config.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Write probability maps and binary masks for images.
    Predict(PredictArgs),
    /// Draw lesion masks over a fundus image.
    Overlay(OverlayArgs),
    /// Combine metric reports into one JSON document or table.
    Report(ReportArgs),
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct PrepareArgs {
    /// Dataset root holding `<split>/image` and `<split>/label/<CLASS>`.
    #[arg(long)]
    pub root: PathBuf,
    /// Output directory for `index.json`, `summary.json` and `standardized/`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `run_dir`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Overrides `data.index`.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Overrides `train.max_epochs`.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    pub split: Split,
    /// Binarization threshold; repeat for a sweep. Defaults to the run config.
    #[arg(long)]
    pub tau: Vec<f64>,
    #[arg(long, value_parser = parse_ap_mode)]
    pub ap_mode: Option<ApMode>,
    /// Index file; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Defaults to `<checkpoint>/eval/<split>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Mask threshold; defaults to the run config.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct OverlayArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Mask directory (prediction output or label tree) or checkpoint; repeat
    /// to draw panels side by side.
    #[arg(long, required = true)]
    pub source: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
pub enum ReportFormat {
    Json,
    Table,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Report JSON files or directories containing `report.json`.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: ReportFormat,
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| format!("unknown split {s:?} (expected train, val or test)"))
}

fn parse_ap_mode(s: &str) -> Result<ApMode, String> {
    s.parse()
}
