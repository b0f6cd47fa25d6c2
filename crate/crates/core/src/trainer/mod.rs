//! Training loop: Adam with global-norm clipping, plateau learning-rate
//! schedule, early stopping on a validation metric and resumable
//! checkpoints.

mod checkpoint;
mod clip;
mod schedule;
mod source;

use std::io::Write;
use std::path::PathBuf;

use burn::module::AutodiffModule;
use burn::optim::adaptor::OptimizerAdaptor;
use burn::optim::{Adam, AdamConfig, GradientsParams, Optimizer};
use burn::prelude::*;
use burn::tensor::backend::AutodiffBackend;
use ndarray::ArrayView3;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    file_sha256, load_model, read_state, save_checkpoint, CheckpointError, CheckpointState, MODEL_FILE,
    OPTIMIZER_FILE, STATE_FILE,
};
pub use clip::{clip_global_norm, global_grad_norm};
pub use schedule::{EarlyStopConfig, EarlyStopping, Monitor, PlateauConfig, PlateauScheduler, StopDecision};
pub use source::{IndexSource, SampleSource};

use crate::augment::{build_pipeline, stream_rng, AugmentError, AugmentedSample, Pipeline};
use crate::config::RunConfig;
use crate::dataset::DatasetError;
use crate::losses::{combined_loss, LossBreakdown, LossConfig, LossError};
use crate::metrics::{MetricConfig, MetricsAccumulator, MetricsError, MetricsReport};
use crate::model::{build_model, ModelError, SegmentationModel};
use crate::tensor::{stack_images, stack_masks, unstack};

/// Worker id reserved for the epoch shuffle stream.
const SHUFFLE_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub scheduler: PlateauConfig,
    pub early_stopping: EarlyStopConfig,
    /// Maximum global L2 norm of the gradients; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    /// Relative paths resolve against the run directory.
    pub checkpoint_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 4,
            max_epochs: 150,
            scheduler: PlateauConfig::default(),
            early_stopping: EarlyStopConfig::default(),
            grad_clip_norm: Some(5.0),
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(format!("adam_epsilon must be > 0, got {}", self.adam_epsilon));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return Err("max_epochs must be >= 1".into());
        }
        let s = &self.scheduler;
        if !(s.factor > 0.0 && s.factor < 1.0) {
            return Err(format!("scheduler.factor must lie in (0, 1), got {}", s.factor));
        }
        if !(s.min_lr >= 0.0) {
            return Err(format!("scheduler.min_lr must be >= 0, got {}", s.min_lr));
        }
        if self.early_stopping.patience == 0 {
            return Err("early_stopping.patience must be >= 1".into());
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(format!("grad_clip_norm must be > 0, got {c}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch} step {step} (samples {sample_ids:?}): {breakdown:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        sample_ids: Vec<String>,
        breakdown: LossBreakdown,
    },
    #[error("training log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate used during this epoch.
    pub learning_rate: f64,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub val_metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingResult {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_val_metric: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Sample-weighted mean of per-batch breakdowns.
#[derive(Default)]
struct MeanLoss {
    sum: LossBreakdown,
    n: usize,
}

impl MeanLoss {
    fn add(&mut self, b: &LossBreakdown, weight: usize) {
        let w = weight as f64;
        self.sum.total += b.total * w;
        self.sum.dice += b.dice * w;
        self.sum.bce += b.bce * w;
        self.sum.focal += b.focal * w;
        self.sum.boundary += b.boundary * w;
        self.n += weight;
    }

    fn mean(&self) -> LossBreakdown {
        let n = self.n.max(1) as f64;
        LossBreakdown {
            total: self.sum.total / n,
            dice: self.sum.dice / n,
            bce: self.sum.bce / n,
            focal: self.sum.focal / n,
            boundary: self.sum.boundary / n,
        }
    }
}

fn monitor_value(monitor: Monitor, loss: &LossBreakdown, report: &MetricsReport) -> f64 {
    match monitor {
        Monitor::ValLoss => loss.total,
        Monitor::ValMap => report.map,
        Monitor::ValMiou => report.miou,
    }
}

fn batch_tensors<B: Backend>(batch: &[AugmentedSample], device: &B::Device) -> (Tensor<B, 4>, Tensor<B, 4>) {
    let images: Vec<ArrayView3<f32>> = batch.iter().map(|s| s.image.view()).collect();
    let masks: Vec<ArrayView3<u8>> = batch.iter().map(|s| s.masks.view()).collect();
    (stack_images(&images, device), stack_masks(&masks, device))
}

/// Mean loss and metrics of `model` over `source` with evaluation
/// preprocessing. Does not touch the model parameters.
pub fn validate<B: Backend>(
    model: &SegmentationModel<B>,
    source: &dyn SampleSource,
    pipeline: &Pipeline,
    loss: &LossConfig,
    metrics: &MetricConfig,
    batch_size: usize,
    device: &B::Device,
) -> Result<(LossBreakdown, MetricsReport), TrainError> {
    if source.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut mean = MeanLoss::default();
    let mut acc = MetricsAccumulator::new(metrics.clone());
    let indices: Vec<usize> = (0..source.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = chunk
            .iter()
            .map(|&i| source.load(i).map(|s| pipeline.apply_eval(&s)))
            .collect::<Result<Vec<_>, _>>()?;
        let (x, y) = batch_tensors::<B>(&batch, device);
        let logits = model.forward_logits(x)?;
        let terms = combined_loss(logits.clone(), y, loss)?;
        mean.add(&terms.breakdown(loss), batch.len());
        for (probs, sample) in unstack(burn::tensor::activation::sigmoid(logits)).iter().zip(&batch) {
            acc.add(probs.view(), sample.masks.view())?;
        }
    }
    Ok((mean.mean(), acc.finish()?))
}

pub type AdamOptimizer<B> = OptimizerAdaptor<Adam, SegmentationModel<B>, B>;
type OptimizerRecord<B> = <AdamOptimizer<B> as Optimizer<SegmentationModel<B>, B>>::Record;
type MonitorHook = Box<dyn FnMut(usize, f64) -> f64>;

pub struct Trainer<B: AutodiffBackend> {
    model: SegmentationModel<B>,
    optimizer: AdamOptimizer<B>,
    config: RunConfig,
    pipeline: Pipeline,
    scheduler: PlateauScheduler,
    early_stopping: EarlyStopping,
    epoch: usize,
    history: Vec<EpochRecord>,
    device: B::Device,
    log: Option<Box<dyn Write>>,
    monitor_hook: Option<MonitorHook>,
}

fn adam(config: &TrainConfig) -> AdamConfig {
    AdamConfig::new()
        .with_beta_1(config.beta1 as f32)
        .with_beta_2(config.beta2 as f32)
        .with_epsilon(config.adam_epsilon as f32)
}

impl<B: AutodiffBackend> Trainer<B> {
    /// Builds the model from `config.model` and a fresh optimizer.
    pub fn new(config: RunConfig, device: B::Device) -> Result<Self, TrainError> {
        config.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        let model = build_model::<B>(&config.model, &device)?;
        Self::with_model(config, model, device)
    }

    /// Starts training from an existing model.
    pub fn with_model(config: RunConfig, model: SegmentationModel<B>, device: B::Device) -> Result<Self, TrainError> {
        config.train.validate().map_err(TrainError::Config)?;
        let pipeline = build_pipeline(config.augment.clone(), config.train.seed)?;
        Ok(Self {
            optimizer: adam(&config.train).init(),
            scheduler: PlateauScheduler::new(config.train.scheduler.clone(), config.train.learning_rate),
            early_stopping: EarlyStopping::new(config.train.early_stopping.clone()),
            model,
            pipeline,
            config,
            epoch: 0,
            history: Vec::new(),
            device,
            log: None,
            monitor_hook: None,
        })
    }

    /// Restores model, optimizer, schedule and history from a checkpoint
    /// written by [`Trainer::save`].
    pub fn resume(dir: &std::path::Path, device: B::Device) -> Result<Self, TrainError> {
        let (model, state) = load_model::<B>(dir, None, &device)?;
        let mut trainer = Self::with_model(state.config.clone(), model, device)?;
        if state.optimizer_sha256.is_some() {
            let record: OptimizerRecord<B> = checkpoint::load_optimizer_record(dir, &trainer.device)?;
            trainer.optimizer = trainer.optimizer.load_record(record);
        }
        trainer.scheduler = state.scheduler;
        trainer.early_stopping = state.early_stopping;
        trainer.epoch = state.epoch;
        trainer.history = state.history;
        Ok(trainer)
    }

    /// Appends one JSON object per step and per epoch to `writer`.
    pub fn with_log(mut self, writer: Box<dyn Write>) -> Self {
        self.log = Some(writer);
        self
    }

    /// Replaces the early-stopping monitor value: `hook(epoch, measured)`.
    pub fn with_monitor_hook(mut self, hook: impl FnMut(usize, f64) -> f64 + 'static) -> Self {
        self.monitor_hook = Some(Box::new(hook));
        self
    }

    pub fn model(&self) -> &SegmentationModel<B> {
        &self.model
    }

    pub fn into_model(self) -> SegmentationModel<B> {
        self.model
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn learning_rate(&self) -> f64 {
        self.scheduler.lr
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn early_stopping(&self) -> &EarlyStopping {
        &self.early_stopping
    }

    fn log_line(&mut self, value: serde_json::Value) -> Result<(), TrainError> {
        if let Some(w) = self.log.as_mut() {
            writeln!(w, "{value}")?;
            w.flush()?;
        }
        Ok(())
    }

    /// One optimizer update on an already augmented batch.
    pub fn train_step(&mut self, batch: &[AugmentedSample], step: usize) -> Result<StepOutcome, TrainError> {
        let (x, y) = batch_tensors::<B>(batch, &self.device);
        let logits = self.model.forward_logits(x)?;
        let terms = combined_loss(logits, y, &self.config.loss)?;
        let loss = terms.breakdown(&self.config.loss);
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: self.epoch,
                step,
                sample_ids: batch.iter().map(|s| s.sample_id.clone()).collect(),
                breakdown: loss,
            });
        }
        let grads = terms.total.backward();
        let mut grads = GradientsParams::from_grads(grads, &self.model);
        let grad_norm = clip_global_norm(&self.model, &mut grads, self.config.train.grad_clip_norm);
        self.model = self.optimizer.step(self.scheduler.lr, self.model.clone(), grads);
        Ok(StepOutcome { loss, grad_norm })
    }

    /// One pass over `source` in a shuffled order fixed by seed and epoch.
    pub fn train_epoch(&mut self, source: &dyn SampleSource) -> Result<LossBreakdown, TrainError> {
        let n = source.len();
        if n == 0 {
            return Err(TrainError::EmptySplit("training"));
        }
        let seed = self.config.train.seed;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, SHUFFLE_STREAM, self.epoch as u64));
        let mut mean = MeanLoss::default();
        let bs = self.config.train.batch_size;
        for (step, chunk) in order.chunks(bs).enumerate() {
            let mut batch = Vec::with_capacity(chunk.len());
            for (k, &i) in chunk.iter().enumerate() {
                let draw = (self.epoch * n + step * bs + k) as u64;
                batch.push(self.pipeline.apply_train(&source.load(i)?, draw));
            }
            let out = self.train_step(&batch, step)?;
            mean.add(&out.loss, batch.len());
            let line = serde_json::json!({
                "event": "step",
                "epoch": self.epoch,
                "step": step,
                "lr": self.scheduler.lr,
                "grad_norm": out.grad_norm,
                "loss": out.loss,
            });
            self.log_line(line)?;
        }
        Ok(mean.mean())
    }

    /// Evaluates the current weights on `source`.
    pub fn validate(&self, source: &dyn SampleSource) -> Result<(LossBreakdown, MetricsReport), TrainError> {
        let model = self.model.valid();
        validate(
            &model,
            source,
            &self.pipeline,
            &self.config.loss,
            &self.config.metrics,
            self.config.train.batch_size,
            &self.device,
        )
    }

    fn state(&self) -> CheckpointState {
        let mut s = CheckpointState::new(self.config.clone(), self.scheduler.clone(), self.early_stopping.clone());
        s.epoch = self.epoch;
        s.history = self.history.clone();
        s
    }

    /// Writes model, optimizer state and counters to `dir`.
    pub fn save(&self, dir: &std::path::Path) -> Result<PathBuf, TrainError> {
        let record = self.optimizer.to_record();
        Ok(save_checkpoint(dir, &self.model, Some(record), &self.state())?)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.config.resolve(&self.config.train.checkpoint_dir)
    }

    /// Trains until `max_epochs` or early stopping. Writes `best/` whenever
    /// the monitored metric improves and `last/` after every epoch.
    pub fn fit(&mut self, train: &dyn SampleSource, val: &dyn SampleSource) -> Result<TrainingResult, TrainError> {
        let dir = self.checkpoint_dir();
        let best_dir = dir.join("best");
        let last_dir = dir.join("last");
        let mut stopped_early = false;
        while self.epoch < self.config.train.max_epochs {
            let epoch = self.epoch;
            let lr = self.scheduler.lr;
            let train_loss = self.train_epoch(train)?;
            let (val_loss, report) = self.validate(val)?;

            let sched_value = monitor_value(self.scheduler.config.monitor, &val_loss, &report);
            let mut stop_value = monitor_value(self.early_stopping.config.monitor, &val_loss, &report);
            if let Some(hook) = self.monitor_hook.as_mut() {
                stop_value = hook(epoch, stop_value);
            }
            self.scheduler.step(sched_value);
            let decision = self.early_stopping.step(epoch, stop_value);
            self.epoch += 1;
            self.history.push(EpochRecord {
                epoch,
                learning_rate: lr,
                train: train_loss,
                val: val_loss,
                val_metrics: report.clone(),
            });
            let line = serde_json::json!({
                "event": "epoch",
                "epoch": epoch,
                "lr": lr,
                "train": train_loss,
                "val": val_loss,
                "val_map": report.map,
                "val_miou": report.miou,
                "monitor": stop_value,
                "decision": format!("{decision:?}"),
            });
            self.log_line(line)?;
            log::info!(
                "epoch {epoch}: train {:.4} val {:.4} mAP {:.4} mIoU {:.4}",
                train_loss.total,
                val_loss.total,
                report.map,
                report.miou
            );
            if decision == StopDecision::Improved {
                self.save(&best_dir)?;
            }
            self.save(&last_dir)?;
            if decision == StopDecision::Stop {
                stopped_early = true;
                break;
            }
        }
        Ok(TrainingResult {
            best_checkpoint: best_dir,
            last_checkpoint: last_dir,
            best_val_metric: self.early_stopping.best.unwrap_or(f64::NAN),
            best_epoch: self.early_stopping.best_epoch.unwrap_or(0),
            epochs_run: self.history.len(),
            stopped_early,
            history: self.history.clone(),
        })
    }
}

#[cfg(test)]
mod tests;
