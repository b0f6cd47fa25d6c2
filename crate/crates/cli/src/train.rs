//! `train`: validate the run config, snapshot it (with command-line
//! overrides applied) to `<run_dir>/config.toml`, train, then score the best
//! checkpoint on the validation split.
//!
//! Run directory contents: `config.toml`, `train_log.jsonl`,
//! `history.json`, `result.json`, `report.json`, `report.txt` and the
//! checkpoint directories.

use std::fs::{self, File};

use anyhow::{bail, Context, Result};
use lesionseg::config::RunConfig;
use lesionseg::dataset::DatasetIndex;
use lesionseg::metrics::MetricsReport;
use lesionseg::tensor::{CpuAutodiff, CpuDevice};
use lesionseg::trainer::{IndexSource, SampleSource, Trainer, TrainingResult, STATE_FILE};

use crate::args::TrainArgs;
use crate::evaluate::{evaluate_source, write_report};
use crate::inference::Predictor;
use crate::report::REPORT_FILE;
use crate::util::write_json;

pub struct TrainOutcome {
    pub config: RunConfig,
    pub result: TrainingResult,
    pub report: MetricsReport,
}

/// The config file with command-line overrides applied, validated.
pub fn effective_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(dir) = &args.run_dir {
        config.run_dir = dir.clone();
    }
    if let Some(index) = &args.index {
        config.data.index = index.clone();
    }
    if let Some(n) = args.max_epochs {
        config.train.max_epochs = n;
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

pub fn cmd_train(args: &TrainArgs, device: CpuDevice) -> Result<TrainOutcome> {
    let config = effective_config(args)?;
    let index = DatasetIndex::load_json(&config.data.index)?;
    let train = IndexSource::new(&index.subset(config.data.train_split)).truncated(config.data.max_train);
    let val = IndexSource::new(&index.subset(config.data.val_split)).truncated(config.data.max_val);
    for (name, source) in [("train", &train), ("validation", &val)] {
        if source.is_empty() {
            bail!("{name} split of {} is empty", config.data.index.display());
        }
    }

    let run_dir = config.run_dir.clone();
    fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    fs::write(run_dir.join("config.toml"), config.to_toml_string()?)?;
    let log = File::create(run_dir.join("train_log.jsonl"))?;
    let mut trainer = Trainer::<CpuAutodiff>::new(config.clone(), device.clone())?.with_log(Box::new(log));
    let result = trainer.fit(&train, &val)?;
    write_json(&run_dir.join("history.json"), &result.history)?;
    write_json(&run_dir.join("result.json"), &result)?;

    let best = if result.best_checkpoint.join(STATE_FILE).is_file() {
        &result.best_checkpoint
    } else {
        &result.last_checkpoint
    };
    let predictor = Predictor::load(best, &device)?;
    let report = evaluate_source(&val, &predictor.pipeline, std::slice::from_ref(&config.metrics), |b| {
        predictor.probabilities(b)
    })?
    .remove(0);
    let stem = REPORT_FILE.trim_end_matches(".json");
    write_report(&run_dir, stem, config.data.val_split.name(), &report)?;
    Ok(TrainOutcome { config, result, report })
}
