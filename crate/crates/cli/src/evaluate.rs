//! `evaluate`: score a checkpoint on one split, once per requested τ.
//! Writes `metrics_<mode>_tau<τ>.{json,txt}` and the invocation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use lesionseg::augment::{AugmentedSample, Pipeline};
use lesionseg::dataset::DatasetIndex;
use lesionseg::metrics::{MetricConfig, MetricsAccumulator, MetricsReport};
use lesionseg::tensor::CpuDevice;
use lesionseg::trainer::{IndexSource, SampleSource};
use ndarray::Array3;
use serde::Serialize;

use crate::args::EvaluateArgs;
use crate::inference::Predictor;
use crate::util::{write_if_changed, write_json};

const BATCH: usize = 4;

/// One pass over `source`, feeding every metric configuration. `predict`
/// maps a batch of eval-transformed samples to `[K, H, W]` probabilities.
pub fn evaluate_source(
    source: &dyn SampleSource,
    pipeline: &Pipeline,
    configs: &[MetricConfig],
    mut predict: impl FnMut(&[AugmentedSample]) -> Result<Vec<Array3<f32>>>,
) -> Result<Vec<MetricsReport>> {
    if source.is_empty() {
        bail!("the evaluation split is empty");
    }
    let mut accs: Vec<MetricsAccumulator> = configs.iter().cloned().map(MetricsAccumulator::new).collect();
    let mut start = 0;
    while start < source.len() {
        let end = (start + BATCH).min(source.len());
        let batch = (start..end)
            .map(|i| source.load(i).map(|s| pipeline.apply_eval(&s)))
            .collect::<Result<Vec<_>, _>>()?;
        let probs = predict(&batch)?;
        for (p, s) in probs.iter().zip(&batch) {
            for acc in &mut accs {
                acc.add(p.view(), s.masks.view())?;
            }
        }
        start = end;
    }
    accs.iter().map(|a| Ok(a.finish()?)).collect()
}

pub fn report_stem(report: &MetricsReport) -> String {
    format!("metrics_{}_tau{}", report.ap_mode, report.binarization_tau)
}

/// Writes `<stem>.json` and `<stem>.txt` into `dir`.
pub fn write_report(dir: &Path, stem: &str, column: &str, report: &MetricsReport) -> Result<PathBuf> {
    let json = dir.join(format!("{stem}.json"));
    write_json(&json, report)?;
    write_if_changed(&dir.join(format!("{stem}.txt")), report.to_table(column).as_bytes())?;
    Ok(json)
}

#[derive(Serialize)]
struct Invocation<'a> {
    command: &'static str,
    args: &'a EvaluateArgs,
    index: &'a Path,
    metrics: &'a [MetricConfig],
}

pub fn cmd_evaluate(args: &EvaluateArgs, device: &CpuDevice) -> Result<Vec<(PathBuf, MetricsReport)>> {
    if let Some(t) = args.tau.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        bail!("--tau must lie in (0, 1), got {t}");
    }
    let predictor = Predictor::load(&args.checkpoint, device)?;
    let run = &predictor.state.config;
    let index_path = args.index.clone().unwrap_or_else(|| run.data.index.clone());
    let index = DatasetIndex::load_json(&index_path)?.subset(args.split);
    let source = IndexSource::new(&index);

    let base = MetricConfig {
        ap_mode: args.ap_mode.unwrap_or(run.metrics.ap_mode),
        ..run.metrics.clone()
    };
    let taus = if args.tau.is_empty() { vec![base.tau] } else { args.tau.clone() };
    let configs: Vec<MetricConfig> = taus.iter().map(|&tau| MetricConfig { tau, ..base.clone() }).collect();

    let reports = evaluate_source(&source, &predictor.pipeline, &configs, |b| predictor.probabilities(b))?;

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.checkpoint.join("eval").join(args.split.name()));
    write_json(
        &out.join("invocation.json"),
        &Invocation {
            command: "evaluate",
            args,
            index: &index_path,
            metrics: &configs,
        },
    )?;
    reports
        .into_iter()
        .map(|r| {
            let path = write_report(&out, &report_stem(&r), args.split.name(), &r)?;
            Ok((path, r))
        })
        .collect()
}
