//! Overlap metrics for multi-label lesion masks: per-class IoU aggregated
//! over a dataset, and AP as the mean precision over IoU thresholds
//! 0.50, 0.55, …, 0.95.

mod components;
mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::LesionClass;

pub use components::{connected_components, match_components, Component};
pub use report::{format_table, ClassMetrics, MetricsReport};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: prediction {pred:?} vs ground truth {gt:?}")]
    ShapeMismatch { pred: Vec<usize>, gt: Vec<usize> },
    #[error("{outputs} outputs but {targets} ground-truth masks")]
    Misaligned { outputs: usize, targets: usize },
    #[error("evaluation set is empty")]
    Empty,
    #[error("expected {expected} class channels, got {got}")]
    ChannelCount { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// What counts as one prediction when computing precision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Each 8-connected component of a binarized class map.
    #[default]
    Component,
    /// Each image's whole binarized class map.
    Image,
}

impl fmt::Display for ApMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ApMode::Component => "component",
            ApMode::Image => "image",
        })
    }
}

impl FromStr for ApMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "component" => Ok(ApMode::Component),
            "image" => Ok(ApMode::Image),
            other => Err(format!("unknown ap mode {other:?} (expected component or image)")),
        }
    }
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Probability threshold for binarization (`p > tau`).
    pub tau: f64,
    /// Smoothing in the IoU ratio.
    pub epsilon: f64,
    pub ap_mode: ApMode,
    pub thresholds: Vec<f64>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            epsilon: 1e-6,
            ap_mode: ApMode::Component,
            thresholds: default_thresholds(),
        }
    }
}

pub fn binarize(probs: ArrayView2<f32>, tau: f64) -> ndarray::Array2<u8> {
    probs.mapv(|p| u8::from(f64::from(p) > tau))
}

fn check_same_shape(pred: &[usize], gt: &[usize]) -> Result<()> {
    if pred != gt {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.to_vec(),
            gt: gt.to_vec(),
        });
    }
    Ok(())
}

/// Pixel counts `(|P ∩ T|, |P|, |T|)`.
fn overlap_counts(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> (u64, u64, u64) {
    let (mut inter, mut p, mut t) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        let (a, b) = (a != 0, b != 0);
        inter += u64::from(a && b);
        p += u64::from(a);
        t += u64::from(b);
    }
    (inter, p, t)
}

/// `(|P∩T| + ε) / (|P| + |T| - |P∩T| + ε)`.
pub fn iou(pred: ArrayView2<u8>, gt: ArrayView2<u8>, epsilon: f64) -> Result<f64> {
    check_same_shape(pred.shape(), gt.shape())?;
    let (inter, p, t) = overlap_counts(pred, gt);
    Ok((inter as f64 + epsilon) / ((p + t - inter) as f64 + epsilon))
}

/// `tp / (tp + fp)`, and 0 when nothing was predicted.
pub fn precision(tp: usize, fp: usize) -> f64 {
    if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

/// AP over per-image `(predicted, ground-truth)` component lists: greedy
/// one-to-one matching per image, then the mean over `thresholds` of
/// `#matches with IoU ≥ t / #predictions`.
pub fn average_precision(per_image: &[(Vec<Component>, Vec<Component>)], thresholds: &[f64]) -> Result<f64> {
    if per_image.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut tally = ApTally::new(thresholds.len());
    for (pred, gt) in per_image {
        tally.add(&match_components(pred, gt), pred.len(), thresholds);
    }
    Ok(tally.ap())
}

/// Counts of matched predictions per threshold plus total predictions.
#[derive(Clone, Debug, Default, PartialEq)]
struct ApTally {
    hits: Vec<usize>,
    predictions: usize,
}

impl ApTally {
    fn new(thresholds: usize) -> Self {
        Self {
            hits: vec![0; thresholds],
            predictions: 0,
        }
    }

    fn add(&mut self, matched_ious: &[f64], predictions: usize, thresholds: &[f64]) {
        self.predictions += predictions;
        for (hits, &t) in self.hits.iter_mut().zip(thresholds) {
            *hits += matched_ious.iter().filter(|&&v| v >= t).count();
        }
    }

    fn ap(&self) -> f64 {
        if self.hits.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .hits
            .iter()
            .map(|&h| precision(h, self.predictions - h))
            .sum();
        sum / self.hits.len() as f64
    }
}

/// Streams images through the metric computation so a split never has to
/// be held in memory at once.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    config: MetricConfig,
    intersection: [u64; 4],
    union: [u64; 4],
    tallies: Vec<ApTally>,
    images: usize,
}

impl MetricsAccumulator {
    pub fn new(config: MetricConfig) -> Self {
        let tallies = (0..LesionClass::COUNT)
            .map(|_| ApTally::new(config.thresholds.len()))
            .collect();
        Self {
            config,
            intersection: [0; 4],
            union: [0; 4],
            tallies,
            images: 0,
        }
    }

    pub fn config(&self) -> &MetricConfig {
        &self.config
    }

    pub fn images(&self) -> usize {
        self.images
    }

    /// Adds one image: `probs` is 4×H×W in [0, 1], `gt` is 4×H×W binary.
    pub fn add(&mut self, probs: ArrayView3<f32>, gt: ArrayView3<u8>) -> Result<()> {
        check_same_shape(probs.shape(), gt.shape())?;
        if probs.dim().0 != LesionClass::COUNT {
            return Err(MetricsError::ChannelCount {
                expected: LesionClass::COUNT,
                got: probs.dim().0,
            });
        }
        for (c, (p, t)) in probs.axis_iter(Axis(0)).zip(gt.axis_iter(Axis(0))).enumerate() {
            let pred = binarize(p, self.config.tau);
            self.add_binary_class(c, pred.view(), t);
        }
        self.images += 1;
        Ok(())
    }

    fn add_binary_class(&mut self, class: usize, pred: ArrayView2<u8>, gt: ArrayView2<u8>) {
        let (inter, p, t) = overlap_counts(pred, gt);
        self.intersection[class] += inter;
        self.union[class] += p + t - inter;

        let thresholds = &self.config.thresholds;
        match self.config.ap_mode {
            ApMode::Component => {
                let pc = connected_components(pred);
                let gc = connected_components(gt);
                let matched = match_components(&pc, &gc);
                self.tallies[class].add(&matched, pc.len(), thresholds);
            }
            ApMode::Image => {
                if p == 0 {
                    return;
                }
                let union = p + t - inter;
                let matched: Vec<f64> = if inter > 0 {
                    vec![inter as f64 / union as f64]
                } else {
                    Vec::new()
                };
                self.tallies[class].add(&matched, 1, thresholds);
            }
        }
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.images == 0 {
            return Err(MetricsError::Empty);
        }
        let eps = self.config.epsilon;
        let per_class: BTreeMap<LesionClass, ClassMetrics> = LesionClass::ALL
            .iter()
            .map(|&class| {
                let c = class.channel_index();
                let iou = (self.intersection[c] as f64 + eps) / (self.union[c] as f64 + eps);
                (
                    class,
                    ClassMetrics {
                        ap: self.tallies[c].ap(),
                        iou,
                    },
                )
            })
            .collect();
        Ok(MetricsReport::new(per_class, &self.config, self.images))
    }
}

/// Evaluates aligned per-image probability maps against ground truth.
pub fn evaluate(outputs: &[ndarray::Array3<f32>], gt: &[ndarray::Array3<u8>], config: &MetricConfig) -> Result<MetricsReport> {
    if outputs.len() != gt.len() {
        return Err(MetricsError::Misaligned {
            outputs: outputs.len(),
            targets: gt.len(),
        });
    }
    let mut acc = MetricsAccumulator::new(config.clone());
    for (o, t) in outputs.iter().zip(gt) {
        acc.add(o.view(), t.view())?;
    }
    acc.finish()
}
