use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ApMode, MetricConfig};
use crate::dataset::LesionClass;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub ap: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<LesionClass, ClassMetrics>,
    pub map: f64,
    pub miou: f64,
    pub thresholds: Vec<f64>,
    pub binarization_tau: f64,
    pub ap_mode: ApMode,
    pub num_images: usize,
}

impl MetricsReport {
    pub fn new(per_class: BTreeMap<LesionClass, ClassMetrics>, config: &MetricConfig, num_images: usize) -> Self {
        let n = per_class.len().max(1) as f64;
        let map = per_class.values().map(|m| m.ap).sum::<f64>() / n;
        let miou = per_class.values().map(|m| m.iou).sum::<f64>() / n;
        Self {
            per_class,
            map,
            miou,
            thresholds: config.thresholds.clone(),
            binarization_tau: config.tau,
            ap_mode: config.ap_mode,
            num_images,
        }
    }

    pub fn ap(&self, class: LesionClass) -> f64 {
        self.per_class.get(&class).map_or(0.0, |m| m.ap)
    }

    pub fn iou(&self, class: LesionClass) -> f64 {
        self.per_class.get(&class).map_or(0.0, |m| m.iou)
    }

    /// Table rows as `(label, value)` in display order.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = Vec::with_capacity(10);
        for class in LesionClass::ALL {
            rows.push((format!("AP ({class})"), self.ap(class)));
        }
        rows.push(("mAP".to_string(), self.map));
        for class in LesionClass::ALL {
            rows.push((format!("IoU ({class})"), self.iou(class)));
        }
        rows.push(("mIoU".to_string(), self.miou));
        rows
    }

    pub fn to_table(&self, column: &str) -> String {
        format_table(&[(column.to_string(), self.clone())])
    }
}

/// Aligned text table with one metric row per line and one column per run.
pub fn format_table(runs: &[(String, MetricsReport)]) -> String {
    let label_width = "Metric".len().max("IoU (MA)".len());
    let widths: Vec<usize> = runs.iter().map(|(name, _)| name.len().max(6)).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<label_width$}", "Metric");
    for ((name, _), w) in runs.iter().zip(&widths) {
        let _ = write!(out, "  {name:>w$}");
    }
    out.push('\n');
    let rows: Vec<Vec<(String, f64)>> = runs.iter().map(|(_, r)| r.rows()).collect();
    let n_rows = rows.first().map_or(0, Vec::len);
    for i in 0..n_rows {
        let _ = write!(out, "{:<label_width$}", rows[0][i].0);
        for (run_rows, w) in rows.iter().zip(&widths) {
            let _ = write!(out, "  {:>w$.4}", run_rows[i].1);
        }
        out.push('\n');
    }
    let protocol = |r: &MetricsReport| format!("ap_mode={}, tau={}", r.ap_mode, r.binarization_tau);
    match runs.first() {
        Some((_, first)) if runs.iter().all(|(_, r)| protocol(r) == protocol(first)) => {
            let _ = writeln!(out, "({}, images={})", protocol(first), first.num_images);
        }
        _ => {
            // Differing protocols are spelled out per column.
            for (name, r) in runs {
                let _ = writeln!(out, "{name}: ({}, images={})", protocol(r), r.num_images);
            }
        }
    }
    out
}
