//! `report`: gather metric reports from several runs into one JSON list or
//! one table with a column per run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use lesionseg::metrics::{format_table, MetricsReport};

use crate::args::{ReportArgs, ReportFormat};
use crate::util::{file_stem, read_json};

pub const REPORT_FILE: &str = "report.json";

/// A file is read as is; a directory must contain `report.json`. The run
/// name is the file stem, or the directory name for `report.json`.
pub fn load_run(path: &Path) -> Result<(String, MetricsReport)> {
    let file: PathBuf = if path.is_dir() { path.join(REPORT_FILE) } else { path.to_path_buf() };
    if !file.is_file() {
        bail!("no metrics report at {}", file.display());
    }
    let stem = file_stem(&file);
    let name = if stem == "report" {
        file.parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or(stem)
    } else {
        stem
    };
    Ok((name, read_json(&file)?))
}

pub fn cmd_report(args: &ReportArgs) -> Result<String> {
    let mut runs = Vec::new();
    for path in &args.runs {
        let (mut name, report) = load_run(path)?;
        // Keep names unique so JSON keys do not collide.
        let base = name.clone();
        let mut k = 2;
        while runs.iter().any(|(n, _): &(String, MetricsReport)| *n == name) {
            name = format!("{base}#{k}");
            k += 1;
        }
        runs.push((name, report));
    }
    Ok(match args.format {
        ReportFormat::Table => format_table(&runs),
        ReportFormat::Json => {
            let list: Vec<_> = runs
                .iter()
                .map(|(run, report)| serde_json::json!({ "run": run, "report": report }))
                .collect();
            serde_json::to_string_pretty(&list)? + "\n"
        }
    })
}
