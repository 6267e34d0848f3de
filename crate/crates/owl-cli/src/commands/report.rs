//! `owl report`: aggregate per-strategy evaluation directories into one
//! comparison table (one row per strategy x suite).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::io_util::{write_atomic, write_json_pretty};

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory whose subdirectories are per-strategy evaluation outputs.
    #[arg(long)]
    pub in_dir: PathBuf,
    /// Aggregated JSON output.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional long-format CSV mirror.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportRow {
    pub strategy: String,
    pub suite: String,
    pub metrics: BTreeMap<String, f64>,
}

fn numeric_fields(value: &serde_json::Value) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    if let Some(map) = value.as_object() {
        for (k, v) in map {
            if let Some(n) = v.as_f64() {
                out.insert(k.clone(), n);
            }
        }
    }
    out
}

/// Collects rows from a directory tree `in_dir/<strategy>/<suite>.json`.
pub fn collect_rows(in_dir: &Path) -> Result<Vec<ReportRow>> {
    let mut strategies: Vec<PathBuf> = std::fs::read_dir(in_dir)
        .with_context(|| format!("reading {}", in_dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    strategies.sort();

    let mut rows = Vec::new();
    for dir in strategies {
        let strategy = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("unknown")
            .to_string();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension().is_some_and(|e| e == "json")
                    && p.file_stem().is_some_and(|s| {
                        let s = s.to_string_lossy();
                        s == "chair" || s == "tce" || s.starts_with("pope_")
                    })
            })
            .collect();
        files.sort();
        for file in files {
            let suite = file.file_stem().unwrap().to_string_lossy().to_string();
            let value: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(&file)?)
                    .with_context(|| format!("parsing {}", file.display()))?;
            rows.push(ReportRow {
                strategy: strategy.clone(),
                suite,
                metrics: numeric_fields(&value),
            });
        }
    }
    Ok(rows)
}

pub fn run(args: &ReportArgs) -> Result<()> {
    let rows = collect_rows(&args.in_dir)?;
    write_json_pretty(&args.out, &rows)?;

    if let Some(csv_path) = &args.csv {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(["strategy", "suite", "metric", "value"])?;
        for row in &rows {
            for (metric, value) in &row.metrics {
                writer.write_record([
                    row.strategy.as_str(),
                    row.suite.as_str(),
                    metric.as_str(),
                    &value.to_string(),
                ])?;
            }
        }
        write_atomic(csv_path, &writer.into_inner()?)?;
    }

    // Compact comparison table on stdout (CHAIR suite when present).
    println!("{:<14} {:>10} {:>10} {:>10}", "strategy", "chair_s", "chair_i", "len");
    for row in &rows {
        if row.suite == "chair" {
            println!(
                "{:<14} {:>10.4} {:>10.4} {:>10.2}",
                row.strategy,
                row.metrics.get("chair_s").copied().unwrap_or(f64::NAN),
                row.metrics.get("chair_i").copied().unwrap_or(f64::NAN),
                row.metrics.get("avg_len").copied().unwrap_or(f64::NAN),
            );
        }
    }
    println!("report   {} ({} rows)", args.out.display(), rows.len());
    Ok(())
}
