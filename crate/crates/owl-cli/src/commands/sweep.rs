//! `owl sweep`: grid search over the intervention knobs, one CSV row per
//! grid point. Finished rows are detected on restart and skipped; the file
//! is rewritten atomically after every point.

use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use serde::{Deserialize, Serialize};

use owl_core::evalhall::PopeSetting;

use crate::commands::{load_corpus, load_grammar, require_model_path};
use crate::config::{ConfigOverlay, RunConfig, Strategy};
use crate::io_util::write_atomic;
use crate::pipeline::{chair_suite, load_model, load_table_if_needed, pope_suite};

use super::caption::strategy_spec;

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub overlay: ConfigOverlay,
    /// Output CSV (also the resume state).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub betas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long = "mod-ts", value_delimiter = ',')]
    pub mod_ts: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub mod_t: f64,
    pub chair_s: f64,
    pub chair_i: f64,
    pub f1: f64,
    pub avg_len: f64,
}

fn key(alpha: f64, beta: f64, lambda: f64, mod_t: f64) -> String {
    format!("{alpha}|{beta}|{lambda}|{mod_t}")
}

fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<csv::Result<Vec<_>>>()?)
}

fn write_rows(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    write_atomic(path, &writer.into_inner()?)
}

pub fn run(args: &SweepArgs, config_file: Option<&Path>) -> Result<()> {
    let mut cfg = RunConfig::resolve(config_file, &args.overlay)?;
    cfg.strategy = Strategy::Dcd;
    let grammar = load_grammar(&cfg)?;
    let (corpus, _) = load_corpus(&cfg, &grammar)?;
    let model = load_model(Path::new(require_model_path(&cfg)?))?;
    let strategy = strategy_spec(&cfg);
    let table = load_table_if_needed(
        &strategy,
        cfg.calibration.as_deref(),
        &model.hash,
        cfg.force,
    )?;

    let alphas = args.alphas.clone().unwrap_or_else(|| vec![cfg.alpha]);
    let betas = args.betas.clone().unwrap_or_else(|| vec![cfg.beta]);
    let lambdas = args.lambdas.clone().unwrap_or_else(|| vec![cfg.lambda]);
    let mod_ts = args.mod_ts.clone().unwrap_or_else(|| vec![cfg.mod_t]);

    let mut rows = read_rows(&args.out)?;
    let mut done: Vec<String> = rows
        .iter()
        .map(|r| key(r.alpha, r.beta, r.lambda, r.mod_t))
        .collect();

    for &alpha in &alphas {
        for &beta in &betas {
            for &lambda in &lambdas {
                for &mod_t in &mod_ts {
                    let k = key(alpha, beta, lambda, mod_t);
                    if done.contains(&k) {
                        println!("skip     alpha={alpha} beta={beta} lambda={lambda} mod_t={mod_t} (already done)");
                        continue;
                    }
                    let mut point = cfg.clone();
                    point.alpha = alpha;
                    point.beta = beta;
                    point.lambda = lambda;
                    point.mod_t = mod_t;
                    let icfg = point.intervention_config();

                    let suite = chair_suite(
                        &model.params,
                        &model.hash,
                        &corpus,
                        &grammar,
                        &strategy,
                        &icfg,
                        table.as_ref(),
                        point.seed,
                        point.max_len,
                    )?;
                    let (pope, _) = pope_suite(
                        &model.params,
                        &model.hash,
                        &corpus,
                        &grammar,
                        PopeSetting::Random,
                        &strategy,
                        &icfg,
                        table.as_ref(),
                        point.seed,
                    )?;
                    let row = SweepRow {
                        alpha,
                        beta,
                        lambda,
                        mod_t,
                        chair_s: suite.report.result.chair_s,
                        chair_i: suite.report.result.chair_i,
                        f1: pope.f1,
                        avg_len: suite.report.result.avg_len,
                    };
                    println!(
                        "point    alpha={alpha} beta={beta} lambda={lambda} mod_t={mod_t}: chair_s {:.4} f1 {:.4}",
                        row.chair_s, row.f1
                    );
                    rows.push(row);
                    done.push(k);
                    write_rows(&args.out, &rows)?;
                }
            }
        }
    }
    println!("sweep    {} ({} rows)", args.out.display(), rows.len());
    Ok(())
}
