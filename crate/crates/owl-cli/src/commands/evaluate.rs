//! `owl evaluate`: run a metric suite for one strategy over the eval
//! corpus, writing reports, CSV mirrors, per-sample logs, and a run
//! manifest with the causal-intervention records.

use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use serde::Serialize;

use owl_core::evalhall::PopeSetting;

use crate::commands::{load_corpus, load_grammar, require_model_path};
use crate::config::{ConfigOverlay, RunConfig};
use crate::io_util::{write_flat_csv, write_json_pretty, write_jsonl};
use crate::pipeline::{
    chair_suite, load_model, load_table_if_needed, pope_suite, tce_suite,
};

use super::caption::{scm_manifest, strategy_spec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SuiteArg {
    Chair,
    Pope,
    Tce,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PopeSettingArg {
    Random,
    Popular,
    Adversarial,
    All,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub overlay: ConfigOverlay,
    #[arg(long, value_enum)]
    pub suite: SuiteArg,
    #[arg(long, value_enum, default_value = "all")]
    pub pope_setting: PopeSettingArg,
    /// Directory receiving the reports for this strategy.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    strategy: String,
    model_hash: &'a str,
    corpus_hash: &'a str,
    config: &'a RunConfig,
    scm: owl_core::causal::ScmManifest,
}

pub fn run(args: &EvaluateArgs, config_file: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::resolve(config_file, &args.overlay)?;
    let grammar = load_grammar(&cfg)?;
    let (corpus, corpus_hash) = load_corpus(&cfg, &grammar)?;
    let model = load_model(Path::new(require_model_path(&cfg)?))?;
    let strategy = strategy_spec(&cfg);
    let icfg = cfg.intervention_config();
    let table = load_table_if_needed(
        &strategy,
        cfg.calibration.as_deref(),
        &model.hash,
        cfg.force,
    )?;
    std::fs::create_dir_all(&args.out_dir)?;

    let manifest = RunManifest {
        strategy: strategy.label(),
        model_hash: &model.hash,
        corpus_hash: &corpus_hash,
        config: &cfg,
        scm: scm_manifest(&cfg),
    };
    write_json_pretty(&args.out_dir.join("manifest.json"), &manifest)?;

    if matches!(args.suite, SuiteArg::Chair | SuiteArg::All) {
        let suite = chair_suite(
            &model.params,
            &model.hash,
            &corpus,
            &grammar,
            &strategy,
            &icfg,
            table.as_ref(),
            cfg.seed,
            cfg.max_len,
        )?;
        write_json_pretty(&args.out_dir.join("chair.json"), &suite.report)?;
        write_flat_csv(&args.out_dir.join("chair.csv"), &suite.report)?;
        write_jsonl(&args.out_dir.join("chair_log.jsonl"), &suite.logs)?;
        println!(
            "chair    {}: chair_s {:.4}  chair_i {:.4}  len {:.2}  (n = {})",
            suite.report.strategy,
            suite.report.result.chair_s,
            suite.report.result.chair_i,
            suite.report.result.avg_len,
            suite.report.result.n_captions
        );
    }

    if matches!(args.suite, SuiteArg::Pope | SuiteArg::All) {
        let settings: Vec<PopeSetting> = match args.pope_setting {
            PopeSettingArg::Random => vec![PopeSetting::Random],
            PopeSettingArg::Popular => vec![PopeSetting::Popular],
            PopeSettingArg::Adversarial => vec![PopeSetting::Adversarial],
            PopeSettingArg::All => vec![
                PopeSetting::Random,
                PopeSetting::Popular,
                PopeSetting::Adversarial,
            ],
        };
        for setting in settings {
            let (result, logs) = pope_suite(
                &model.params,
                &model.hash,
                &corpus,
                &grammar,
                setting,
                &strategy,
                &icfg,
                table.as_ref(),
                cfg.seed,
            )?;
            let name = setting.name();
            write_json_pretty(&args.out_dir.join(format!("pope_{name}.json")), &result)?;
            write_flat_csv(&args.out_dir.join(format!("pope_{name}.csv")), &result)?;
            write_jsonl(&args.out_dir.join(format!("pope_{name}_log.jsonl")), &logs)?;
            println!(
                "pope     {name}: acc {:.4}  f1 {:.4}  ({} probes, {} flagged)",
                result.accuracy,
                result.f1,
                logs.len(),
                result.flagged
            );
        }
    }

    if matches!(args.suite, SuiteArg::Tce | SuiteArg::All) {
        let suite = tce_suite(
            &model.params,
            &model.hash,
            &corpus,
            &grammar,
            &strategy,
            &icfg,
            table.as_ref(),
            cfg.seed,
            cfg.max_len,
        )?;
        write_json_pretty(&args.out_dir.join("tce.json"), &suite.report)?;
        write_flat_csv(&args.out_dir.join("tce.csv"), &suite.report)?;
        write_jsonl(&args.out_dir.join("tce_log.jsonl"), &suite.logs)?;
        println!(
            "tce      {} vs {}: {:.4} ({} of {} improved)",
            suite.report.intervened,
            suite.report.baseline,
            suite.report.result.tce,
            suite.report.result.improved,
            suite.report.result.n_pairs
        );
    }

    Ok(())
}
