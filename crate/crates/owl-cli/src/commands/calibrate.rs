//! `owl calibrate`: collect hallucinated-token VTACR samples under a
//! baseline decoder and fit per-layer percentile base scores.

use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;

use owl_core::calibrate::{collect_hallucinated_vtacr, fit_base_scores};
use owl_core::decode::DecodeOptions;
use owl_core::scenegen::special;
use owl_core::tensorcore::derive_seed;

use crate::commands::{load_corpus, load_grammar, require_model_path};
use crate::config::{ConfigOverlay, RunConfig};
use crate::pipeline::load_model;

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub overlay: ConfigOverlay,
    /// Calibration table output path (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &CalibrateArgs, config_file: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::resolve(config_file, &args.overlay)?;
    let grammar = load_grammar(&cfg)?;
    let (corpus, corpus_hash) = load_corpus(&cfg, &grammar)?;
    let model = load_model(Path::new(require_model_path(&cfg)?))?;

    let opts = DecodeOptions {
        max_len: cfg.max_len,
        eos_token: special::EOS,
        self_in_text: cfg.self_in_text,
    };
    let samples = collect_hallucinated_vtacr(
        &model.params,
        &corpus,
        &grammar,
        cfg.collector(),
        derive_seed(cfg.seed, "calibrate"),
        &opts,
    )?;
    let table = fit_base_scores(
        &samples,
        cfg.tau_pct,
        cfg.min_samples,
        &model.hash,
        &corpus_hash,
    )?;
    table.save_json(&args.out)?;

    println!("calibration  {}", args.out.display());
    for layer in &table.layers {
        println!(
            "layer {}  v_b = {:.6}  (n = {})",
            layer.layer, layer.v_b, layer.n_samples
        );
    }
    if !table.reliable {
        eprintln!(
            "warning: fewer than {} samples on some layer; table marked unreliable",
            table.min_samples
        );
    }
    Ok(())
}
