//! `owl train`: fit the testbed model on a corpus and write a checkpoint.

use std::path::PathBuf;

use anyhow::Result;
use clap::Args;

use owl_core::microlm::{save_checkpoint, train, ModelParams};
use owl_core::scenegen::Vocab;
use owl_core::tensorcore::Rng;

use crate::commands::{load_corpus, load_grammar};
use crate::config::{ConfigOverlay, RunConfig};
use crate::pipeline::INIT_STD;

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overlay: ConfigOverlay,
    /// Checkpoint output path (a .manifest.json sidecar is written too).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &TrainArgs, config_file: Option<&std::path::Path>) -> Result<()> {
    let cfg = RunConfig::resolve(config_file, &args.overlay)?;
    let grammar = load_grammar(&cfg)?;
    let (corpus, corpus_hash) = load_corpus(&cfg, &grammar)?;
    let vocab = Vocab::from_grammar(&grammar);

    let model_cfg = cfg.model_config(vocab.size(), grammar.feature_dim());
    let params = ModelParams::init(
        model_cfg,
        &mut Rng::derive(cfg.seed, "model/init"),
        INIT_STD,
    )?;
    let (trained, trace) = train(&params, &corpus, &grammar, &cfg.train_config())?;
    let hash = save_checkpoint(&trained, &args.out)?;

    println!("corpus   {corpus_hash}");
    println!("model    {hash}  {}", args.out.display());
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!(
            "loss     {first:.4} -> {last:.4} over {} epochs ({} params)",
            trace.len(),
            trained.num_params()
        );
    }
    Ok(())
}
