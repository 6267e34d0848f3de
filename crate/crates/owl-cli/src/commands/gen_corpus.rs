//! `owl gen-corpus`: write the grammar plus train/eval corpora.
//!
//! The training split carries hallucination-injected captions; the eval
//! split is clean (its captions are unused by evaluation, which scores
//! generated text against scene ground truth).

use std::path::PathBuf;

use anyhow::Result;
use clap::Args;

use owl_core::fingerprint::sha256_file;
use owl_core::scenegen::{generate_corpus, write_corpus_jsonl};
use owl_core::tensorcore::derive_seed;

use crate::config::{ConfigOverlay, RunConfig};

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[command(flatten)]
    pub overlay: ConfigOverlay,
    /// Directory receiving grammar.json, train.jsonl and eval.jsonl.
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn run(args: &GenCorpusArgs, config_file: Option<&std::path::Path>) -> Result<()> {
    let cfg = RunConfig::resolve(config_file, &args.overlay)?;
    let grammar = cfg.grammar_template();
    grammar.validate()?;
    std::fs::create_dir_all(&args.out_dir)?;

    let grammar_path = args.out_dir.join("grammar.json");
    grammar.save_json(&grammar_path)?;

    let train = generate_corpus(
        &grammar,
        derive_seed(cfg.seed, "corpus/train"),
        cfg.train_size,
        grammar.hallucination_rate,
    );
    let train_path = args.out_dir.join("train.jsonl");
    write_corpus_jsonl(&train_path, &train, &grammar)?;

    let eval = generate_corpus(
        &grammar,
        derive_seed(cfg.seed, "corpus/eval"),
        cfg.eval_size,
        0.0,
    );
    let eval_path = args.out_dir.join("eval.jsonl");
    write_corpus_jsonl(&eval_path, &eval, &grammar)?;

    println!("grammar  {}  {}", sha256_file(&grammar_path)?, grammar_path.display());
    println!(
        "train    {}  {} ({} scenes)",
        sha256_file(&train_path)?,
        train_path.display(),
        train.len()
    );
    println!(
        "eval     {}  {} ({} scenes)",
        sha256_file(&eval_path)?,
        eval_path.display(),
        eval.len()
    );
    Ok(())
}
