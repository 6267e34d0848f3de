pub mod calibrate;
pub mod caption;
pub mod evaluate;
pub mod gen_corpus;
pub mod report;
pub mod sweep;
pub mod train;

use std::path::Path;

use anyhow::{bail, Context, Result};

use owl_core::scenegen::{read_corpus_jsonl, CorpusRecord, SceneGrammar};

use crate::config::RunConfig;

/// Loads the grammar named by the config, failing with a usage-style error
/// when the path is missing.
pub fn load_grammar(cfg: &RunConfig) -> Result<SceneGrammar> {
    let Some(path) = &cfg.grammar else {
        bail!("missing --grammar (or `grammar` in the config file)");
    };
    SceneGrammar::load_json(Path::new(path)).with_context(|| format!("loading grammar {path}"))
}

pub fn load_corpus(cfg: &RunConfig, grammar: &SceneGrammar) -> Result<(Vec<CorpusRecord>, String)> {
    let Some(path) = &cfg.corpus else {
        bail!("missing --corpus (or `corpus` in the config file)");
    };
    let records = read_corpus_jsonl(Path::new(path), grammar)
        .with_context(|| format!("loading corpus {path}"))?;
    let hash = owl_core::fingerprint::sha256_file(Path::new(path))?;
    Ok((records, hash))
}

pub fn require_model_path(cfg: &RunConfig) -> Result<&str> {
    cfg.model
        .as_deref()
        .ok_or_else(|| anyhow::anyhow!("missing --model (or `model` in the config file)"))
}
