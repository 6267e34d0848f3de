//! `owl caption`: decode one scene and dump the full per-step diagnostics.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use clap::Args;
use serde::Serialize;

use owl_core::causal::ScmManifest;
use owl_core::decode::DecodeOutcome;
use owl_core::scenegen::{SceneGrammar, Vocab};

use crate::commands::{load_corpus, load_grammar, require_model_path};
use crate::config::{ConfigOverlay, RunConfig, Strategy};
use crate::io_util::{write_atomic, write_json_pretty};
use crate::pipeline::{caption_one, caption_record_from_outcome, load_table_if_needed, StrategySpec};

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[command(flatten)]
    pub overlay: ConfigOverlay,
    /// Scene id from the corpus file.
    #[arg(long)]
    pub scene_id: u64,
    /// Output JSON path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the per-step VTACR table as CSV.
    #[arg(long)]
    pub dump_vtacr: Option<PathBuf>,
}

#[derive(Serialize)]
pub struct CaptionDump {
    scene_id: u64,
    strategy: String,
    seed: u64,
    present: Vec<String>,
    tokens: Vec<u32>,
    words: Vec<String>,
    mentioned: Vec<String>,
    hallucinated: Vec<String>,
    generation_passes: usize,
    steps: Vec<owl_core::decode::StepDiag>,
    scm: ScmManifest,
}

pub fn strategy_spec(cfg: &RunConfig) -> StrategySpec {
    match cfg.strategy {
        Strategy::Greedy => StrategySpec::Greedy,
        Strategy::Nucleus => StrategySpec::Nucleus {
            p: cfg.nucleus_p,
            temperature: cfg.temperature,
        },
        Strategy::Beam => StrategySpec::Beam {
            width: cfg.beam_width,
        },
        Strategy::Dcd => StrategySpec::Dcd {
            path: cfg.dcd_path(),
            sample: cfg.dcd_sample,
            force: cfg.force,
        },
    }
}

/// Manifest for a run: baseline strategies register no interventions, the
/// dual-path strategies register both mediators per active path.
pub fn scm_manifest(cfg: &RunConfig) -> ScmManifest {
    match cfg.strategy {
        Strategy::Dcd => {
            let icfg = cfg.intervention_config();
            let descriptor = |direction: &str| {
                serde_json::json!({
                    "direction": direction,
                    "alpha": icfg.alpha,
                    "beta": icfg.beta,
                    "mod_t": icfg.mod_t,
                    "tau_pct": icfg.tau_pct,
                    "renormalize": icfg.renormalize,
                })
            };
            let mut manifest = ScmManifest::dual_path(
                descriptor("boost visual, attenuate text"),
                descriptor("attenuate visual, boost text"),
            );
            // Single-path ablations only run one trajectory.
            match cfg.dcd_path {
                crate::config::DcdPathArg::Visual => {
                    manifest.interventions.retain(|r| r.path == "visual_favored");
                }
                crate::config::DcdPathArg::Text => {
                    manifest.interventions.retain(|r| r.path == "text_favored");
                }
                crate::config::DcdPathArg::Fused => {}
            }
            manifest
        }
        _ => ScmManifest::baseline(),
    }
}

pub fn vtacr_csv(outcome: &DecodeOutcome, vocab: &Vocab) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["step", "token", "layer", "nu", "tau", "vtacr"])?;
    for step in &outcome.steps {
        let word = vocab
            .word(step.token)
            .map_err(|e| anyhow!("token outside vocabulary: {e}"))?;
        for (layer, lv) in step.profile.layers.iter().enumerate() {
            writer.write_record([
                step.profile.step.to_string(),
                word.to_string(),
                layer.to_string(),
                lv.nu.to_string(),
                lv.tau.to_string(),
                lv.vtacr.map_or_else(|| "inf".to_string(), |v| v.to_string()),
            ])?;
        }
    }
    Ok(String::from_utf8(writer.into_inner()?)?)
}

pub fn build_dump(
    cfg: &RunConfig,
    outcome: &DecodeOutcome,
    record: &owl_core::scenegen::CorpusRecord,
    grammar: &SceneGrammar,
    vocab: &Vocab,
) -> Result<CaptionDump> {
    let caption = caption_record_from_outcome(outcome, record, vocab);
    let names = |set: &std::collections::BTreeSet<usize>| -> Vec<String> {
        set.iter().map(|&o| grammar.objects[o].clone()).collect()
    };
    Ok(CaptionDump {
        scene_id: record.scene.id,
        strategy: outcome.strategy.clone(),
        seed: outcome.seed,
        present: record
            .scene
            .present
            .iter()
            .map(|&o| grammar.objects[o].clone())
            .collect(),
        tokens: outcome.tokens.clone(),
        words: vocab
            .decode(&outcome.tokens)
            .map_err(|e| anyhow!("decoding tokens: {e}"))?,
        mentioned: names(&caption.mentioned),
        hallucinated: names(&caption.hallucinated),
        generation_passes: outcome.generation_passes,
        steps: outcome.steps.clone(),
        scm: scm_manifest(cfg),
    })
}

pub fn run(args: &CaptionArgs, config_file: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::resolve(config_file, &args.overlay)?;
    let grammar = load_grammar(&cfg)?;
    let (corpus, _) = load_corpus(&cfg, &grammar)?;
    let model = load_model_from(&cfg)?;
    let vocab = Vocab::from_grammar(&grammar);

    let record = corpus
        .iter()
        .find(|r| r.scene.id == args.scene_id)
        .ok_or_else(|| anyhow!("scene {} not found in corpus", args.scene_id))?;

    let strategy = strategy_spec(&cfg);
    let table = load_table_if_needed(
        &strategy,
        cfg.calibration.as_deref(),
        &model.hash,
        cfg.force,
    )?;
    let outcome = caption_one(
        &model.params,
        &model.hash,
        record,
        &strategy,
        &cfg.intervention_config(),
        table.as_ref(),
        cfg.seed,
        cfg.max_len,
    )?;

    let dump = build_dump(&cfg, &outcome, record, &grammar, &vocab)?;
    match &args.out {
        Some(path) => {
            write_json_pretty(path, &dump)?;
            println!("caption  {}", path.display());
        }
        None => println!("{}", serde_json::to_string_pretty(&dump)?),
    }
    println!("text: {}", dump.words.join(" "));

    if let Some(path) = &args.dump_vtacr {
        let csv = vtacr_csv(&outcome, &vocab)?;
        write_atomic(path, csv.as_bytes())?;
        println!("vtacr    {}", path.display());
    }
    Ok(())
}

use crate::pipeline::{load_model, LoadedModel};

fn load_model_from(cfg: &RunConfig) -> Result<LoadedModel> {
    load_model(Path::new(require_model_path(cfg)?))
}
