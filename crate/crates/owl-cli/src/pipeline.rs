//! Shared drivers behind the subcommands: artifact loading, bulk caption
//! generation, and the three evaluation suites. The acceptance tests reuse
//! these directly.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use owl_core::calibrate::CalibrationTable;
use owl_core::decode::{
    decode_beam, decode_dcd, decode_greedy, decode_nucleus, DcdOptions, DcdPath, DecodeOptions,
    DecodeOutcome,
};
use owl_core::evalhall::{
    chair, pope_build_split, pope_metrics_from_counts, psi, tce, ChairResult, PopeResult,
    PopeSetting, ProbeLog, TceResult,
};
use owl_core::intervene::InterventionConfig;
use owl_core::microlm::{load_checkpoint, ModelParams};
use owl_core::scenegen::{
    mention_extract, probe_prompt, special, CaptionRecord, CorpusRecord, SceneGrammar, Vocab,
};
use owl_core::tensorcore::derive_seed;

/// Weight-init standard deviation used by `owl train`.
pub const INIT_STD: f64 = 0.08;

/// Fully resolved decoding strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StrategySpec {
    Greedy,
    Nucleus { p: f64, temperature: f64 },
    Beam { width: usize },
    Dcd { path: DcdPath, sample: bool, force: bool },
}

impl StrategySpec {
    pub fn label(&self) -> String {
        match self {
            Self::Greedy => "greedy".into(),
            Self::Nucleus { .. } => "nucleus".into(),
            Self::Beam { width } => format!("beam{width}"),
            Self::Dcd { path, .. } => match path {
                DcdPath::Fused => "dcd".into(),
                DcdPath::Visual => "dcd-visual".into(),
                DcdPath::Text => "dcd-text".into(),
            },
        }
    }

    pub fn needs_calibration(&self) -> bool {
        matches!(self, Self::Dcd { .. })
    }
}

pub struct LoadedModel {
    pub params: ModelParams,
    pub hash: String,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let (params, hash) =
        load_checkpoint(path).with_context(|| format!("loading model {}", path.display()))?;
    Ok(LoadedModel { params, hash })
}

/// Decodes one scene with the given strategy. `root_seed` feeds the
/// per-scene sub-streams of the stochastic strategies.
#[allow(clippy::too_many_arguments)]
pub fn caption_one(
    params: &ModelParams,
    model_hash: &str,
    record: &CorpusRecord,
    strategy: &StrategySpec,
    icfg: &InterventionConfig,
    table: Option<&CalibrationTable>,
    root_seed: u64,
    max_len: usize,
) -> Result<DecodeOutcome> {
    let opts = DecodeOptions {
        max_len,
        eos_token: special::EOS,
        self_in_text: icfg.self_in_text,
    };
    let prompt = [special::BOS];
    let features = &record.scene.features;
    let outcome = match strategy {
        StrategySpec::Greedy => decode_greedy(params, features, &prompt, &opts)?,
        StrategySpec::Nucleus { p, temperature } => decode_nucleus(
            params,
            features,
            &prompt,
            *p,
            *temperature,
            derive_seed(root_seed, &format!("nucleus/{}", record.scene.id)),
            &opts,
        )?,
        StrategySpec::Beam { width } => decode_beam(params, features, &prompt, *width, &opts)?,
        StrategySpec::Dcd { path, sample, force } => {
            let table = table.ok_or_else(|| anyhow!("dcd decoding requires a calibration table"))?;
            let dcd_opts = DcdOptions {
                common: opts,
                path: *path,
                sample_seed: sample
                    .then(|| derive_seed(root_seed, &format!("dcd-sample/{}", record.scene.id))),
                force: *force,
            };
            decode_dcd(params, model_hash, features, &prompt, table, icfg, &dcd_opts)?
        }
    };
    Ok(outcome)
}

/// Bulk generation over the corpus, parallel with corpus-order results.
#[allow(clippy::too_many_arguments)]
pub fn caption_corpus(
    params: &ModelParams,
    model_hash: &str,
    corpus: &[CorpusRecord],
    strategy: &StrategySpec,
    icfg: &InterventionConfig,
    table: Option<&CalibrationTable>,
    root_seed: u64,
    max_len: usize,
) -> Result<Vec<DecodeOutcome>> {
    corpus
        .par_iter()
        .map(|record| {
            caption_one(
                params, model_hash, record, strategy, icfg, table, root_seed, max_len,
            )
        })
        .collect()
}

/// Exact caption record for a generated sequence: a trailing end token is
/// stripped, mentions come from the token stream, hallucinations are the
/// mentions absent from the scene.
pub fn caption_record_from_outcome(
    outcome: &DecodeOutcome,
    record: &CorpusRecord,
    vocab: &Vocab,
) -> CaptionRecord {
    let mut tokens = outcome.tokens.clone();
    if tokens.last() == Some(&special::EOS) {
        tokens.pop();
    }
    let mentioned = mention_extract(&tokens, vocab);
    let present: BTreeSet<usize> = record.scene.present.iter().copied().collect();
    let hallucinated: BTreeSet<usize> = mentioned.difference(&present).copied().collect();
    CaptionRecord {
        scene_id: record.scene.id,
        tokens,
        mentioned,
        hallucinated,
    }
}

// ---------------------------------------------------------------------------
// Log / report records
// ---------------------------------------------------------------------------

/// Per-caption log line; the CHAIR report is recomputable from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionLog {
    pub scene_id: u64,
    pub strategy: String,
    pub tokens: Vec<String>,
    pub mentioned: Vec<String>,
    pub hallucinated: Vec<String>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    pub strategy: String,
    #[serde(flatten)]
    pub result: ChairResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TceLog {
    pub scene_id: u64,
    pub h_baseline: f64,
    pub h_intervened: f64,
    pub psi: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TceReport {
    pub baseline: String,
    pub intervened: String,
    #[serde(flatten)]
    pub result: TceResult,
}

pub fn caption_log(
    record: &CaptionRecord,
    strategy: &str,
    grammar: &SceneGrammar,
    vocab: &Vocab,
) -> Result<CaptionLog> {
    let names = |set: &BTreeSet<usize>| -> Vec<String> {
        set.iter().map(|&o| grammar.objects[o].clone()).collect()
    };
    Ok(CaptionLog {
        scene_id: record.scene_id,
        strategy: strategy.to_string(),
        tokens: vocab
            .decode(&record.tokens)
            .map_err(|e| anyhow!("decoding caption tokens: {e}"))?,
        mentioned: names(&record.mentioned),
        hallucinated: names(&record.hallucinated),
        len: record.tokens.len(),
    })
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

pub struct ChairSuite {
    pub report: ChairReport,
    pub logs: Vec<CaptionLog>,
    pub records: Vec<CaptionRecord>,
    pub outcomes: Vec<DecodeOutcome>,
}

#[allow(clippy::too_many_arguments)]
pub fn chair_suite(
    params: &ModelParams,
    model_hash: &str,
    corpus: &[CorpusRecord],
    grammar: &SceneGrammar,
    strategy: &StrategySpec,
    icfg: &InterventionConfig,
    table: Option<&CalibrationTable>,
    root_seed: u64,
    max_len: usize,
) -> Result<ChairSuite> {
    let vocab = Vocab::from_grammar(grammar);
    let outcomes = caption_corpus(
        params, model_hash, corpus, strategy, icfg, table, root_seed, max_len,
    )?;
    let records: Vec<CaptionRecord> = outcomes
        .iter()
        .zip(corpus)
        .map(|(o, r)| caption_record_from_outcome(o, r, &vocab))
        .collect();
    let label = strategy.label();
    let logs: Vec<CaptionLog> = records
        .iter()
        .map(|r| caption_log(r, &label, grammar, &vocab))
        .collect::<Result<_>>()?;
    let result = chair(&records)?;
    Ok(ChairSuite {
        report: ChairReport {
            strategy: label,
            result,
        },
        logs,
        records,
        outcomes,
    })
}

pub struct TceSuite {
    pub report: TceReport,
    pub logs: Vec<TceLog>,
}

#[allow(clippy::too_many_arguments)]
pub fn tce_suite(
    params: &ModelParams,
    model_hash: &str,
    corpus: &[CorpusRecord],
    grammar: &SceneGrammar,
    intervened: &StrategySpec,
    icfg: &InterventionConfig,
    table: Option<&CalibrationTable>,
    root_seed: u64,
    max_len: usize,
) -> Result<TceSuite> {
    let vocab = Vocab::from_grammar(grammar);
    let baseline = StrategySpec::Greedy;
    let base_outcomes = caption_corpus(
        params, model_hash, corpus, &baseline, icfg, None, root_seed, max_len,
    )?;
    let int_outcomes = caption_corpus(
        params, model_hash, corpus, intervened, icfg, table, root_seed, max_len,
    )?;
    let pairs: Vec<(CaptionRecord, CaptionRecord)> = base_outcomes
        .iter()
        .zip(&int_outcomes)
        .zip(corpus)
        .map(|((b, i), r)| {
            (
                caption_record_from_outcome(b, r, &vocab),
                caption_record_from_outcome(i, r, &vocab),
            )
        })
        .collect();
    let result = tce(&pairs, CaptionRecord::hallucination_ratio)?;
    let logs: Vec<TceLog> = pairs
        .iter()
        .zip(corpus)
        .map(|((b, i), r)| {
            let hb = b.hallucination_ratio();
            let hi = i.hallucination_ratio();
            TceLog {
                scene_id: r.scene.id,
                h_baseline: hb,
                h_intervened: hi,
                psi: psi(hb, hi),
            }
        })
        .collect();
    Ok(TceSuite {
        report: TceReport {
            baseline: baseline.label(),
            intervened: intervened.label(),
            result,
        },
        logs,
    })
}

/// Maps the answer token of a presence probe onto yes/no; anything other
/// than the two answer tokens counts as "no" and is flagged.
fn probe_answer(token: u32) -> (bool, bool) {
    match token {
        special::YES => (true, false),
        special::NO => (false, false),
        _ => (false, true),
    }
}

/// Strategy-aware presence probing: the probe prompt is decoded for one
/// token with the same strategy used for captions.
#[allow(clippy::too_many_arguments)]
pub fn pope_suite(
    params: &ModelParams,
    model_hash: &str,
    corpus: &[CorpusRecord],
    grammar: &SceneGrammar,
    setting: PopeSetting,
    strategy: &StrategySpec,
    icfg: &InterventionConfig,
    table: Option<&CalibrationTable>,
    root_seed: u64,
) -> Result<(PopeResult, Vec<ProbeLog>)> {
    let vocab = Vocab::from_grammar(grammar);
    let split = pope_build_split(
        corpus,
        setting,
        grammar.objects.len(),
        derive_seed(root_seed, "pope-split"),
    );
    let scene_by_id: std::collections::HashMap<u64, &CorpusRecord> =
        corpus.iter().map(|r| (r.scene.id, r)).collect();

    let answers: Vec<Result<(bool, bool)>> = split
        .items
        .par_iter()
        .map(|item| {
            let record = scene_by_id
                .get(&item.scene_id)
                .ok_or_else(|| anyhow!("scene {} missing from corpus", item.scene_id))?;
            let mut prompt = vec![special::BOS];
            prompt.extend(probe_prompt(&vocab, item.object));
            let opts = DecodeOptions {
                max_len: 1,
                eos_token: special::EOS,
                self_in_text: icfg.self_in_text,
            };
            let outcome = match strategy {
                StrategySpec::Greedy => {
                    decode_greedy(params, &record.scene.features, &prompt, &opts)?
                }
                StrategySpec::Nucleus { p, temperature } => decode_nucleus(
                    params,
                    &record.scene.features,
                    &prompt,
                    *p,
                    *temperature,
                    derive_seed(
                        root_seed,
                        &format!("pope/{}/{}", item.scene_id, item.object),
                    ),
                    &opts,
                )?,
                StrategySpec::Beam { width } => {
                    decode_beam(params, &record.scene.features, &prompt, *width, &opts)?
                }
                StrategySpec::Dcd { path, force, .. } => {
                    let table =
                        table.ok_or_else(|| anyhow!("dcd probing requires a calibration table"))?;
                    let dcd_opts = DcdOptions {
                        common: opts,
                        path: *path,
                        sample_seed: None,
                        force: *force,
                    };
                    decode_dcd(
                        params,
                        model_hash,
                        &record.scene.features,
                        &prompt,
                        table,
                        icfg,
                        &dcd_opts,
                    )?
                }
            };
            Ok(probe_answer(outcome.tokens[0]))
        })
        .collect();

    let mut logs = Vec::with_capacity(split.items.len());
    let (mut tp, mut fp, mut tn, mut fneg, mut flagged) = (0, 0, 0, 0, 0);
    for (item, answer) in split.items.iter().zip(answers) {
        let (yes, flag) = answer?;
        match (item.label, yes) {
            (true, true) => tp += 1,
            (true, false) => fneg += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
        if flag {
            flagged += 1;
        }
        logs.push(ProbeLog {
            scene_id: item.scene_id,
            object: grammar.objects[item.object].clone(),
            label: item.label,
            answered_yes: yes,
            flagged: flag,
        });
    }
    Ok((
        pope_metrics_from_counts(setting.name(), tp, fp, tn, fneg, flagged),
        logs,
    ))
}

/// Loads and fingerprint-checks the calibration table when the strategy
/// needs one.
pub fn load_table_if_needed(
    strategy: &StrategySpec,
    calibration: Option<&str>,
    model_hash: &str,
    force: bool,
) -> Result<Option<CalibrationTable>> {
    if !strategy.needs_calibration() {
        return Ok(None);
    }
    let Some(path) = calibration else {
        bail!("strategy {} requires --calib", strategy.label());
    };
    let table = CalibrationTable::load_json(Path::new(path))
        .with_context(|| format!("loading calibration table {path}"))?;
    if !force {
        table.verify_model(model_hash)?;
    } else if table.model_hash != model_hash {
        eprintln!(
            "warning: calibration table was fitted for model {} but decoding model {model_hash} (forced)",
            table.model_hash
        );
    }
    if !table.reliable {
        eprintln!(
            "warning: calibration table is marked unreliable (a layer had fewer than {} samples)",
            table.min_samples
        );
    }
    Ok(Some(table))
}
