//! Hallucination metrics: CHAIR (sentence- and instance-level), binary
//! object-presence probing with random/popular/adversarial negatives, and
//! pairwise causal-effect scores over baseline/intervened generation pairs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::CollectorDecoder;
use crate::decode::{decode_greedy, decode_nucleus, DecodeError, DecodeOptions};
use crate::microlm::ModelParams;
use crate::scenegen::{
    probe_prompt, special, CaptionRecord, CorpusRecord, Scene, SceneGrammar, Vocab,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no captions to score")]
    NoCaptions,
    #[error("no pairs to score")]
    NoPairs,
    #[error("object index {0} outside grammar vocabulary of size {1}")]
    ObjectNotInGrammar(usize, usize),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("empty sample in rank test")]
    EmptyRankSample,
}

pub type Result<T> = std::result::Result<T, EvalError>;

// ---------------------------------------------------------------------------
// CHAIR
// ---------------------------------------------------------------------------

/// Corpus-level hallucination rates. `chair_i` pools counts across the
/// corpus (ratio of sums, not a mean of per-caption ratios); `chair_s` is
/// the fraction of captions with at least one hallucinated mention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairResult {
    pub chair_s: f64,
    pub chair_i: f64,
    pub avg_len: f64,
    pub n_captions: usize,
    /// Set when the corpus mentioned nothing at all and `chair_i` was
    /// defined as 0.
    pub zero_mention_warning: bool,
}

pub fn chair(records: &[CaptionRecord]) -> Result<ChairResult> {
    if records.is_empty() {
        return Err(EvalError::NoCaptions);
    }
    let n = records.len();
    let total_mentioned: usize = records.iter().map(|r| r.mentioned.len()).sum();
    let total_hallucinated: usize = records.iter().map(|r| r.hallucinated.len()).sum();
    let with_hallucination = records.iter().filter(|r| !r.hallucinated.is_empty()).count();
    let total_tokens: usize = records.iter().map(|r| r.tokens.len()).sum();
    let zero_mention_warning = total_mentioned == 0;
    let chair_i = if zero_mention_warning {
        0.0
    } else {
        total_hallucinated as f64 / total_mentioned as f64
    };
    Ok(ChairResult {
        chair_s: with_hallucination as f64 / n as f64,
        chair_i,
        avg_len: total_tokens as f64 / n as f64,
        n_captions: n,
        zero_mention_warning,
    })
}

// ---------------------------------------------------------------------------
// Presence probing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeSetting {
    Random,
    Popular,
    Adversarial,
}

impl PopeSetting {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Popular => "popular",
            Self::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeItem {
    pub scene_id: u64,
    pub object: usize,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeSplit {
    pub setting: PopeSetting,
    pub items: Vec<PopeItem>,
    /// Scenes skipped because their absent-object set was empty.
    pub skipped_scenes: usize,
}

/// Builds a balanced probe split: every present object is a positive, and
/// each positive is paired with one absent-object negative chosen by the
/// setting (uniform / corpus-frequency / max co-occurrence with the
/// present set). Negatives are distinct within a scene.
pub fn pope_build_split(
    corpus: &[CorpusRecord],
    setting: PopeSetting,
    n_objects: usize,
    seed: u64,
) -> PopeSplit {
    use crate::tensorcore::Rng;

    // Corpus-wide statistics over scene ground truth.
    let mut freq = vec![0usize; n_objects];
    let mut cooc = vec![vec![0usize; n_objects]; n_objects];
    for record in corpus {
        for &a in &record.scene.present {
            freq[a] += 1;
            for &b in &record.scene.present {
                if a != b {
                    cooc[a][b] += 1;
                }
            }
        }
    }

    let mut items = Vec::new();
    let mut skipped_scenes = 0usize;
    for record in corpus {
        let scene = &record.scene;
        let absent: Vec<usize> = (0..n_objects)
            .filter(|o| !scene.present.contains(o))
            .collect();
        if absent.is_empty() {
            skipped_scenes += 1;
            continue;
        }
        let mut rng = Rng::derive(seed, &format!("pope/{}/{}", setting.name(), scene.id));
        let mut used = Vec::new();
        for &pos in &scene.present {
            items.push(PopeItem {
                scene_id: scene.id,
                object: pos,
                label: true,
            });
            let available: Vec<usize> = absent
                .iter()
                .copied()
                .filter(|o| !used.contains(o))
                .collect();
            let pool = if available.is_empty() { &absent } else { &available };
            let neg = match setting {
                PopeSetting::Random => pool[rng.gen_range(pool.len())],
                PopeSetting::Popular => {
                    let mut best = pool[0];
                    for &o in pool {
                        if freq[o] > freq[best] {
                            best = o;
                        }
                    }
                    best
                }
                PopeSetting::Adversarial => {
                    let score = |o: usize| {
                        scene
                            .present
                            .iter()
                            .map(|&p| cooc[o][p])
                            .max()
                            .unwrap_or(0)
                    };
                    let mut best = pool[0];
                    for &o in pool {
                        if score(o) > score(best) {
                            best = o;
                        }
                    }
                    best
                }
            };
            used.push(neg);
            items.push(PopeItem {
                scene_id: scene.id,
                object: neg,
                label: false,
            });
        }
    }
    PopeSplit {
        setting,
        items,
        skipped_scenes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeAnswer {
    pub yes: bool,
    /// The model's top token was neither answer token; counted as "no".
    pub flagged: bool,
}

/// Asks "is there a <object> in the image ?" and decodes one answer token.
pub fn pope_probe(
    params: &ModelParams,
    scene: &Scene,
    object: usize,
    grammar: &SceneGrammar,
    decoder: CollectorDecoder,
    opts: &DecodeOptions,
) -> Result<ProbeAnswer> {
    if object >= grammar.objects.len() {
        return Err(EvalError::ObjectNotInGrammar(object, grammar.objects.len()));
    }
    let vocab = Vocab::from_grammar(grammar);
    let mut prompt = vec![special::BOS];
    prompt.extend(probe_prompt(&vocab, object));
    let one = DecodeOptions {
        max_len: 1,
        ..opts.clone()
    };
    let outcome = match decoder {
        CollectorDecoder::Greedy => decode_greedy(params, &scene.features, &prompt, &one)?,
        CollectorDecoder::Nucleus { p, temperature } => decode_nucleus(
            params,
            &scene.features,
            &prompt,
            p,
            temperature,
            scene.id ^ object as u64,
            &one,
        )?,
    };
    let token = outcome.tokens[0];
    Ok(match token {
        special::YES => ProbeAnswer {
            yes: true,
            flagged: false,
        },
        special::NO => ProbeAnswer {
            yes: false,
            flagged: false,
        },
        _ => ProbeAnswer {
            yes: false,
            flagged: true,
        },
    })
}

/// One probe's dumped outcome, sufficient to recount the metrics exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeLog {
    pub scene_id: u64,
    pub object: String,
    pub label: bool,
    pub answered_yes: bool,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeResult {
    pub setting: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
    pub flagged: usize,
}

/// Recomputes the metric block from a confusion count; this is the single
/// source of truth for both evaluation and recounting.
pub fn pope_metrics_from_counts(
    setting: &str,
    true_pos: usize,
    false_pos: usize,
    true_neg: usize,
    false_neg: usize,
    flagged: usize,
) -> PopeResult {
    let total = (true_pos + false_pos + true_neg + false_neg) as f64;
    let accuracy = if total > 0.0 {
        (true_pos + true_neg) as f64 / total
    } else {
        0.0
    };
    let precision = if true_pos + false_pos > 0 {
        true_pos as f64 / (true_pos + false_pos) as f64
    } else {
        0.0
    };
    let recall = if true_pos + false_neg > 0 {
        true_pos as f64 / (true_pos + false_neg) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    PopeResult {
        setting: setting.to_string(),
        accuracy,
        precision,
        recall,
        f1,
        true_pos,
        false_pos,
        true_neg,
        false_neg,
        flagged,
    }
}

/// Runs every probe in the split (in parallel, id-ordered reduction) and
/// returns the metrics plus the per-probe log.
pub fn pope_eval(
    params: &ModelParams,
    corpus: &[CorpusRecord],
    split: &PopeSplit,
    grammar: &SceneGrammar,
    decoder: CollectorDecoder,
    opts: &DecodeOptions,
) -> Result<(PopeResult, Vec<ProbeLog>)> {
    let scene_by_id: std::collections::HashMap<u64, &Scene> =
        corpus.iter().map(|r| (r.scene.id, &r.scene)).collect();
    let answers: Vec<Result<ProbeAnswer>> = split
        .items
        .par_iter()
        .map(|item| {
            let scene = scene_by_id
                .get(&item.scene_id)
                .expect("split scene missing from corpus");
            pope_probe(params, scene, item.object, grammar, decoder, opts)
        })
        .collect();

    let mut logs = Vec::with_capacity(split.items.len());
    let (mut tp, mut fp, mut tn, mut fneg, mut flagged) = (0, 0, 0, 0, 0);
    for (item, answer) in split.items.iter().zip(answers) {
        let answer = answer?;
        match (item.label, answer.yes) {
            (true, true) => tp += 1,
            (true, false) => fneg += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
        if answer.flagged {
            flagged += 1;
        }
        logs.push(ProbeLog {
            scene_id: item.scene_id,
            object: grammar.objects[item.object].clone(),
            label: item.label,
            answered_yes: answer.yes,
            flagged: answer.flagged,
        });
    }
    Ok((
        pope_metrics_from_counts(split.setting.name(), tp, fp, tn, fneg, flagged),
        logs,
    ))
}

// ---------------------------------------------------------------------------
// Pairwise causal effect
// ---------------------------------------------------------------------------

/// Pairwise improvement indicator: `+1` when the hallucination score
/// strictly dropped, `-1` otherwise (ties count as not reduced).
pub fn psi(h_before: f64, h_after: f64) -> i32 {
    2 * i32::from(h_before > h_after) - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TceResult {
    pub tce: f64,
    pub n_pairs: usize,
    pub improved: usize,
}

/// Mean of [`psi`] over `(baseline, intervened)` pairs scored by `scorer`.
pub fn tce<T>(pairs: &[(T, T)], scorer: impl Fn(&T) -> f64) -> Result<TceResult> {
    if pairs.is_empty() {
        return Err(EvalError::NoPairs);
    }
    let mut sum = 0i64;
    let mut improved = 0usize;
    for (before, after) in pairs {
        let p = psi(scorer(before), scorer(after));
        sum += p as i64;
        if p > 0 {
            improved += 1;
        }
    }
    Ok(TceResult {
        tce: sum as f64 / pairs.len() as f64,
        n_pairs: pairs.len(),
        improved,
    })
}

// ---------------------------------------------------------------------------
// Rank test
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MannWhitney {
    pub u: f64,
    pub z: f64,
    pub p_value: f64,
    pub n_x: usize,
    pub n_y: usize,
}

/// One-sided Mann-Whitney U test with the alternative "x stochastically
/// less than y", normal approximation with tie correction and continuity
/// correction.
pub fn mann_whitney_less(xs: &[f64], ys: &[f64]) -> Result<MannWhitney> {
    use statrs::distribution::{ContinuousCDF, Normal};

    if xs.is_empty() || ys.is_empty() {
        return Err(EvalError::EmptyRankSample);
    }
    let n_x = xs.len();
    let n_y = ys.len();
    let n = n_x + n_y;

    let mut combined: Vec<(f64, bool)> = xs
        .iter()
        .map(|&v| (v, true))
        .chain(ys.iter().map(|&v| (v, false)))
        .collect();
    combined.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite samples"));

    // Midranks over tie groups.
    let mut rank_sum_x = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && combined[j + 1].0 == combined[i].0 {
            j += 1;
        }
        let count = (j - i + 1) as f64;
        let midrank = (i + j + 2) as f64 / 2.0;
        for item in &combined[i..=j] {
            if item.1 {
                rank_sum_x += midrank;
            }
        }
        tie_term += count * count * count - count;
        i = j + 1;
    }

    let u = rank_sum_x - (n_x * (n_x + 1)) as f64 / 2.0;
    let mean = (n_x * n_y) as f64 / 2.0;
    let nf = n as f64;
    let var = (n_x * n_y) as f64 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if var <= 0.0 {
        // All values identical: no evidence either way.
        return Ok(MannWhitney {
            u,
            z: 0.0,
            p_value: 0.5,
            n_x,
            n_y,
        });
    }
    let z = (u - mean + 0.5) / var.sqrt();
    let p_value = Normal::new(0.0, 1.0).unwrap().cdf(z);
    Ok(MannWhitney {
        u,
        z,
        p_value,
        n_x,
        n_y,
    })
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}
