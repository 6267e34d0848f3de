//! Baseline decoders (greedy, nucleus, beam) and the dual-path contrastive
//! decoding (DCD) loop.
//!
//! DCD runs three forward passes per emitted token:
//!
//! 1. a probe pass with no hook, measuring the step's per-layer VTACR at
//!    the current position,
//! 2. a visual-favored pass whose hooks boost visual attention with the
//!    coefficients derived from that profile,
//! 3. a text-favored pass whose hooks amplify textual reliance.
//!
//! The two paths' distributions are fused as
//! `softmax((1+lambda) * log p_vis - lambda * log p_text)` and the next
//! token comes from the fused distribution. The probe state is the only
//! one kept across steps, so history feeds back hook-free and identically
//! into both paths.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::CalibrationTable;
use crate::intervene::{
    rewrite_rows_text_favored, rewrite_rows_visual_favored, step_coefficients, InterveneError,
    InterventionConfig, LayerCoefficients,
};
use crate::microlm::{
    forward_step, AttentionHook, AttnRows, DecodeState, ModelError, ModelParams,
};
use crate::tensorcore::{softmax_row, Matrix, Rng, TensorError};
use crate::vtacr::{profile_step, TokenPartition, VtacrError, VtacrProfile};

/// Tokens kept in each step's distribution summary.
pub const TOP_K: usize = 8;

/// Probability floor applied before taking logs in the contrastive fusion.
pub const PROB_FLOOR: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vtacr(#[from] VtacrError),
    #[error(transparent)]
    Intervene(#[from] InterveneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("nucleus p {0} outside (0, 1]")]
    InvalidNucleusP(f64),
    #[error("temperature {0} must be positive")]
    InvalidTemperature(f64),
    #[error("beam width must be >= 1")]
    InvalidBeamWidth,
    #[error("log-prob vectors have lengths {a} and {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("calibration table was fitted for model {expected} but decoding model {actual}; pass force to override")]
    FingerprintMismatch { expected: String, actual: String },
    #[error("prompt must contain at least one token")]
    EmptyPrompt,
}

pub type Result<T> = std::result::Result<T, DecodeError>;

/// Options shared by every strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub max_len: usize,
    pub eos_token: u32,
    pub self_in_text: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            max_len: 64,
            eos_token: crate::scenegen::special::EOS,
            self_in_text: true,
        }
    }
}

/// Which distribution the DCD loop selects from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DcdPath {
    /// Contrastive fusion of both paths (the full method).
    Fused,
    /// Visual-favored path only (single-path ablation).
    Visual,
    /// Text-favored path only (single-path ablation).
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcdOptions {
    pub common: DecodeOptions,
    pub path: DcdPath,
    /// Sample from the fused distribution instead of taking the argmax.
    pub sample_seed: Option<u64>,
    /// Skip the calibration fingerprint check.
    pub force: bool,
}

impl Default for DcdOptions {
    fn default() -> Self {
        Self {
            common: DecodeOptions::default(),
            path: DcdPath::Fused,
            sample_seed: None,
            force: false,
        }
    }
}

/// Per-step diagnostics: the emitted token, a top-k summary (token,
/// log-prob) of the selection distribution, the probe VTACR profile, and
/// the effective coefficients when intervention ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiag {
    pub token: u32,
    pub top_k: Vec<(u32, f64)>,
    pub profile: VtacrProfile,
    pub coeffs: Option<LayerCoefficients>,
}

/// One generation. `steps` has exactly one entry per emitted token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutcome {
    pub tokens: Vec<u32>,
    pub steps: Vec<StepDiag>,
    pub strategy: String,
    pub seed: u64,
    /// Forward passes spent inside the generation loop (3 per token for
    /// fused DCD: probe, visual, text).
    pub generation_passes: usize,
}

fn argmax_lowest_id(values: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}

fn top_k_log_probs(probs: &[f64]) -> Vec<(u32, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .expect("finite probabilities")
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(TOP_K)
        .map(|i| (i as u32, probs[i].max(1e-300).ln()))
        .collect()
}

/// Pushes the prompt and materializes every position except the last, so
/// the generation loop always works on exactly one pending position.
fn prime_state(
    params: &ModelParams,
    features: &Matrix,
    prompt: &[u32],
) -> Result<DecodeState> {
    if prompt.is_empty() {
        return Err(DecodeError::EmptyPrompt);
    }
    let mut state = DecodeState::new(params, features.clone())?;
    for &t in &prompt[..prompt.len() - 1] {
        state.push_token(t);
    }
    if state.seq_len() > state.cached_len() {
        forward_step(params, &mut state, None)?;
    }
    state.push_token(prompt[prompt.len() - 1]);
    Ok(state)
}

// ---------------------------------------------------------------------------
// Greedy
// ---------------------------------------------------------------------------

/// Argmax decoding; ties break toward the lowest token id.
pub fn decode_greedy(
    params: &ModelParams,
    features: &Matrix,
    prompt: &[u32],
    opts: &DecodeOptions,
) -> Result<DecodeOutcome> {
    let mut state = prime_state(params, features, prompt)?;
    let mut tokens = Vec::new();
    let mut steps = Vec::new();
    let mut passes = 0usize;
    for step in 0..opts.max_len {
        let out = forward_step(params, &mut state, None)?;
        passes += 1;
        let part = state.partition(opts.self_in_text);
        let mut profile = profile_step(&out.records, &part)?;
        let probs = softmax_row(&out.logits)?;
        let token = argmax_lowest_id(&out.logits);
        profile.step = step;
        profile.token = token;
        steps.push(StepDiag {
            token,
            top_k: top_k_log_probs(&probs),
            profile,
            coeffs: None,
        });
        tokens.push(token);
        state.push_token(token);
        if token == opts.eos_token {
            break;
        }
    }
    Ok(DecodeOutcome {
        tokens,
        steps,
        strategy: "greedy".into(),
        seed: 0,
        generation_passes: passes,
    })
}

// ---------------------------------------------------------------------------
// Nucleus
// ---------------------------------------------------------------------------

/// Top-p sampling: smallest probability-sorted prefix with mass >= p,
/// renormalized, seeded.
pub fn decode_nucleus(
    params: &ModelParams,
    features: &Matrix,
    prompt: &[u32],
    p: f64,
    temperature: f64,
    seed: u64,
    opts: &DecodeOptions,
) -> Result<DecodeOutcome> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(DecodeError::InvalidNucleusP(p));
    }
    if !(temperature > 0.0) {
        return Err(DecodeError::InvalidTemperature(temperature));
    }
    let mut rng = Rng::derive(seed, "decode/nucleus");
    let mut state = prime_state(params, features, prompt)?;
    let mut tokens = Vec::new();
    let mut steps = Vec::new();
    let mut passes = 0usize;
    for step in 0..opts.max_len {
        let out = forward_step(params, &mut state, None)?;
        passes += 1;
        let part = state.partition(opts.self_in_text);
        let mut profile = profile_step(&out.records, &part)?;
        let scaled: Vec<f64> = out.logits.iter().map(|l| l / temperature).collect();
        let probs = softmax_row(&scaled)?;

        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| {
            probs[b]
                .partial_cmp(&probs[a])
                .expect("finite probabilities")
                .then(a.cmp(&b))
        });
        let mut cut = order.len();
        let mut cum = 0.0;
        for (rank, &idx) in order.iter().enumerate() {
            cum += probs[idx];
            if cum >= p {
                cut = rank + 1;
                break;
            }
        }
        let nucleus = &order[..cut];
        let weights: Vec<f64> = nucleus.iter().map(|&i| probs[i]).collect();
        let pick = rng
            .choose_weighted(&weights)
            .expect("nucleus has positive mass");
        let token = nucleus[pick] as u32;

        profile.step = step;
        profile.token = token;
        steps.push(StepDiag {
            token,
            top_k: top_k_log_probs(&probs),
            profile,
            coeffs: None,
        });
        tokens.push(token);
        state.push_token(token);
        if token == opts.eos_token {
            break;
        }
    }
    Ok(DecodeOutcome {
        tokens,
        steps,
        strategy: "nucleus".into(),
        seed,
        generation_passes: passes,
    })
}

// ---------------------------------------------------------------------------
// Beam search
// ---------------------------------------------------------------------------

/// Abstract one-step sequence model so the beam core can be exercised
/// against hand-built distributions.
pub trait StepModel {
    type State: Clone;
    fn start(&self) -> Result<Self::State>;
    /// Log-probs for the next token; materializes any pending input.
    fn step_log_probs(&self, state: &mut Self::State) -> Result<Vec<f64>>;
    fn push_token(&self, state: &mut Self::State, token: u32);
}

struct MicroStepModel<'a> {
    params: &'a ModelParams,
    features: &'a Matrix,
    prompt: &'a [u32],
}

impl StepModel for MicroStepModel<'_> {
    type State = DecodeState;

    fn start(&self) -> Result<DecodeState> {
        prime_state(self.params, self.features, self.prompt)
    }

    fn step_log_probs(&self, state: &mut DecodeState) -> Result<Vec<f64>> {
        let out = forward_step(self.params, state, None)?;
        let probs = softmax_row(&out.logits)?;
        Ok(probs.iter().map(|&p| p.max(1e-300).ln()).collect())
    }

    fn push_token(&self, state: &mut DecodeState, token: u32) {
        state.push_token(token);
    }
}

struct Hypothesis<S> {
    state: S,
    tokens: Vec<u32>,
    score: f64,
}

/// Length-normalized beam search over any [`StepModel`]. Ties break by
/// (candidate score, source beam index, token id) so results are
/// deterministic; `width == 1` reproduces greedy decoding exactly.
pub fn beam_search<M: StepModel>(
    model: &M,
    width: usize,
    max_len: usize,
    eos: u32,
) -> Result<Vec<u32>> {
    if width == 0 {
        return Err(DecodeError::InvalidBeamWidth);
    }
    let mut live = vec![Hypothesis {
        state: model.start()?,
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();

    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
        let mut stepped: Vec<Hypothesis<M::State>> = Vec::new();
        for (bi, mut hyp) in live.drain(..).enumerate() {
            let lp = model.step_log_probs(&mut hyp.state)?;
            for (tok, &l) in lp.iter().enumerate() {
                candidates.push((bi, tok as u32, hyp.score + l));
            }
            stepped.push(hyp);
        }
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .expect("finite scores")
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        for &(bi, tok, score) in candidates.iter().take(width) {
            let mut tokens = stepped[bi].tokens.clone();
            tokens.push(tok);
            if tok == eos {
                finished.push((tokens, score));
            } else {
                let mut state = stepped[bi].state.clone();
                model.push_token(&mut state, tok);
                live.push(Hypothesis {
                    state,
                    tokens,
                    score,
                });
            }
        }
    }
    for hyp in live {
        finished.push((hyp.tokens, hyp.score));
    }

    let norm = |t: &Vec<u32>, s: f64| s / t.len().max(1) as f64;
    finished.sort_by(|a, b| {
        norm(&b.0, b.1)
            .partial_cmp(&norm(&a.0, a.1))
            .expect("finite scores")
            .then(a.0.cmp(&b.0))
    });
    Ok(finished.into_iter().next().map(|(t, _)| t).unwrap_or_default())
}

/// Beam decoding over the transformer; the winning sequence is replayed
/// through a forced pass to collect per-step diagnostics.
pub fn decode_beam(
    params: &ModelParams,
    features: &Matrix,
    prompt: &[u32],
    width: usize,
    opts: &DecodeOptions,
) -> Result<DecodeOutcome> {
    let model = MicroStepModel {
        params,
        features,
        prompt,
    };
    let tokens = beam_search(&model, width, opts.max_len, opts.eos_token)?;

    // Forced replay for diagnostics.
    let mut state = prime_state(params, features, prompt)?;
    let mut steps = Vec::new();
    let mut passes = 0usize;
    for (step, &token) in tokens.iter().enumerate() {
        let out = forward_step(params, &mut state, None)?;
        passes += 1;
        let part = state.partition(opts.self_in_text);
        let mut profile = profile_step(&out.records, &part)?;
        let probs = softmax_row(&out.logits)?;
        profile.step = step;
        profile.token = token;
        steps.push(StepDiag {
            token,
            top_k: top_k_log_probs(&probs),
            profile,
            coeffs: None,
        });
        state.push_token(token);
    }
    Ok(DecodeOutcome {
        tokens,
        steps,
        strategy: format!("beam{width}"),
        seed: 0,
        generation_passes: passes,
    })
}

/// Total log-probability of `tokens` under forced decoding, for comparing
/// strategies under identical normalization.
pub fn sequence_log_prob(
    params: &ModelParams,
    features: &Matrix,
    prompt: &[u32],
    tokens: &[u32],
) -> Result<f64> {
    let mut state = prime_state(params, features, prompt)?;
    let mut total = 0.0;
    for &token in tokens {
        let out = forward_step(params, &mut state, None)?;
        let probs = softmax_row(&out.logits)?;
        total += probs[token as usize].max(1e-300).ln();
        state.push_token(token);
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Dual-path contrastive decoding
// ---------------------------------------------------------------------------

/// Contrastive fusion: `softmax((1+lambda) * logp_vis - lambda * logp_text)`.
pub fn dcd_fuse(logp_vis: &[f64], logp_text: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if logp_vis.len() != logp_text.len() {
        return Err(DecodeError::LengthMismatch {
            a: logp_vis.len(),
            b: logp_text.len(),
        });
    }
    let fused: Vec<f64> = logp_vis
        .iter()
        .zip(logp_text)
        .map(|(&lv, &lt)| (1.0 + lambda) * lv - lambda * lt)
        .collect();
    Ok(softmax_row(&fused)?)
}

fn floored_log_probs(probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|&p| p.max(PROB_FLOOR).ln()).collect()
}

struct PathHook<'a> {
    part: &'a TokenPartition,
    coeffs: &'a LayerCoefficients,
    visual_favored: bool,
    renormalize: bool,
}

impl AttentionHook for PathHook<'_> {
    fn rewrite(&mut self, layer: usize, rows: &mut AttnRows) -> std::result::Result<(), ModelError> {
        let c = &self.coeffs.layers[layer];
        let result = if self.visual_favored {
            rewrite_rows_visual_favored(rows, self.part, c.alpha_eff, c.beta_eff, self.renormalize)
        } else {
            rewrite_rows_text_favored(rows, self.part, c.alpha_eff, c.beta_eff, self.renormalize)
        };
        result.map_err(|e| ModelError::Checkpoint(format!("attention rewrite failed: {e}")))
    }

    fn allows_unnormalized(&self) -> bool {
        !self.renormalize
    }
}

/// The full DCD loop. Per emitted token: hook-free probe (kept as the
/// canonical state), VTACR-derived coefficients, visual- and text-favored
/// passes on forks of the pre-probe state, contrastive fusion, greedy pick
/// (or seeded sampling). Errors out when the calibration table was fitted
/// for a different checkpoint, unless `force` is set.
pub fn decode_dcd(
    params: &ModelParams,
    model_hash: &str,
    features: &Matrix,
    prompt: &[u32],
    table: &CalibrationTable,
    config: &InterventionConfig,
    opts: &DcdOptions,
) -> Result<DecodeOutcome> {
    if !opts.force && table.model_hash != model_hash {
        return Err(DecodeError::FingerprintMismatch {
            expected: table.model_hash.clone(),
            actual: model_hash.to_string(),
        });
    }
    config.validate()?;
    let mut rng = opts.sample_seed.map(|s| Rng::derive(s, "decode/dcd"));

    let mut state = prime_state(params, features, prompt)?;
    let mut tokens = Vec::new();
    let mut steps = Vec::new();
    let mut passes = 0usize;

    for step in 0..opts.common.max_len {
        let fork_vis = matches!(opts.path, DcdPath::Fused | DcdPath::Visual)
            .then(|| state.clone());
        let fork_text = matches!(opts.path, DcdPath::Fused | DcdPath::Text)
            .then(|| state.clone());

        let probe = forward_step(params, &mut state, None)?;
        passes += 1;
        let part = state.partition(config.self_in_text);
        let mut profile = profile_step(&probe.records, &part)?;
        let coeffs = step_coefficients(&profile, table, config)?;

        let mut run_path = |fork: Option<DecodeState>, visual: bool| -> Result<Option<Vec<f64>>> {
            let Some(mut fork_state) = fork else {
                return Ok(None);
            };
            let mut hook = PathHook {
                part: &part,
                coeffs: &coeffs,
                visual_favored: visual,
                renormalize: config.renormalize,
            };
            let out = forward_step(params, &mut fork_state, Some(&mut hook))?;
            passes += 1;
            Ok(Some(out.logits))
        };
        let vis_logits = run_path(fork_vis, true)?;
        let text_logits = run_path(fork_text, false)?;

        let dist = match opts.path {
            DcdPath::Fused => {
                let pv = softmax_row(vis_logits.as_ref().expect("visual path ran"))?;
                let pt = softmax_row(text_logits.as_ref().expect("text path ran"))?;
                dcd_fuse(
                    &floored_log_probs(&pv),
                    &floored_log_probs(&pt),
                    config.lambda,
                )?
            }
            DcdPath::Visual => softmax_row(vis_logits.as_ref().expect("visual path ran"))?,
            DcdPath::Text => softmax_row(text_logits.as_ref().expect("text path ran"))?,
        };

        let token = match rng.as_mut() {
            Some(rng) => rng
                .choose_weighted(&dist)
                .expect("distribution has positive mass") as u32,
            None => argmax_lowest_id(&dist),
        };

        profile.step = step;
        profile.token = token;
        steps.push(StepDiag {
            token,
            top_k: top_k_log_probs(&dist),
            profile,
            coeffs: Some(coeffs),
        });
        tokens.push(token);
        state.push_token(token);
        if token == opts.common.eos_token {
            break;
        }
    }

    let strategy = match opts.path {
        DcdPath::Fused => "dcd",
        DcdPath::Visual => "dcd-visual",
        DcdPath::Text => "dcd-text",
    };
    Ok(DecodeOutcome {
        tokens,
        steps,
        strategy: strategy.into(),
        seed: opts.sample_seed.unwrap_or(0),
        generation_passes: passes,
    })
}
