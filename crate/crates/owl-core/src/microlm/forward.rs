//! Incremental (KV-cached) forward pass with per-layer attention capture
//! and optional post-softmax attention hooks.

use crate::tensorcore::{dot, layer_norm, softmax_row, Matrix};
use crate::vtacr::TokenPartition;

use super::{ModelError, ModelParams, Result, LN_EPS};

// ---------------------------------------------------------------------------
// Attention rows / records
// ---------------------------------------------------------------------------

/// Post-softmax attention weights of the current position: `heads` rows,
/// each over all prior-and-self positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnRows {
    heads: usize,
    len: usize,
    data: Vec<f64>,
}

impl AttnRows {
    pub fn new(heads: usize, len: usize) -> Self {
        Self {
            heads,
            len,
            data: vec![0.0; heads * len],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let heads = rows.len();
        let len = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(heads * len);
        for r in rows {
            assert_eq!(r.len(), len, "ragged attention rows");
            data.extend_from_slice(r);
        }
        Self { heads, len, data }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Row length == current sequence length.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, head: usize) -> &[f64] {
        &self.data[head * self.len..(head + 1) * self.len]
    }

    pub fn row_mut(&mut self, head: usize) -> &mut [f64] {
        &mut self.data[head * self.len..(head + 1) * self.len]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.heads).map(|h| self.row(h).iter().sum()).collect()
    }
}

/// Captured attention for one layer at the current decode position. When a
/// hook is active the rows reflect the post-hook weights, i.e. exactly what
/// was used for value mixing.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    layer: usize,
    rows: AttnRows,
}

impl AttentionRecord {
    pub fn new(layer: usize, rows: AttnRows) -> Self {
        Self { layer, rows }
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn rows(&self) -> &AttnRows {
        &self.rows
    }
}

/// Rewrites the current position's post-softmax attention rows.
///
/// A hook returning rows that do not sum to 1 within 1e-4 per head is an
/// error unless it opts out via [`AttentionHook::allows_unnormalized`]
/// (the opt-out exists for the literal, non-renormalized intervention
/// mode; value mixing then uses the raw weights).
pub trait AttentionHook {
    fn rewrite(&mut self, layer: usize, rows: &mut AttnRows) -> Result<()>;

    fn allows_unnormalized(&self) -> bool {
        false
    }
}

/// Hook that returns the rows untouched; useful for testing capture paths.
pub struct IdentityHook;

impl AttentionHook for IdentityHook {
    fn rewrite(&mut self, _layer: usize, _rows: &mut AttnRows) -> Result<()> {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// DecodeState
// ---------------------------------------------------------------------------

/// Single-owner autoregressive decoding session: visual prefix, text tokens
/// so far, and per-layer key/value caches. Positions are materialized into
/// the caches by [`forward_step`]; cloning a state forks the session.
#[derive(Debug, Clone)]
pub struct DecodeState {
    features: Matrix,
    tokens: Vec<u32>,
    /// Number of positions already materialized in the caches.
    cached: usize,
    /// Per layer: flattened `cached x dim` key/value rows.
    k_cache: Vec<Vec<f64>>,
    v_cache: Vec<Vec<f64>>,
    /// Final-block hidden state per cached position (pre final layer norm).
    hidden: Vec<Vec<f64>>,
}

impl DecodeState {
    pub fn new(params: &ModelParams, features: Matrix) -> Result<Self> {
        let cfg = params.config();
        if features.rows() != cfg.visual_slots || features.cols() != cfg.feat_dim {
            return Err(ModelError::FeatureShape {
                rows: features.rows(),
                cols: features.cols(),
                expected_rows: cfg.visual_slots,
                expected_cols: cfg.feat_dim,
            });
        }
        Ok(Self {
            features,
            tokens: Vec::new(),
            cached: 0,
            k_cache: vec![Vec::new(); cfg.layers],
            v_cache: vec![Vec::new(); cfg.layers],
            hidden: Vec::new(),
        })
    }

    pub fn push_token(&mut self, token: u32) {
        self.tokens.push(token);
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Total sequence length including the visual prefix and any pending
    /// (not yet materialized) positions.
    pub fn seq_len(&self) -> usize {
        self.features.rows() + self.tokens.len()
    }

    pub fn cached_len(&self) -> usize {
        self.cached
    }

    pub fn num_visual(&self) -> usize {
        self.features.rows()
    }

    pub fn hidden_at(&self, pos: usize) -> &[f64] {
        &self.hidden[pos]
    }

    /// Partition of the full sequence: visual prefix vs text positions.
    pub fn partition(&self, self_in_text: bool) -> TokenPartition {
        TokenPartition::prefix(self.num_visual(), self.seq_len(), self_in_text)
    }
}

/// Logits for the next token plus one attention record per layer, all for
/// the last processed position.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub records: Vec<AttentionRecord>,
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

fn validate_hook_rows(rows: &AttnRows, layer: usize, strict: bool) -> Result<()> {
    for head in 0..rows.heads() {
        let row = rows.row(head);
        if !row.iter().all(|v| v.is_finite()) {
            return Err(ModelError::HookRowNonFinite { layer, head });
        }
        if strict {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-4 {
                return Err(ModelError::HookRowNotStochastic { layer, head, sum });
            }
        }
    }
    Ok(())
}

/// Materializes every pending position. The hook (if any) applies to the
/// final position only; logits and attention records are returned for that
/// position.
pub fn forward_step(
    params: &ModelParams,
    state: &mut DecodeState,
    mut hook: Option<&mut dyn AttentionHook>,
) -> Result<StepOutput> {
    let seq_len = state.seq_len();
    if seq_len == state.cached {
        return Err(ModelError::NoPendingPositions);
    }
    let cfg = params.config();
    if seq_len > cfg.max_positions {
        return Err(ModelError::SequenceTooLong {
            len: seq_len,
            max: cfg.max_positions,
        });
    }

    let last = seq_len - 1;
    for pos in state.cached..last {
        forward_position(params, state, pos, None)?;
        state.cached = pos + 1;
    }
    let output = forward_position(params, state, last, hook.take())?;
    state.cached = seq_len;
    Ok(output)
}

fn embedding(params: &ModelParams, state: &DecodeState, pos: usize) -> Result<Vec<f64>> {
    let cfg = params.config();
    let d = cfg.dim;
    let mut x = vec![0.0; d];
    if pos < state.num_visual() {
        let feat = state.features.row(pos);
        let proj = params.vis_proj();
        for i in 0..d {
            x[i] = dot(&proj[i * cfg.feat_dim..(i + 1) * cfg.feat_dim], feat);
        }
    } else {
        let token = state.tokens[pos - state.num_visual()];
        if token as usize >= cfg.vocab {
            return Err(ModelError::TokenOutOfVocab {
                token,
                vocab: cfg.vocab,
            });
        }
        x.copy_from_slice(params.tok_emb(token as usize));
    }
    for (xi, pi) in x.iter_mut().zip(params.pos_emb(pos)) {
        *xi += pi;
    }
    Ok(x)
}

fn forward_position(
    params: &ModelParams,
    state: &mut DecodeState,
    pos: usize,
    mut hook: Option<&mut dyn AttentionHook>,
) -> Result<StepOutput> {
    let cfg = params.config();
    let d = cfg.dim;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let ctx = pos + 1;

    let mut x = embedding(params, state, pos)?;
    let mut records = Vec::with_capacity(cfg.layers);

    for l in 0..cfg.layers {
        let lr = params.layer(l).clone();
        let ln1_g = params.vec_at(lr.ln1_g, d);
        let ln1_b = params.vec_at(lr.ln1_b, d);
        let (a_in, _, _) = layer_norm(&x, ln1_g, ln1_b, LN_EPS);

        let wq = params.vec_at(lr.wq, d * d);
        let wk = params.vec_at(lr.wk, d * d);
        let wv = params.vec_at(lr.wv, d * d);
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        for i in 0..d {
            q[i] = dot(&wq[i * d..(i + 1) * d], &a_in);
            k[i] = dot(&wk[i * d..(i + 1) * d], &a_in);
            v[i] = dot(&wv[i * d..(i + 1) * d], &a_in);
        }
        state.k_cache[l].extend_from_slice(&k);
        state.v_cache[l].extend_from_slice(&v);
        debug_assert_eq!(state.k_cache[l].len(), ctx * d);

        // Attention rows for the current position, per head.
        let mut rows = AttnRows::new(heads, ctx);
        for h in 0..heads {
            let qh = &q[h * dh..(h + 1) * dh];
            let mut scores = Vec::with_capacity(ctx);
            for j in 0..ctx {
                let kj = &state.k_cache[l][j * d + h * dh..j * d + (h + 1) * dh];
                scores.push(dot(qh, kj) * scale);
            }
            let soft = softmax_row(&scores)?;
            rows.row_mut(h).copy_from_slice(&soft);
        }

        if let Some(hk) = hook.as_deref_mut() {
            hk.rewrite(l, &mut rows)?;
            validate_hook_rows(&rows, l, !hk.allows_unnormalized())?;
        }

        // Value mixing with the (possibly rewritten) rows.
        let mut mixed = vec![0.0; d];
        for h in 0..heads {
            let row = rows.row(h);
            for j in 0..ctx {
                let w = row[j];
                if w == 0.0 {
                    continue;
                }
                let vj = &state.v_cache[l][j * d + h * dh..j * d + (h + 1) * dh];
                for (m, &vv) in mixed[h * dh..(h + 1) * dh].iter_mut().zip(vj) {
                    *m += w * vv;
                }
            }
        }

        let wo = params.vec_at(lr.wo, d * d);
        for i in 0..d {
            x[i] += dot(&wo[i * d..(i + 1) * d], &mixed);
        }

        let ln2_g = params.vec_at(lr.ln2_g, d);
        let ln2_b = params.vec_at(lr.ln2_b, d);
        let (m_in, _, _) = layer_norm(&x, ln2_g, ln2_b, LN_EPS);
        let w1 = params.vec_at(lr.w1, cfg.mlp_hidden * d);
        let w2 = params.vec_at(lr.w2, d * cfg.mlp_hidden);
        let mut hidden_act = vec![0.0; cfg.mlp_hidden];
        for i in 0..cfg.mlp_hidden {
            hidden_act[i] = dot(&w1[i * d..(i + 1) * d], &m_in).max(0.0);
        }
        for i in 0..d {
            x[i] += dot(&w2[i * cfg.mlp_hidden..(i + 1) * cfg.mlp_hidden], &hidden_act);
        }

        records.push(AttentionRecord::new(l, rows));
    }

    state.hidden.push(x.clone());

    let (f, _, _) = layer_norm(&x, params.lnf_gain(), params.lnf_bias(), LN_EPS);
    let w_out = params.w_out();
    let logits: Vec<f64> = (0..cfg.vocab)
        .map(|t| dot(&w_out[t * d..(t + 1) * d], &f))
        .collect();
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(ModelError::Tensor(crate::tensorcore::TensorError::NonFinite {
            op: "forward_step",
        }));
    }

    Ok(StepOutput { logits, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microlm::ModelConfig;
    use crate::tensorcore::Rng;
    use crate::vtacr;

    fn tiny_params(seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            dim: 16,
            vocab: 20,
            feat_dim: 6,
            visual_slots: 3,
            max_positions: 32,
            mlp_hidden: 32,
        };
        ModelParams::init(cfg, &mut Rng::new(seed), 0.3).unwrap()
    }

    fn random_features(params: &ModelParams, seed: u64) -> Matrix {
        let cfg = params.config();
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..cfg.visual_slots * cfg.feat_dim)
            .map(|_| rng.next_gaussian())
            .collect();
        Matrix::from_vec(cfg.visual_slots, cfg.feat_dim, data).unwrap()
    }

    fn run_prompt(
        params: &ModelParams,
        hook: Option<&mut dyn AttentionHook>,
    ) -> (Vec<f64>, Vec<AttentionRecord>) {
        let mut state = DecodeState::new(params, random_features(params, 1)).unwrap();
        state.push_token(0);
        state.push_token(5);
        state.push_token(9);
        let out = forward_step(params, &mut state, hook).unwrap();
        (out.logits, out.records)
    }

    #[test]
    fn deterministic_across_runs() {
        let params = tiny_params(3);
        let (a, _) = run_prompt(&params, None);
        let (b, _) = run_prompt(&params, None);
        assert_eq!(a, b);
    }

    #[test]
    fn identity_hook_matches_no_hook() {
        let params = tiny_params(3);
        let (plain, _) = run_prompt(&params, None);
        let mut hook = IdentityHook;
        let (hooked, _) = run_prompt(&params, Some(&mut hook));
        for (a, b) in plain.iter().zip(&hooked) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn records_are_row_stochastic_per_layer() {
        let params = tiny_params(11);
        let (_, records) = run_prompt(&params, None);
        assert_eq!(records.len(), params.config().layers);
        for (l, rec) in records.iter().enumerate() {
            assert_eq!(rec.layer(), l);
            for sum in rec.rows().row_sums() {
                assert!((sum - 1.0).abs() < 1e-6, "layer {l} sum {sum}");
            }
            for h in 0..rec.rows().heads() {
                assert!(rec.rows().row(h).iter().all(|&w| w >= 0.0));
            }
        }
    }

    /// Hook that zeroes the visual columns and renormalizes each row.
    struct ZeroVisualHook {
        num_visual: usize,
    }

    impl AttentionHook for ZeroVisualHook {
        fn rewrite(&mut self, _layer: usize, rows: &mut AttnRows) -> Result<()> {
            for h in 0..rows.heads() {
                let row = rows.row_mut(h);
                for j in 0..self.num_visual.min(row.len()) {
                    row[j] = 0.0;
                }
                let sum: f64 = row.iter().sum();
                if sum > 0.0 {
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
            }
            Ok(())
        }
    }

    #[test]
    fn zero_visual_hook_gives_zero_visual_contribution() {
        let params = tiny_params(5);
        let mut hook = ZeroVisualHook {
            num_visual: params.config().visual_slots,
        };
        let (_, records) = run_prompt(&params, Some(&mut hook));
        let part = TokenPartition::prefix(params.config().visual_slots, records[0].rows().len(), true);
        for rec in &records {
            let nu = vtacr::visual_contribution(rec, &part).unwrap();
            assert_eq!(nu, 0.0);
        }
        let profile = vtacr::profile_step(&records, &part).unwrap();
        for layer in &profile.layers {
            assert_eq!(layer.vtacr, Some(0.0));
        }
    }

    /// Hook that rescales a row without renormalizing.
    struct BreakSumHook;

    impl AttentionHook for BreakSumHook {
        fn rewrite(&mut self, _layer: usize, rows: &mut AttnRows) -> Result<()> {
            for v in rows.row_mut(0).iter_mut() {
                *v *= 1.5;
            }
            Ok(())
        }
    }

    #[test]
    fn non_stochastic_hook_rows_rejected() {
        let params = tiny_params(5);
        let mut state = DecodeState::new(&params, random_features(&params, 2)).unwrap();
        state.push_token(0);
        let mut hook = BreakSumHook;
        let err = forward_step(&params, &mut state, Some(&mut hook)).unwrap_err();
        assert!(matches!(err, ModelError::HookRowNotStochastic { .. }), "{err}");
    }

    /// Same rescaling, but opted out of the stochastic check.
    struct LiteralHook;

    impl AttentionHook for LiteralHook {
        fn rewrite(&mut self, _layer: usize, rows: &mut AttnRows) -> Result<()> {
            for v in rows.row_mut(0).iter_mut() {
                *v *= 1.5;
            }
            Ok(())
        }
        fn allows_unnormalized(&self) -> bool {
            true
        }
    }

    #[test]
    fn unnormalized_mode_is_allowed_when_opted_in() {
        let params = tiny_params(5);
        let mut state = DecodeState::new(&params, random_features(&params, 2)).unwrap();
        state.push_token(0);
        let mut hook = LiteralHook;
        forward_step(&params, &mut state, Some(&mut hook)).unwrap();
    }

    #[test]
    fn cache_tracks_sequence_length() {
        let params = tiny_params(7);
        let mut state = DecodeState::new(&params, random_features(&params, 3)).unwrap();
        state.push_token(1);
        forward_step(&params, &mut state, None).unwrap();
        assert_eq!(state.cached_len(), state.seq_len());
        for l in 0..params.config().layers {
            assert_eq!(state.k_cache[l].len(), state.seq_len() * params.config().dim);
        }
        // No pending positions now.
        assert!(matches!(
            forward_step(&params, &mut state, None),
            Err(ModelError::NoPendingPositions)
        ));
        state.push_token(2);
        forward_step(&params, &mut state, None).unwrap();
        assert_eq!(state.cached_len(), state.seq_len());
    }

    #[test]
    fn incremental_equals_fresh_recompute() {
        // Decoding token-by-token must give the same logits as replaying
        // the whole prefix into a fresh state.
        let params = tiny_params(13);
        let mut inc = DecodeState::new(&params, random_features(&params, 4)).unwrap();
        inc.push_token(0);
        forward_step(&params, &mut inc, None).unwrap();
        inc.push_token(7);
        forward_step(&params, &mut inc, None).unwrap();
        inc.push_token(3);
        let out_inc = forward_step(&params, &mut inc, None).unwrap();

        let mut fresh = DecodeState::new(&params, random_features(&params, 4)).unwrap();
        fresh.push_token(0);
        fresh.push_token(7);
        fresh.push_token(3);
        let out_fresh = forward_step(&params, &mut fresh, None).unwrap();
        assert_eq!(out_inc.logits, out_fresh.logits);
    }

    #[test]
    fn token_out_of_vocab_rejected() {
        let params = tiny_params(5);
        let mut state = DecodeState::new(&params, random_features(&params, 2)).unwrap();
        state.push_token(999);
        assert!(matches!(
            forward_step(&params, &mut state, None),
            Err(ModelError::TokenOutOfVocab { .. })
        ));
    }
}
