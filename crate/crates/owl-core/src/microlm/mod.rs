//! Miniature decoder-only multimodal transformer with full attention
//! capture at every layer and hand-written backprop.
//!
//! The model is a pre-norm transformer with learned positional embeddings.
//! Visual features enter as a fixed-length prefix of projected feature
//! vectors; text tokens follow. Every forward step exposes the current
//! position's post-softmax attention rows per layer, and an optional hook
//! may rewrite them before value mixing.
//!
//! All parameters live in one flat `f64` buffer addressed through a layout
//! table, which keeps the optimizer, the checkpoint format, and
//! finite-difference probing trivial.

mod backward;
mod checkpoint;
mod forward;
mod train;

pub use backward::{loss_and_grads, LossAndGrads, TrainExample};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    forward_step, AttentionHook, AttentionRecord, AttnRows, DecodeState, IdentityHook, StepOutput,
};
pub use train::{build_training_examples, train, TrainConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorcore::{Rng, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("target token {token} outside vocabulary of size {vocab}")]
    TargetOutOfVocab { token: u32, vocab: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("feature matrix is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    FeatureShape {
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("no pending positions to process")]
    NoPendingPositions,
    #[error("hook returned row summing to {sum} (layer {layer}, head {head}); expected 1 +/- 1e-4")]
    HookRowNotStochastic { layer: usize, head: usize, sum: f64 },
    #[error("hook returned non-finite attention weight (layer {layer}, head {head})")]
    HookRowNonFinite { layer: usize, head: usize },
    #[error("loss became non-finite at optimizer step {step}")]
    NanLoss { step: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub vocab: usize,
    /// Visual feature dimensionality (input to the projector).
    pub feat_dim: usize,
    /// Number of visual prefix slots.
    pub visual_slots: usize,
    pub max_positions: usize,
    pub mlp_hidden: usize,
}

impl ModelConfig {
    /// Desk-scale default sized for the 24-object testbed.
    pub fn default_testbed(vocab: usize, feat_dim: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            dim: 32,
            vocab,
            feat_dim,
            visual_slots: 8,
            max_positions: 96,
            mlp_hidden: 128,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.vocab == 0 {
            return Err(ModelError::InvalidConfig(
                "layers, heads, dim and vocab must be positive".into(),
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.feat_dim == 0 || self.visual_slots == 0 || self.mlp_hidden == 0 {
            return Err(ModelError::InvalidConfig(
                "feat_dim, visual_slots and mlp_hidden must be positive".into(),
            ));
        }
        if self.max_positions <= self.visual_slots + 1 {
            return Err(ModelError::InvalidConfig(
                "max_positions too small for the visual prefix".into(),
            ));
        }
        Ok(())
    }
}

/// Location of one named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerRanges {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub w2: usize,
}

/// Flat-buffer layout for all parameters, in checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) vis_proj: usize,
    pub(crate) layers: Vec<LayerRanges>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) w_out: usize,
    total: usize,
    specs: Vec<TensorSpec>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        let mut specs = Vec::new();
        let mut offset = 0usize;
        let mut push = |specs: &mut Vec<TensorSpec>, name: String, rows: usize, cols: usize| {
            let spec = TensorSpec {
                name,
                offset,
                rows,
                cols,
            };
            offset += rows * cols;
            specs.push(spec);
            offset - rows * cols
        };

        let tok_emb = push(&mut specs, "tok_emb".into(), cfg.vocab, d);
        let pos_emb = push(&mut specs, "pos_emb".into(), cfg.max_positions, d);
        let vis_proj = push(&mut specs, "vis_proj".into(), d, cfg.feat_dim);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            layers.push(LayerRanges {
                ln1_g: push(&mut specs, format!("layer{l}.ln1_gain"), 1, d),
                ln1_b: push(&mut specs, format!("layer{l}.ln1_bias"), 1, d),
                wq: push(&mut specs, format!("layer{l}.wq"), d, d),
                wk: push(&mut specs, format!("layer{l}.wk"), d, d),
                wv: push(&mut specs, format!("layer{l}.wv"), d, d),
                wo: push(&mut specs, format!("layer{l}.wo"), d, d),
                ln2_g: push(&mut specs, format!("layer{l}.ln2_gain"), 1, d),
                ln2_b: push(&mut specs, format!("layer{l}.ln2_bias"), 1, d),
                w1: push(&mut specs, format!("layer{l}.mlp_in"), cfg.mlp_hidden, d),
                w2: push(&mut specs, format!("layer{l}.mlp_out"), d, cfg.mlp_hidden),
            });
        }
        let lnf_g = push(&mut specs, "final_ln_gain".into(), 1, d);
        let lnf_b = push(&mut specs, "final_ln_bias".into(), 1, d);
        let w_out = push(&mut specs, "w_out".into(), cfg.vocab, d);

        Self {
            tok_emb,
            pos_emb,
            vis_proj,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            total: offset,
            specs,
        }
    }

    pub fn total_params(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }
}

/// All model parameters in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Layout,
    buf: Vec<f64>,
}

impl ModelParams {
    /// Gaussian init with the residual-output projections scaled down by
    /// `1/sqrt(2*layers)`; layer-norm gains start at 1.
    pub fn init(config: ModelConfig, rng: &mut Rng, init_std: f64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut buf = vec![0.0; layout.total_params()];
        let resid_scale = 1.0 / (2.0 * config.layers as f64).sqrt();
        for spec in layout.specs() {
            let std = if spec.name.ends_with("gain") {
                // gains start at exactly 1
                for v in &mut buf[spec.offset..spec.offset + spec.len()] {
                    *v = 1.0;
                }
                continue;
            } else if spec.name.ends_with("bias") {
                continue;
            } else if spec.name.ends_with(".wo") || spec.name.ends_with("mlp_out") {
                init_std * resid_scale
            } else {
                init_std
            };
            for v in &mut buf[spec.offset..spec.offset + spec.len()] {
                *v = rng.next_gaussian() * std;
            }
        }
        Ok(Self {
            config,
            layout,
            buf,
        })
    }

    /// All-zero parameters except unit layer-norm gains. Produces exactly
    /// uniform logits, handy as a reference point.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut rng = Rng::new(0);
        Self::init(config, &mut rng, 0.0)
    }

    pub(crate) fn from_parts(config: ModelConfig, buf: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if buf.len() != layout.total_params() {
            return Err(ModelError::Checkpoint(format!(
                "parameter buffer has {} values, layout expects {}",
                buf.len(),
                layout.total_params()
            )));
        }
        if !buf.iter().all(|v| v.is_finite()) {
            return Err(ModelError::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self {
            config,
            layout,
            buf,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn buf(&self) -> &[f64] {
        &self.buf
    }

    pub fn buf_mut(&mut self) -> &mut [f64] {
        &mut self.buf
    }

    pub fn num_params(&self) -> usize {
        self.buf.len()
    }

    // Slice accessors used by the forward/backward passes.

    pub(crate) fn tok_emb(&self, token: usize) -> &[f64] {
        let d = self.config.dim;
        let base = self.layout.tok_emb + token * d;
        &self.buf[base..base + d]
    }

    pub(crate) fn pos_emb(&self, pos: usize) -> &[f64] {
        let d = self.config.dim;
        let base = self.layout.pos_emb + pos * d;
        &self.buf[base..base + d]
    }

    pub(crate) fn vis_proj(&self) -> &[f64] {
        let len = self.config.dim * self.config.feat_dim;
        &self.buf[self.layout.vis_proj..self.layout.vis_proj + len]
    }

    pub(crate) fn layer(&self, l: usize) -> &LayerRanges {
        &self.layout.layers[l]
    }

    pub(crate) fn vec_at(&self, offset: usize, len: usize) -> &[f64] {
        &self.buf[offset..offset + len]
    }

    pub(crate) fn w_out(&self) -> &[f64] {
        let len = self.config.vocab * self.config.dim;
        &self.buf[self.layout.w_out..self.layout.w_out + len]
    }

    pub(crate) fn lnf_gain(&self) -> &[f64] {
        self.vec_at(self.layout.lnf_g, self.config.dim)
    }

    pub(crate) fn lnf_bias(&self) -> &[f64] {
        self.vec_at(self.layout.lnf_b, self.config.dim)
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;
