//! Run configuration with strict, lossless file round-trips.
//!
//! Precedence is CLI flag > config file > built-in default. Config files
//! are flat TOML (`key = value`, one per line, `#` comments); unknown keys
//! are rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use owl_core::calibrate::CollectorDecoder;
use owl_core::decode::DcdPath;
use owl_core::intervene::{DeltaMode, InterventionConfig};
use owl_core::microlm::{ModelConfig, TrainConfig};
use owl_core::scenegen::SceneGrammar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Nucleus,
    Beam,
    Dcd,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Greedy => "greedy",
            Self::Nucleus => "nucleus",
            Self::Beam => "beam",
            Self::Dcd => "dcd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DeltaModeArg {
    Intent,
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DcdPathArg {
    Fused,
    Visual,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CollectorArg {
    Greedy,
    Nucleus,
}

/// Every knob across the pipeline, fully resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    // Artifact paths (optional; commands require the ones they need).
    pub model: Option<String>,
    pub corpus: Option<String>,
    pub grammar: Option<String>,
    pub calibration: Option<String>,

    // Root seed; every stage derives its own stream from it.
    pub seed: u64,

    // Corpus generation.
    pub train_size: usize,
    pub eval_size: usize,
    pub bias: f64,
    pub hallucination_rate: f64,
    pub cluster_size: usize,
    pub cooc_within: f64,
    pub cooc_cross: f64,
    pub attribute_rate: f64,
    pub feature_noise: f64,
    pub feature_blend: f64,
    pub visual_slots: usize,

    // Model architecture.
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,

    // Training.
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub qa_per_scene: usize,

    // Calibration.
    pub tau_pct: f64,
    pub min_samples: usize,
    pub collector_decoder: CollectorArg,

    // Intervention.
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub mod_t: f64,
    pub delta_mode: DeltaModeArg,
    pub renormalize: bool,
    pub self_in_text: bool,

    // Decoding.
    pub strategy: Strategy,
    pub max_len: usize,
    pub nucleus_p: f64,
    pub temperature: f64,
    pub beam_width: usize,
    pub dcd_path: DcdPathArg,
    pub dcd_sample: bool,
    pub force: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            corpus: None,
            grammar: None,
            calibration: None,
            seed: 7,
            train_size: 2000,
            eval_size: 500,
            bias: 0.8,
            hallucination_rate: 0.3,
            cluster_size: 3,
            cooc_within: 0.8,
            cooc_cross: 0.01,
            attribute_rate: 0.1,
            feature_noise: 0.1,
            feature_blend: 0.25,
            visual_slots: 8,
            layers: 2,
            heads: 2,
            dim: 32,
            epochs: 12,
            learning_rate: 3e-3,
            batch_size: 32,
            qa_per_scene: 2,
            tau_pct: 80.0,
            min_samples: 50,
            collector_decoder: CollectorArg::Greedy,
            alpha: 0.4,
            beta: 0.5,
            lambda: 0.2,
            mod_t: 0.2,
            delta_mode: DeltaModeArg::Intent,
            renormalize: true,
            self_in_text: true,
            strategy: Strategy::Greedy,
            max_len: 64,
            nucleus_p: 0.9,
            temperature: 1.0,
            beam_width: 3,
            dcd_path: DcdPathArg::Fused,
            dcd_sample: false,
            force: false,
        }
    }
}

/// File/flag overlay: every field optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, clap::Args)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigOverlay {
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub corpus: Option<String>,
    #[arg(long)]
    pub grammar: Option<String>,
    #[arg(long = "calib")]
    pub calibration: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub eval_size: Option<usize>,
    #[arg(long)]
    pub bias: Option<f64>,
    #[arg(long)]
    pub hallucination_rate: Option<f64>,
    #[arg(long)]
    pub cluster_size: Option<usize>,
    #[arg(long)]
    pub cooc_within: Option<f64>,
    #[arg(long)]
    pub cooc_cross: Option<f64>,
    #[arg(long)]
    pub attribute_rate: Option<f64>,
    #[arg(long)]
    pub feature_noise: Option<f64>,
    #[arg(long)]
    pub feature_blend: Option<f64>,
    #[arg(long)]
    pub visual_slots: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub qa_per_scene: Option<usize>,
    #[arg(long)]
    pub tau_pct: Option<f64>,
    #[arg(long)]
    pub min_samples: Option<usize>,
    #[arg(long)]
    pub collector_decoder: Option<CollectorArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long = "mod-t")]
    pub mod_t: Option<f64>,
    #[arg(long)]
    pub delta_mode: Option<DeltaModeArg>,
    /// Disable row renormalization after attention rewrites (ablation).
    #[arg(long = "no-renorm", action = clap::ArgAction::SetTrue)]
    #[serde(skip)]
    pub no_renorm: bool,
    #[arg(skip)]
    pub renormalize: Option<bool>,
    /// Exclude the current token from the text index set.
    #[arg(long = "no-self-in-text", action = clap::ArgAction::SetTrue)]
    #[serde(skip)]
    pub no_self_in_text: bool,
    #[arg(skip)]
    pub self_in_text: Option<bool>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub nucleus_p: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub dcd_path: Option<DcdPathArg>,
    /// Sample from the fused distribution instead of taking the argmax.
    #[arg(long = "dcd-sample", action = clap::ArgAction::SetTrue)]
    #[serde(skip)]
    pub dcd_sample_flag: bool,
    #[arg(skip)]
    pub dcd_sample: Option<bool>,
    /// Skip calibration fingerprint verification.
    #[arg(long = "force", action = clap::ArgAction::SetTrue)]
    #[serde(skip)]
    pub force_flag: bool,
    #[arg(skip)]
    pub force: Option<bool>,
}

macro_rules! overlay_fields {
    ($cfg:expr, $src:expr, [$($field:ident),* $(,)?]) => {
        $(if let Some(v) = $src.$field.clone() { $cfg.$field = v; })*
    };
}

impl RunConfig {
    /// Applies an overlay (file or CLI flags) over `self`.
    pub fn apply(&mut self, overlay: &ConfigOverlay) {
        let mut o = overlay.clone();
        // Boolean CLI switches become Some(..) only when set.
        if o.no_renorm {
            o.renormalize = Some(false);
        }
        if o.no_self_in_text {
            o.self_in_text = Some(false);
        }
        if o.dcd_sample_flag {
            o.dcd_sample = Some(true);
        }
        if o.force_flag {
            o.force = Some(true);
        }
        if o.model.is_some() {
            self.model = o.model.clone();
        }
        if o.corpus.is_some() {
            self.corpus = o.corpus.clone();
        }
        if o.grammar.is_some() {
            self.grammar = o.grammar.clone();
        }
        if o.calibration.is_some() {
            self.calibration = o.calibration.clone();
        }
        overlay_fields!(self, o, [
            seed, train_size, eval_size, bias, hallucination_rate,
            cluster_size, cooc_within, cooc_cross, attribute_rate,
            feature_noise, feature_blend, visual_slots, layers, heads, dim,
            epochs, learning_rate, batch_size, qa_per_scene, tau_pct, min_samples,
            collector_decoder, alpha, beta, lambda, mod_t, delta_mode, renormalize,
            self_in_text, strategy, max_len, nucleus_p, temperature, beam_width,
            dcd_path, dcd_sample, force,
        ]);
    }

    /// Defaults, then config file (if given), then CLI flags.
    pub fn resolve(config_file: Option<&Path>, flags: &ConfigOverlay) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = config_file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            let overlay: ConfigOverlay = toml::from_str(&text)
                .with_context(|| format!("parsing config file {}", path.display()))?;
            cfg.apply(&overlay);
        }
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            bail!("dim {} not divisible by heads {}", self.dim, self.heads);
        }
        if !(0.0..1.0).contains(&self.beta) {
            bail!("beta {} outside [0, 1)", self.beta);
        }
        for (name, v) in [
            ("bias", self.bias),
            ("hallucination_rate", self.hallucination_rate),
            ("cooc_within", self.cooc_within),
            ("cooc_cross", self.cooc_cross),
            ("attribute_rate", self.attribute_rate),
            ("feature_blend", self.feature_blend),
        ] {
            if !(0.0..=1.0).contains(&v) {
                bail!("{name} = {v} outside [0, 1]");
            }
        }
        if !(0.0..=100.0).contains(&self.tau_pct) {
            bail!("tau_pct {} outside [0, 100]", self.tau_pct);
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Strict parse of a full config file.
    pub fn from_toml(text: &str) -> Result<Self> {
        let overlay: ConfigOverlay = toml::from_str(text)?;
        let mut cfg = Self::default();
        cfg.apply(&overlay);
        cfg.validate()?;
        Ok(cfg)
    }

    // Conversions into the core config types.

    pub fn grammar_template(&self) -> SceneGrammar {
        let mut g = SceneGrammar::clustered(self.cluster_size, self.cooc_within, self.cooc_cross);
        g.bias = self.bias;
        g.hallucination_rate = self.hallucination_rate;
        g.attribute_rate = self.attribute_rate;
        g.feature_noise = self.feature_noise;
        g.feature_blend = self.feature_blend;
        g.visual_slots = self.visual_slots;
        g
    }

    pub fn model_config(&self, vocab: usize, feat_dim: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            dim: self.dim,
            vocab,
            feat_dim,
            visual_slots: self.visual_slots,
            max_positions: self.visual_slots + self.max_len + 32,
            mlp_hidden: self.dim * 4,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: owl_core::tensorcore::derive_seed(self.seed, "train"),
            qa_per_scene: self.qa_per_scene,
            ..TrainConfig::default()
        }
    }

    pub fn intervention_config(&self) -> InterventionConfig {
        InterventionConfig {
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.lambda,
            mod_t: self.mod_t,
            tau_pct: self.tau_pct,
            delta_mode: match self.delta_mode {
                DeltaModeArg::Intent => DeltaMode::Intent,
                DeltaModeArg::Literal => DeltaMode::Literal,
            },
            renormalize: self.renormalize,
            self_in_text: self.self_in_text,
        }
    }

    pub fn collector(&self) -> CollectorDecoder {
        match self.collector_decoder {
            CollectorArg::Greedy => CollectorDecoder::Greedy,
            CollectorArg::Nucleus => CollectorDecoder::Nucleus {
                p: self.nucleus_p,
                temperature: self.temperature,
            },
        }
    }

    pub fn dcd_path(&self) -> DcdPath {
        match self.dcd_path {
            DcdPathArg::Fused => DcdPath::Fused,
            DcdPathArg::Visual => DcdPath::Visual,
            DcdPathArg::Text => DcdPath::Text,
        }
    }
}
