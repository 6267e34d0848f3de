//! VTACR calibration: collect per-layer VTACR samples at hallucinated
//! token positions under baseline decoding, then fit per-layer percentile
//! base scores.
//!
//! The table binds to a `(model, corpus)` fingerprint pair; decoding
//! against a different checkpoint is rejected unless forced.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{decode_greedy, decode_nucleus, DecodeError, DecodeOptions};
use crate::microlm::ModelParams;
use crate::scenegen::{special, CorpusRecord, SceneGrammar, Vocab};
use crate::tensorcore::{percentile, TensorError};

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("no hallucinated tokens found; train the testbed model with a higher co-occurrence bias or hallucination rate")]
    NoHallucinatedTokens,
    #[error("layer {0} has no VTACR samples")]
    EmptyLayerSamples(usize),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("calibration table was fitted for model {expected} but got {actual}")]
    ModelFingerprintMismatch { expected: String, actual: String },
    #[error("calibration file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CalibrateError>;

/// Which baseline decoder produces the hallucinated samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollectorDecoder {
    Greedy,
    Nucleus { p: f64, temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBase {
    pub layer: usize,
    pub v_b: f64,
    pub n_samples: usize,
}

/// Per-layer percentile base scores with the fingerprints of the model and
/// corpus they were fitted on. `reliable` is false when any layer had
/// fewer than `min_samples` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTable {
    pub version: u32,
    pub tau_pct: f64,
    pub layers: Vec<LayerBase>,
    pub model_hash: String,
    pub corpus_hash: String,
    pub reliable: bool,
    pub min_samples: usize,
}

impl CalibrationTable {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let table: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if table.layers.is_empty() {
            return Err(CalibrateError::Format("table has no layers".into()));
        }
        for (i, layer) in table.layers.iter().enumerate() {
            if layer.layer != i {
                return Err(CalibrateError::Format(format!(
                    "layer entries out of order at index {i}"
                )));
            }
            if !(layer.v_b >= 0.0) {
                return Err(CalibrateError::Format(format!(
                    "negative base score at layer {i}"
                )));
            }
        }
        Ok(table)
    }

    pub fn verify_model(&self, model_hash: &str) -> Result<()> {
        if self.model_hash != model_hash {
            return Err(CalibrateError::ModelFingerprintMismatch {
                expected: self.model_hash.clone(),
                actual: model_hash.to_string(),
            });
        }
        Ok(())
    }
}

/// Runs baseline generation over the corpus scenes and records each
/// layer's VTACR at every emitted token that names an absent object.
/// Returns one sample list per layer (degenerate layers contribute
/// nothing at that step).
pub fn collect_hallucinated_vtacr(
    params: &ModelParams,
    corpus: &[CorpusRecord],
    grammar: &SceneGrammar,
    decoder: CollectorDecoder,
    seed: u64,
    opts: &DecodeOptions,
) -> Result<Vec<Vec<f64>>> {
    let vocab = Vocab::from_grammar(grammar);
    let layers = params.config().layers;
    let prompt = [special::BOS];

    // Scenes are processed in corpus order; the parallel map preserves
    // that order, so merged samples are deterministic.
    let per_scene: Vec<Result<Vec<(usize, f64)>>> = corpus
        .par_iter()
        .map(|record| {
            let outcome = match decoder {
                CollectorDecoder::Greedy => {
                    decode_greedy(params, &record.scene.features, &prompt, opts)?
                }
                CollectorDecoder::Nucleus { p, temperature } => decode_nucleus(
                    params,
                    &record.scene.features,
                    &prompt,
                    p,
                    temperature,
                    seed ^ record.scene.id,
                    opts,
                )?,
            };
            let mut samples = Vec::new();
            for step in &outcome.steps {
                let Some(object) = vocab.object_of_token(step.token) else {
                    continue;
                };
                if record.scene.present.contains(&object) {
                    continue;
                }
                for (layer, lv) in step.profile.layers.iter().enumerate() {
                    if let Some(v) = lv.vtacr {
                        samples.push((layer, v));
                    }
                }
            }
            Ok(samples)
        })
        .collect();

    let mut per_layer = vec![Vec::new(); layers];
    for scene_samples in per_scene {
        for (layer, v) in scene_samples? {
            per_layer[layer].push(v);
        }
    }
    if per_layer.iter().all(|l| l.is_empty()) {
        return Err(CalibrateError::NoHallucinatedTokens);
    }
    Ok(per_layer)
}

/// Fits `v_b` per layer as the nearest-rank `tau_pct` percentile of that
/// layer's samples. Errors name the first layer with no samples.
pub fn fit_base_scores(
    samples: &[Vec<f64>],
    tau_pct: f64,
    min_samples: usize,
    model_hash: &str,
    corpus_hash: &str,
) -> Result<CalibrationTable> {
    let mut layers = Vec::with_capacity(samples.len());
    let mut reliable = true;
    for (layer, layer_samples) in samples.iter().enumerate() {
        if layer_samples.is_empty() {
            return Err(CalibrateError::EmptyLayerSamples(layer));
        }
        if layer_samples.len() < min_samples {
            reliable = false;
        }
        layers.push(LayerBase {
            layer,
            v_b: percentile(layer_samples, tau_pct)?,
            n_samples: layer_samples.len(),
        });
    }
    Ok(CalibrationTable {
        version: 1,
        tau_pct,
        layers,
        model_hash: model_hash.to_string(),
        corpus_hash: corpus_hash.to_string(),
        reliable,
        min_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::Rng;

    #[test]
    fn fit_matches_nearest_rank_oracle() {
        let samples = vec![(1..=100).map(|v| v as f64).collect::<Vec<f64>>()];
        let table = fit_base_scores(&samples, 80.0, 50, "m", "c").unwrap();
        assert_eq!(table.layers[0].v_b, 80.0);
        assert_eq!(table.layers[0].n_samples, 100);
        assert!(table.reliable);
    }

    #[test]
    fn single_sample_layer_marks_unreliable() {
        let samples = vec![vec![0.37], vec![0.9]];
        let table = fit_base_scores(&samples, 80.0, 50, "m", "c").unwrap();
        assert_eq!(table.layers[0].v_b, 0.37);
        assert_eq!(table.layers[1].v_b, 0.9);
        assert!(!table.reliable);
    }

    #[test]
    fn full_percentile_is_max() {
        let samples = vec![vec![0.2, 0.9, 0.4, 0.7]];
        let table = fit_base_scores(&samples, 100.0, 1, "m", "c").unwrap();
        assert_eq!(table.layers[0].v_b, 0.9);
    }

    #[test]
    fn empty_layer_names_layer() {
        let samples = vec![vec![0.5], vec![]];
        assert!(matches!(
            fit_base_scores(&samples, 80.0, 1, "m", "c"),
            Err(CalibrateError::EmptyLayerSamples(1))
        ));
    }

    #[test]
    fn monotone_in_percentile_and_order_free() {
        let mut rng = Rng::new(4);
        for _ in 0..200 {
            let n = 1 + rng.gen_range(60);
            let samples: Vec<f64> = (0..n).map(|_| rng.next_f64() * 3.0).collect();
            let mut prev = f64::NEG_INFINITY;
            for pct in [0.0, 25.0, 50.0, 80.0, 100.0] {
                let v = fit_base_scores(&[samples.clone()], pct, 1, "m", "c")
                    .unwrap()
                    .layers[0]
                    .v_b;
                assert!(v >= prev);
                prev = v;
            }
            let mut shuffled = samples.clone();
            rng.shuffle(&mut shuffled);
            let a = fit_base_scores(&[samples], 80.0, 1, "m", "c").unwrap();
            let b = fit_base_scores(&[shuffled], 80.0, 1, "m", "c").unwrap();
            assert_eq!(a.layers[0].v_b, b.layers[0].v_b);
        }
    }

    #[test]
    fn table_json_round_trip_and_fingerprint() {
        let table = fit_base_scores(&[vec![0.1, 0.2], vec![0.3, 0.4]], 50.0, 1, "mh", "ch").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.json");
        table.save_json(&path).unwrap();
        let loaded = CalibrationTable::load_json(&path).unwrap();
        assert_eq!(table, loaded);
        assert!(loaded.verify_model("mh").is_ok());
        assert!(matches!(
            loaded.verify_model("other"),
            Err(CalibrateError::ModelFingerprintMismatch { .. })
        ));
    }

    // -- collection --

    use crate::decode::DecodeOptions;
    use crate::microlm::{ModelConfig, ModelParams};
    use crate::scenegen::{generate_corpus, SceneGrammar, Vocab};
    use crate::tensorcore::Rng as CoreRng;

    #[test]
    fn collection_is_deterministic_and_layer_shaped() {
        let grammar = SceneGrammar::default_testbed();
        let corpus = generate_corpus(&grammar, 3, 60, grammar.hallucination_rate);
        let vocab = Vocab::from_grammar(&grammar);
        let cfg = ModelConfig::default_testbed(vocab.size(), grammar.feature_dim());
        // An untrained model babbles object nouns, most of them absent.
        let params = ModelParams::init(cfg, &mut CoreRng::new(8), 0.4).unwrap();
        let opts = DecodeOptions::default();
        let a = collect_hallucinated_vtacr(
            &params,
            &corpus,
            &grammar,
            CollectorDecoder::Greedy,
            5,
            &opts,
        )
        .unwrap();
        let b = collect_hallucinated_vtacr(
            &params,
            &corpus,
            &grammar,
            CollectorDecoder::Greedy,
            5,
            &opts,
        )
        .unwrap();
        assert_eq!(a, b, "collection must be deterministic");
        assert_eq!(a.len(), params.config().layers);
        assert!(a.iter().any(|layer| !layer.is_empty()));
        for layer in &a {
            assert!(layer.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn collection_without_hallucinations_errors() {
        let grammar = SceneGrammar::default_testbed();
        let corpus = generate_corpus(&grammar, 3, 20, 0.0);
        let vocab = Vocab::from_grammar(&grammar);
        let cfg = ModelConfig::default_testbed(vocab.size(), grammar.feature_dim());
        // Uniform logits: greedy always emits token 0, never an object
        // noun, so no hallucinated tokens exist to sample.
        let params = ModelParams::zeroed(cfg).unwrap();
        let err = collect_hallucinated_vtacr(
            &params,
            &corpus,
            &grammar,
            CollectorDecoder::Greedy,
            5,
            &DecodeOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CalibrateError::NoHallucinatedTokens));
        assert!(err.to_string().contains("higher co-occurrence bias"));
    }
}
