//! Synthetic scene grammar and caption corpus with controllable object
//! co-occurrence bias.
//!
//! This is the desk-scale stand-in for a real captioning dataset: every
//! scene carries an exact set of present objects, captions come from a
//! fixed template grammar, and hallucinated mentions are injected with a
//! known rate, so hallucination labels are noise-free by construction.
//!
//! Scene sampling works in two phases. A small base set of objects is drawn
//! uniformly, then a completion pass walks the present objects in insertion
//! order and adds each absent object `o` with probability
//! `bias * C[anchor][o]`, newly added objects joining the queue. The scene
//! is capped at [`MAX_OBJECTS`] objects. With `bias = 0` scenes are plain
//! uniform draws; with `bias = 1` strongly co-occurring partners are pulled
//! in deterministically.
//!
//! Visual features are noisy slot embeddings: each object owns a base
//! embedding that is a one-hot blended toward its co-occurrence partners
//! (`feature_blend` controls how visually confusable partners are), each
//! slot holds the mean embedding of the present objects plus seeded
//! Gaussian noise.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorcore::{Matrix, Rng};

/// Hard cap on objects per scene.
pub const MAX_OBJECTS: usize = 5;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid grammar: {0}")]
    InvalidGrammar(String),
    #[error("unknown object name {0:?}")]
    UnknownObject(String),
    #[error("token id {0} outside vocabulary of size {1}")]
    TokenOutOfRange(u32, usize),
    #[error("corpus line {line}: {source}")]
    CorpusLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SceneError>;

// ---------------------------------------------------------------------------
// Grammar
// ---------------------------------------------------------------------------

/// Scene grammar: object vocabulary, co-occurrence structure and the knobs
/// that control bias strength, hallucination injection, and the visual
/// feature channel.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SceneGrammar {
    /// Object nouns (the CHAIR-relevant vocabulary).
    pub objects: Vec<String>,
    /// Attribute words optionally attached before a noun in captions.
    pub attributes: Vec<String>,
    /// Symmetric co-occurrence matrix, entries in [0,1], unit diagonal.
    pub cooccurrence: Vec<Vec<f64>>,
    /// Co-occurrence bias strength b in [0,1].
    pub bias: f64,
    /// Per-caption hallucination injection rate h in [0,1].
    pub hallucination_rate: f64,
    /// Probability that a mentioned noun carries an attribute.
    pub attribute_rate: f64,
    /// Std-dev of Gaussian noise added to each visual feature slot.
    pub feature_noise: f64,
    /// Fraction of an object's visual signature shared with its
    /// co-occurrence partners (0 = clean one-hot features).
    pub feature_blend: f64,
    /// Number of visual prefix slots per scene.
    pub visual_slots: usize,
}

impl SceneGrammar {
    /// Default 24-object testbed: eight clusters of three strongly
    /// co-occurring objects, weak cross-cluster coupling.
    pub fn default_testbed() -> Self {
        Self::clustered(3, 0.8, 0.01)
    }

    /// 24-object grammar with co-occurrence `within` inside consecutive
    /// clusters of `cluster_size` objects and `cross` elsewhere.
    pub fn clustered(cluster_size: usize, within: f64, cross: f64) -> Self {
        let objects = [
            "dog", "frisbee", "ball", "cat", "sofa", "lamp", "car", "bike", "clock", "boat",
            "dock", "gull", "horse", "fence", "barn", "cup", "plate", "table", "kite", "cloud",
            "hill", "book", "desk", "chair",
        ];
        let n = objects.len();
        let size = cluster_size.max(1);
        let mut c = vec![vec![cross; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    c[i][j] = 1.0;
                } else if i / size == j / size {
                    c[i][j] = within;
                }
            }
        }
        Self {
            objects: objects.iter().map(|s| s.to_string()).collect(),
            attributes: ["red", "blue", "green", "small", "big", "old"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            cooccurrence: c,
            bias: 0.8,
            hallucination_rate: 0.3,
            attribute_rate: 0.1,
            feature_noise: 0.1,
            feature_blend: 0.25,
            visual_slots: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.objects.len();
        if n == 0 {
            return Err(SceneError::InvalidGrammar("no objects".into()));
        }
        let mut seen = BTreeSet::new();
        for name in self.objects.iter().chain(&self.attributes) {
            if !seen.insert(name.as_str()) {
                return Err(SceneError::InvalidGrammar(format!(
                    "duplicate word {name:?}"
                )));
            }
        }
        if self.cooccurrence.len() != n || self.cooccurrence.iter().any(|r| r.len() != n) {
            return Err(SceneError::InvalidGrammar(format!(
                "co-occurrence matrix must be {n}x{n}"
            )));
        }
        for i in 0..n {
            if (self.cooccurrence[i][i] - 1.0).abs() > 1e-12 {
                return Err(SceneError::InvalidGrammar(format!(
                    "diagonal entry {i} must be 1"
                )));
            }
            for j in 0..n {
                let v = self.cooccurrence[i][j];
                if !(0.0..=1.0).contains(&v) {
                    return Err(SceneError::InvalidGrammar(format!(
                        "entry [{i}][{j}] = {v} outside [0,1]"
                    )));
                }
                if (v - self.cooccurrence[j][i]).abs() > 1e-12 {
                    return Err(SceneError::InvalidGrammar(format!(
                        "matrix not symmetric at [{i}][{j}]"
                    )));
                }
            }
        }
        for (name, v) in [
            ("bias", self.bias),
            ("hallucination_rate", self.hallucination_rate),
            ("attribute_rate", self.attribute_rate),
            ("feature_blend", self.feature_blend),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SceneError::InvalidGrammar(format!(
                    "{name} = {v} outside [0,1]"
                )));
            }
        }
        if !(self.feature_noise >= 0.0) {
            return Err(SceneError::InvalidGrammar("negative feature_noise".into()));
        }
        if self.visual_slots == 0 {
            return Err(SceneError::InvalidGrammar("visual_slots must be >= 1".into()));
        }
        Ok(())
    }

    /// Visual feature dimensionality (one coordinate per object).
    pub fn feature_dim(&self) -> usize {
        self.objects.len()
    }

    pub fn object_index(&self, name: &str) -> Result<usize> {
        self.objects
            .iter()
            .position(|o| o == name)
            .ok_or_else(|| SceneError::UnknownObject(name.to_string()))
    }

    /// Base visual embedding of an object: one-hot blended toward its
    /// co-occurrence partners so partners are visually confusable.
    fn object_embedding(&self, obj: usize) -> Vec<f64> {
        let n = self.objects.len();
        let mut emb = vec![0.0; n];
        let row = &self.cooccurrence[obj];
        let partner_mass: f64 = (0..n).filter(|&j| j != obj).map(|j| row[j]).sum();
        emb[obj] = 1.0 - self.feature_blend;
        if partner_mass > 0.0 {
            for j in 0..n {
                if j != obj {
                    emb[j] = self.feature_blend * row[j] / partner_mass;
                }
            }
        } else {
            emb[obj] = 1.0;
        }
        emb
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let grammar: Self = serde_json::from_str(&text)?;
        grammar.validate()?;
        Ok(grammar)
    }
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Fixed special tokens shared by captions and presence probes.
pub mod special {
    pub const BOS: u32 = 0;
    pub const EOS: u32 = 1;
    pub const PERIOD: u32 = 2;
    pub const A: u32 = 3;
    pub const PHOTO: u32 = 4;
    pub const OF: u32 = 5;
    pub const AND: u32 = 6;
    pub const IS: u32 = 7;
    pub const THERE: u32 = 8;
    pub const IN: u32 = 9;
    pub const THE: u32 = 10;
    pub const IMAGE: u32 = 11;
    pub const QMARK: u32 = 12;
    pub const YES: u32 = 13;
    pub const NO: u32 = 14;
    pub const COUNT: u32 = 15;

    pub const NAMES: [&str; COUNT as usize] = [
        "<bos>", "<eos>", ".", "a", "photo", "of", "and", "is", "there", "in", "the", "image",
        "?", "yes", "no",
    ];
}

/// Token vocabulary derived deterministically from a grammar:
/// special tokens, then attributes, then object nouns.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    attr_base: u32,
    object_base: u32,
}

impl Vocab {
    pub fn from_grammar(grammar: &SceneGrammar) -> Self {
        let mut words: Vec<String> =
            special::NAMES.iter().map(|s| s.to_string()).collect();
        let attr_base = words.len() as u32;
        words.extend(grammar.attributes.iter().cloned());
        let object_base = words.len() as u32;
        words.extend(grammar.objects.iter().cloned());
        Self {
            words,
            attr_base,
            object_base,
        }
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn word(&self, token: u32) -> Result<&str> {
        self.words
            .get(token as usize)
            .map(|s| s.as_str())
            .ok_or(SceneError::TokenOutOfRange(token, self.words.len()))
    }

    pub fn token_for_word(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    pub fn object_token(&self, obj: usize) -> u32 {
        self.object_base + obj as u32
    }

    pub fn attribute_token(&self, attr: usize) -> u32 {
        self.attr_base + attr as u32
    }

    /// Object index when `token` is an object noun.
    pub fn object_of_token(&self, token: u32) -> Option<usize> {
        if token >= self.object_base && (token as usize) < self.words.len() {
            Some((token - self.object_base) as usize)
        } else {
            None
        }
    }

    pub fn decode(&self, tokens: &[u32]) -> Result<Vec<String>> {
        tokens
            .iter()
            .map(|&t| self.word(t).map(|s| s.to_string()))
            .collect()
    }
}

/// Token sequence for the presence probe "is there a <object> in the image ?".
pub fn probe_prompt(vocab: &Vocab, object: usize) -> Vec<u32> {
    use special::*;
    vec![
        IS,
        THERE,
        A,
        vocab.object_token(object),
        IN,
        THE,
        IMAGE,
        QMARK,
    ]
}

// ---------------------------------------------------------------------------
// Scene / caption types
// ---------------------------------------------------------------------------

/// One synthetic scene: ground-truth present objects plus per-slot visual
/// feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    /// Present object indices, sorted ascending, no duplicates.
    pub present: Vec<usize>,
    /// `visual_slots x feature_dim` feature matrix.
    pub features: Matrix,
}

/// A caption with exact mention/hallucination labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub scene_id: u64,
    pub tokens: Vec<u32>,
    pub mentioned: BTreeSet<usize>,
    pub hallucinated: BTreeSet<usize>,
}

impl CaptionRecord {
    /// Hallucinated-to-mentioned ratio for this caption (0 when nothing is
    /// mentioned). This is the per-sample hallucination score used for
    /// pairwise causal-effect comparisons.
    pub fn hallucination_ratio(&self) -> f64 {
        if self.mentioned.is_empty() {
            0.0
        } else {
            self.hallucinated.len() as f64 / self.mentioned.len() as f64
        }
    }
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Draws a scene: 1-2 uniform base objects, then co-occurrence completion
/// as described in the module docs, then feature synthesis.
pub fn sample_scene(grammar: &SceneGrammar, id: u64, rng: &mut Rng) -> Scene {
    let n = grammar.objects.len();
    let base_count = 1 + rng.gen_range(2.min(n));
    let mut present: Vec<usize> = Vec::new();
    while present.len() < base_count {
        let cand = rng.gen_range(n);
        if !present.contains(&cand) {
            present.push(cand);
        }
    }

    // Completion pass: queue over present objects in insertion order.
    let mut cursor = 0;
    while cursor < present.len() && present.len() < MAX_OBJECTS.min(n) {
        let anchor = present[cursor];
        for cand in 0..n {
            if present.len() >= MAX_OBJECTS.min(n) {
                break;
            }
            if present.contains(&cand) {
                continue;
            }
            let p = grammar.bias * grammar.cooccurrence[anchor][cand];
            if p > 0.0 && rng.bernoulli(p) {
                present.push(cand);
            }
        }
        cursor += 1;
    }
    present.sort_unstable();

    let features = scene_features(grammar, &present, rng);
    Scene {
        id,
        present,
        features,
    }
}

fn scene_features(grammar: &SceneGrammar, present: &[usize], rng: &mut Rng) -> Matrix {
    let dim = grammar.feature_dim();
    let mut mean = vec![0.0; dim];
    for &obj in present {
        let emb = grammar.object_embedding(obj);
        for (m, e) in mean.iter_mut().zip(&emb) {
            *m += e / present.len() as f64;
        }
    }
    let mut features = Matrix::zeros(grammar.visual_slots, dim);
    for slot in 0..grammar.visual_slots {
        for d in 0..dim {
            let noise = rng.next_gaussian() * grammar.feature_noise;
            features.set(slot, d, mean[d] + noise);
        }
    }
    features
}

// ---------------------------------------------------------------------------
// Captions
// ---------------------------------------------------------------------------

fn push_mention(
    tokens: &mut Vec<u32>,
    vocab: &Vocab,
    grammar: &SceneGrammar,
    obj: usize,
    rng: &mut Rng,
) {
    if !grammar.attributes.is_empty() && rng.bernoulli(grammar.attribute_rate) {
        let attr = rng.gen_range(grammar.attributes.len());
        tokens.push(vocab.attribute_token(attr));
    }
    tokens.push(vocab.object_token(obj));
}

/// Template caption mentioning exactly the present objects:
/// `a photo of [attr] X and [attr] Y ... .` with seeded mention order.
pub fn gold_caption(
    scene: &Scene,
    grammar: &SceneGrammar,
    vocab: &Vocab,
    rng: &mut Rng,
) -> Vec<u32> {
    use special::*;
    let mut order = scene.present.clone();
    rng.shuffle(&mut order);
    let mut tokens = vec![A, PHOTO, OF];
    for (i, &obj) in order.iter().enumerate() {
        if i > 0 {
            tokens.push(AND);
        }
        push_mention(&mut tokens, vocab, grammar, obj, rng);
    }
    tokens.push(PERIOD);
    tokens
}

/// Gold caption plus, with probability `hallucination_rate`, one appended
/// absent object sampled proportionally to its co-occurrence with a
/// uniformly chosen present anchor. The hallucinated set is recorded
/// exactly.
pub fn biased_caption(
    scene: &Scene,
    grammar: &SceneGrammar,
    vocab: &Vocab,
    rng: &mut Rng,
    hallucination_rate: f64,
) -> CaptionRecord {
    use special::*;
    let mut tokens = gold_caption(scene, grammar, vocab, rng);
    let mut hallucinated = BTreeSet::new();

    if rng.bernoulli(hallucination_rate) {
        let n = grammar.objects.len();
        let absent: Vec<usize> = (0..n).filter(|o| !scene.present.contains(o)).collect();
        if !absent.is_empty() {
            let anchor = scene.present[rng.gen_range(scene.present.len())];
            let weights: Vec<f64> = absent
                .iter()
                .map(|&o| grammar.cooccurrence[anchor][o])
                .collect();
            let pick = match rng.choose_weighted(&weights) {
                Some(i) => absent[i],
                None => absent[rng.gen_range(absent.len())],
            };
            // Splice "... and <obj>" in before the final period.
            tokens.pop();
            tokens.push(AND);
            push_mention(&mut tokens, vocab, grammar, pick, rng);
            tokens.push(PERIOD);
            hallucinated.insert(pick);
        }
    }

    let mentioned = mention_extract(&tokens, vocab);
    CaptionRecord {
        scene_id: scene.id,
        tokens,
        mentioned,
        hallucinated,
    }
}

/// Exact set of object nouns appearing in `tokens`.
pub fn mention_extract(tokens: &[u32], vocab: &Vocab) -> BTreeSet<usize> {
    tokens
        .iter()
        .filter_map(|&t| vocab.object_of_token(t))
        .collect()
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

/// One corpus entry: a scene with its (possibly hallucination-injected)
/// training caption.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub scene: Scene,
    pub caption: CaptionRecord,
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    scene_id: u64,
    present: Vec<String>,
    caption_tokens: Vec<String>,
    hallucinated: Vec<String>,
    features: Vec<Vec<f64>>,
}

/// Generates `size` scenes with captions. Each scene draws from an
/// independent sub-stream `derive(seed, "scene/<id>")`, so corpus content
/// is a pure function of `(grammar, seed, size)`.
pub fn generate_corpus(
    grammar: &SceneGrammar,
    seed: u64,
    size: usize,
    hallucination_rate: f64,
) -> Vec<CorpusRecord> {
    let vocab = Vocab::from_grammar(grammar);
    (0..size as u64)
        .map(|id| {
            let mut rng = Rng::derive(seed, &format!("scene/{id}"));
            let scene = sample_scene(grammar, id, &mut rng);
            let caption = biased_caption(&scene, grammar, &vocab, &mut rng, hallucination_rate);
            CorpusRecord { scene, caption }
        })
        .collect()
}

pub fn write_corpus_jsonl(path: &Path, records: &[CorpusRecord], grammar: &SceneGrammar) -> Result<()> {
    let vocab = Vocab::from_grammar(grammar);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        let line = CorpusLine {
            scene_id: rec.scene.id,
            present: rec
                .scene
                .present
                .iter()
                .map(|&o| grammar.objects[o].clone())
                .collect(),
            caption_tokens: vocab.decode(&rec.caption.tokens)?,
            hallucinated: rec
                .caption
                .hallucinated
                .iter()
                .map(|&o| grammar.objects[o].clone())
                .collect(),
            features: (0..rec.scene.features.rows())
                .map(|r| rec.scene.features.row(r).to_vec())
                .collect(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_corpus_jsonl(path: &Path, grammar: &SceneGrammar) -> Result<Vec<CorpusRecord>> {
    let vocab = Vocab::from_grammar(grammar);
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(&line)
            .map_err(|source| SceneError::CorpusLine { line: idx + 1, source })?;
        let present: Vec<usize> = parsed
            .present
            .iter()
            .map(|n| grammar.object_index(n))
            .collect::<Result<_>>()?;
        let tokens: Vec<u32> = parsed
            .caption_tokens
            .iter()
            .map(|w| {
                vocab
                    .token_for_word(w)
                    .ok_or_else(|| SceneError::UnknownObject(w.clone()))
            })
            .collect::<Result<_>>()?;
        let hallucinated: BTreeSet<usize> = parsed
            .hallucinated
            .iter()
            .map(|n| grammar.object_index(n))
            .collect::<Result<_>>()?;
        let features = Matrix::from_rows(&parsed.features)
            .map_err(|e| SceneError::InvalidGrammar(format!("features: {e}")))?;
        let mentioned = mention_extract(&tokens, &vocab);
        records.push(CorpusRecord {
            scene: Scene {
                id: parsed.scene_id,
                present,
                features,
            },
            caption: CaptionRecord {
                scene_id: parsed.scene_id,
                tokens,
                mentioned,
                hallucinated,
            },
        });
    }
    Ok(records)
}
