//! Adam training loop over the synthetic corpus.
//!
//! Training sequences are captions (predict every next token from `<bos>`)
//! plus a configurable number of presence-probe QA sequences per scene,
//! which teach the answer-token readout the probing interface relies on.
//! QA sequences supervise only the answer and the closing `<eos>`.

use crate::scenegen::{probe_prompt, special, CorpusRecord, SceneGrammar, Vocab};
use crate::tensorcore::Rng;

use super::{loss_and_grads, ModelError, ModelParams, Result, TrainExample};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// QA probe sequences generated per scene (labels alternate yes/no).
    pub qa_per_scene: usize,
    /// Final learning rate as a fraction of the initial one (linear decay).
    pub lr_floor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            learning_rate: 3e-3,
            batch_size: 32,
            seed: 7,
            qa_per_scene: 2,
            lr_floor: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
        }
    }
}

/// Builds the training set: one caption sequence per record plus
/// `qa_per_scene` probe sequences with alternating positive/negative labels.
pub fn build_training_examples(
    corpus: &[CorpusRecord],
    grammar: &SceneGrammar,
    qa_per_scene: usize,
    rng: &mut Rng,
) -> Vec<TrainExample> {
    let vocab = Vocab::from_grammar(grammar);
    let n_objects = grammar.objects.len();
    let mut examples = Vec::with_capacity(corpus.len() * (1 + qa_per_scene));
    for record in corpus {
        let mut tokens = Vec::with_capacity(record.caption.tokens.len() + 2);
        tokens.push(special::BOS);
        tokens.extend_from_slice(&record.caption.tokens);
        tokens.push(special::EOS);
        let targets: Vec<Option<u32>> = (0..tokens.len())
            .map(|i| tokens.get(i + 1).copied())
            .collect();
        examples.push(TrainExample {
            features: record.scene.features.clone(),
            tokens,
            targets,
        });

        for q in 0..qa_per_scene {
            let positive = q % 2 == 0;
            let object = if positive {
                record.scene.present[rng.gen_range(record.scene.present.len())]
            } else {
                let absent: Vec<usize> = (0..n_objects)
                    .filter(|o| !record.scene.present.contains(o))
                    .collect();
                if absent.is_empty() {
                    continue;
                }
                absent[rng.gen_range(absent.len())]
            };
            let answer = if positive { special::YES } else { special::NO };
            let mut tokens = vec![special::BOS];
            tokens.extend(probe_prompt(&vocab, object));
            tokens.push(answer);
            tokens.push(special::EOS);
            let mut targets = vec![None; tokens.len()];
            // The "?" position predicts the answer, the answer predicts <eos>.
            targets[tokens.len() - 3] = Some(answer);
            targets[tokens.len() - 2] = Some(special::EOS);
            examples.push(TrainExample {
                features: record.scene.features.clone(),
                tokens,
                targets,
            });
        }
    }
    examples
}

/// Trains with Adam and a linear learning-rate decay. Returns the trained
/// parameters and one mean-loss trace entry per epoch. Aborts with
/// [`ModelError::NanLoss`] naming the optimizer step if the loss leaves the
/// finite range.
pub fn train(
    params: &ModelParams,
    corpus: &[CorpusRecord],
    grammar: &SceneGrammar,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let mut examples = build_training_examples(
        corpus,
        grammar,
        cfg.qa_per_scene,
        &mut Rng::derive(cfg.seed, "train/examples"),
    );

    let mut trained = params.clone();
    let n = trained.num_params();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let total_steps = cfg.epochs * examples.len().div_ceil(cfg.batch_size.max(1));

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        Rng::derive(cfg.seed, &format!("train/epoch/{epoch}")).shuffle(&mut order);
        let shuffled: Vec<TrainExample> = order.iter().map(|&i| examples[i].clone()).collect();
        examples = shuffled;

        let mut epoch_loss_weighted = 0.0;
        let mut epoch_targets = 0usize;
        for batch in examples.chunks(cfg.batch_size.max(1)) {
            step += 1;
            let out = loss_and_grads(&trained, batch)?;
            if !out.loss.is_finite() {
                return Err(ModelError::NanLoss { step });
            }
            epoch_loss_weighted += out.loss * out.target_count as f64;
            epoch_targets += out.target_count;

            let progress = if total_steps > 1 {
                (step - 1) as f64 / (total_steps - 1) as f64
            } else {
                0.0
            };
            let lr = cfg.learning_rate * (1.0 - (1.0 - cfg.lr_floor) * progress);
            let t = step as f64;
            let bc1 = 1.0 - cfg.adam_beta1.powf(t);
            let bc2 = 1.0 - cfg.adam_beta2.powf(t);
            let buf = trained.buf_mut();
            for i in 0..n {
                let g = out.grads[i];
                m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g;
                v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                buf[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
        trace.push(epoch_loss_weighted / epoch_targets as f64);
    }

    Ok((trained, trace))
}
