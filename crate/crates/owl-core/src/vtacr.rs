//! Attention decomposition into visual and textual contributions and the
//! per-layer visual-to-textual attention contribution ratio (VTACR).
//!
//! For the current decode position, each layer's post-softmax attention is
//! split by token partition: `nu` is the head-averaged mean weight on
//! visual prefix tokens, `tau` the same over text tokens, and
//! `VTACR = nu / tau`. Low values flag steps where generation leans on
//! textual history rather than visual evidence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::microlm::AttentionRecord;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VtacrError {
    #[error("visual index set is empty")]
    EmptyVisual,
    #[error("text index set is empty")]
    EmptyText,
    #[error("textual contribution is zero (degenerate denominator)")]
    DegenerateTau,
    #[error("partition index {index} out of range for sequence length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("partition sets overlap at index {0}")]
    Overlap(usize),
    #[error("expected records for layers 0..{expected}, found layer {found} at position {position}")]
    LayerMismatch {
        expected: usize,
        found: usize,
        position: usize,
    },
    #[error("no attention records supplied")]
    NoRecords,
    #[error("negative contribution input (nu={nu}, tau={tau})")]
    NegativeInput { nu: f64, tau: f64 },
}

pub type Result<T> = std::result::Result<T, VtacrError>;

// ---------------------------------------------------------------------------
// TokenPartition
// ---------------------------------------------------------------------------

/// Index sets for visual prefix tokens and text (instruction + history,
/// optionally the current token itself) positions. Sets are disjoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPartition {
    visual: Vec<usize>,
    text: Vec<usize>,
}

impl TokenPartition {
    pub fn new(visual: Vec<usize>, text: Vec<usize>) -> Result<Self> {
        for &v in &visual {
            if text.contains(&v) {
                return Err(VtacrError::Overlap(v));
            }
        }
        Ok(Self { visual, text })
    }

    /// Standard layout for this artifact: positions `0..num_visual` are the
    /// visual prefix, the rest of `0..seq_len` is text. With
    /// `self_in_text = false` the final (current) position belongs to
    /// neither set.
    pub fn prefix(num_visual: usize, seq_len: usize, self_in_text: bool) -> Self {
        let visual: Vec<usize> = (0..num_visual.min(seq_len)).collect();
        let text_end = if self_in_text {
            seq_len
        } else {
            seq_len.saturating_sub(1)
        };
        let text: Vec<usize> = (num_visual.min(seq_len)..text_end).collect();
        Self { visual, text }
    }

    pub fn visual(&self) -> &[usize] {
        &self.visual
    }

    pub fn text(&self) -> &[usize] {
        &self.text
    }

    pub fn validate_for_len(&self, len: usize) -> Result<()> {
        for &i in self.visual.iter().chain(&self.text) {
            if i >= len {
                return Err(VtacrError::IndexOutOfRange { index: i, len });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Profiles
// ---------------------------------------------------------------------------

/// One layer's decomposition for a single decode step. `vtacr` is `None`
/// when the textual contribution is zero, which can only happen when a
/// hook zeroed the text columns or the text set is empty; such layers are
/// flagged rather than dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerVtacr {
    pub nu: f64,
    pub tau: f64,
    pub vtacr: Option<f64>,
}

impl LayerVtacr {
    pub fn is_degenerate(&self) -> bool {
        self.vtacr.is_none()
    }
}

/// All-layer decomposition for one decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VtacrProfile {
    /// Decode step index (0-based over emitted tokens).
    pub step: usize,
    /// Token emitted at this step.
    pub token: u32,
    pub layers: Vec<LayerVtacr>,
}

impl VtacrProfile {
    /// Mean VTACR over non-degenerate layers, `None` if every layer is
    /// degenerate.
    pub fn layer_mean(&self) -> Option<f64> {
        let finite: Vec<f64> = self.layers.iter().filter_map(|l| l.vtacr).collect();
        if finite.is_empty() {
            None
        } else {
            Some(finite.iter().sum::<f64>() / finite.len() as f64)
        }
    }
}

fn mean_mass_over(record: &AttentionRecord, indices: &[usize]) -> f64 {
    let rows = record.rows();
    let mut total = 0.0;
    for head in 0..rows.heads() {
        let row = rows.row(head);
        for &j in indices {
            total += row[j];
        }
    }
    total / (rows.heads() as f64 * indices.len() as f64)
}

/// Head-averaged mean attention mass on visual prefix tokens:
/// `nu = (1 / (N * |V|)) * sum_{j in V} sum_{i=1..N} A[i][j]`.
pub fn visual_contribution(record: &AttentionRecord, part: &TokenPartition) -> Result<f64> {
    if part.visual.is_empty() {
        return Err(VtacrError::EmptyVisual);
    }
    part.validate_for_len(record.rows().len())?;
    Ok(mean_mass_over(record, &part.visual))
}

/// Mirror of [`visual_contribution`] over the text index set.
pub fn textual_contribution(record: &AttentionRecord, part: &TokenPartition) -> Result<f64> {
    if part.text.is_empty() {
        return Err(VtacrError::EmptyText);
    }
    part.validate_for_len(record.rows().len())?;
    Ok(mean_mass_over(record, &part.text))
}

/// `nu / tau`, erroring on a zero denominator so the caller decides policy.
pub fn vtacr_layer(nu: f64, tau: f64) -> Result<f64> {
    if nu < 0.0 || tau < 0.0 {
        return Err(VtacrError::NegativeInput { nu, tau });
    }
    if tau == 0.0 {
        return Err(VtacrError::DegenerateTau);
    }
    Ok(nu / tau)
}

/// Per-layer decomposition for one step. Records must cover layers
/// `0..L` in order. Layers with zero textual contribution come back
/// flagged (`vtacr: None`); an empty text set degenerates every layer.
pub fn profile_step(records: &[AttentionRecord], part: &TokenPartition) -> Result<VtacrProfile> {
    if records.is_empty() {
        return Err(VtacrError::NoRecords);
    }
    let expected = records.len();
    let mut layers = Vec::with_capacity(expected);
    for (position, record) in records.iter().enumerate() {
        if record.layer() != position {
            return Err(VtacrError::LayerMismatch {
                expected,
                found: record.layer(),
                position,
            });
        }
        let nu = visual_contribution(record, part)?;
        let tau = if part.text.is_empty() {
            0.0
        } else {
            textual_contribution(record, part)?
        };
        let vtacr = if tau > 0.0 { Some(nu / tau) } else { None };
        layers.push(LayerVtacr { nu, tau, vtacr });
    }
    Ok(VtacrProfile {
        step: 0,
        token: 0,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microlm::{AttentionRecord, AttnRows};
    use crate::tensorcore::Rng;

    fn record(layer: usize, rows: Vec<Vec<f64>>) -> AttentionRecord {
        AttentionRecord::new(layer, AttnRows::from_rows(&rows))
    }

    fn random_stochastic_record(layer: usize, heads: usize, len: usize, rng: &mut Rng) -> AttentionRecord {
        let rows: Vec<Vec<f64>> = (0..heads)
            .map(|_| {
                let raw: Vec<f64> = (0..len).map(|_| rng.next_f64() + 1e-6).collect();
                let sum: f64 = raw.iter().sum();
                raw.iter().map(|v| v / sum).collect()
            })
            .collect();
        record(layer, rows)
    }

    #[test]
    fn uniform_attention_gives_inverse_length() {
        let len = 5;
        let rows = vec![vec![1.0 / len as f64; len]; 2];
        let rec = record(0, rows);
        let part = TokenPartition::prefix(2, len, true);
        let nu = visual_contribution(&rec, &part).unwrap();
        let tau = textual_contribution(&rec, &part).unwrap();
        assert!((nu - 1.0 / len as f64).abs() < 1e-12);
        assert!((tau - 1.0 / len as f64).abs() < 1e-12);
        assert!((vtacr_layer(nu, tau).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_columns_give_zero_contribution() {
        let rows = vec![vec![0.0, 0.0, 0.5, 0.5], vec![0.0, 0.0, 0.25, 0.75]];
        let rec = record(0, rows);
        let part = TokenPartition::prefix(2, 4, true);
        assert_eq!(visual_contribution(&rec, &part).unwrap(), 0.0);
    }

    #[test]
    fn explicit_double_sum_example() {
        // N=2 heads, V={0,1}: (0.4+0.1+0.2+0.3)/(2*2) = 0.25
        let rows = vec![vec![0.4, 0.1, 0.3, 0.2], vec![0.2, 0.3, 0.1, 0.4]];
        let rec = record(0, rows);
        let part = TokenPartition::prefix(2, 4, true);
        assert!((visual_contribution(&rec, &part).unwrap() - 0.25).abs() < 1e-12);
        // Same layout over T={2,3}: (0.3+0.2+0.1+0.4)/(2*2) = 0.25
        assert!((textual_contribution(&rec, &part).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn vtacr_layer_arithmetic_and_guard() {
        assert!((vtacr_layer(0.02, 0.08).unwrap() - 0.25).abs() < 1e-12);
        assert!((vtacr_layer(0.3, 0.3).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(vtacr_layer(0.1, 0.0), Err(VtacrError::DegenerateTau)));
    }

    #[test]
    fn empty_visual_errors() {
        let rec = record(0, vec![vec![0.5, 0.5]]);
        let part = TokenPartition::new(vec![], vec![0, 1]).unwrap();
        assert!(matches!(
            visual_contribution(&rec, &part),
            Err(VtacrError::EmptyVisual)
        ));
    }

    #[test]
    fn oracle_equivalence_on_random_records() {
        // Independent oracle: literal double summation divided by N * |set|.
        let mut rng = Rng::new(99);
        for _ in 0..1000 {
            let heads = 1 + rng.gen_range(4);
            let num_visual = 1 + rng.gen_range(4);
            let len = num_visual + 1 + rng.gen_range(8);
            let rec = random_stochastic_record(0, heads, len, &mut rng);
            let part = TokenPartition::prefix(num_visual, len, true);

            let mut sum_v = 0.0;
            let mut sum_t = 0.0;
            for h in 0..heads {
                let row = rec.rows().row(h);
                for &j in part.visual() {
                    sum_v += row[j];
                }
                for &k in part.text() {
                    sum_t += row[k];
                }
            }
            let oracle_nu = sum_v / (heads as f64 * part.visual().len() as f64);
            let oracle_tau = sum_t / (heads as f64 * part.text().len() as f64);

            let nu = visual_contribution(&rec, &part).unwrap();
            let tau = textual_contribution(&rec, &part).unwrap();
            assert!((nu - oracle_nu).abs() < 1e-9);
            assert!((tau - oracle_tau).abs() < 1e-9);

            // Mass identity |V|*nu + |T|*tau == 1 for row-stochastic rows.
            let mass = part.visual().len() as f64 * nu + part.text().len() as f64 * tau;
            assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
        }
    }

    #[test]
    fn duplicating_head_rows_leaves_contributions_unchanged() {
        let mut rng = Rng::new(5);
        let rec = random_stochastic_record(0, 2, 6, &mut rng);
        let part = TokenPartition::prefix(2, 6, true);
        let doubled_rows: Vec<Vec<f64>> = (0..4)
            .map(|h| rec.rows().row(h % 2).to_vec())
            .collect();
        let doubled = record(0, doubled_rows);
        let nu1 = visual_contribution(&rec, &part).unwrap();
        let nu2 = visual_contribution(&doubled, &part).unwrap();
        assert!((nu1 - nu2).abs() < 1e-12);
    }

    #[test]
    fn vtacr_strictly_increases_with_visual_weight() {
        // Pre-renormalization property: bumping any visual weight with text
        // weights fixed strictly increases nu/tau.
        let mut rng = Rng::new(21);
        for _ in 0..100 {
            let rec = random_stochastic_record(0, 2, 8, &mut rng);
            let part = TokenPartition::prefix(3, 8, true);
            let nu = visual_contribution(&rec, &part).unwrap();
            let tau = textual_contribution(&rec, &part).unwrap();
            let base = vtacr_layer(nu, tau).unwrap();

            let mut bumped_rows: Vec<Vec<f64>> = (0..2).map(|h| rec.rows().row(h).to_vec()).collect();
            bumped_rows[rng.gen_range(2)][rng.gen_range(3)] += 0.05;
            let bumped = record(0, bumped_rows);
            let nu2 = visual_contribution(&bumped, &part).unwrap();
            let tau2 = textual_contribution(&bumped, &part).unwrap();
            assert!(vtacr_layer(nu2, tau2).unwrap() > base);
        }
    }

    #[test]
    fn profile_step_uniform_and_mismatch() {
        let len = 6;
        let uniform = vec![vec![1.0 / len as f64; len]; 2];
        let records = vec![record(0, uniform.clone()), record(1, uniform.clone())];
        let part = TokenPartition::prefix(2, len, true);
        let profile = profile_step(&records, &part).unwrap();
        assert_eq!(profile.layers.len(), 2);
        for layer in &profile.layers {
            assert!((layer.vtacr.unwrap() - 1.0).abs() < 1e-9);
        }

        let bad = vec![record(0, uniform.clone()), record(0, uniform)];
        assert!(matches!(
            profile_step(&bad, &part),
            Err(VtacrError::LayerMismatch { .. })
        ));
    }

    #[test]
    fn profile_step_flags_degenerate_layers() {
        // Text columns zeroed: tau == 0, flagged not dropped.
        let rows = vec![vec![0.5, 0.5, 0.0, 0.0]; 2];
        let records = vec![record(0, rows)];
        let part = TokenPartition::prefix(2, 4, true);
        let profile = profile_step(&records, &part).unwrap();
        assert!(profile.layers[0].is_degenerate());
        assert_eq!(profile.layers[0].nu, 0.5);
        assert!(profile.layer_mean().is_none());
    }
}
