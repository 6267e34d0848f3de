//! Adaptive attention modulation and the dual-path attention rewrites.
//!
//! Per decode step, each layer's VTACR is compared against its calibrated
//! base score. Layers below the base score receive a modulation delta that
//! raises the effective coefficients, after which the visual-favored path
//! boosts visual columns and attenuates text columns while the text-favored
//! path does the opposite. Rewrites operate on post-softmax weights and by
//! default renormalize each head row back to a distribution; the raw
//! (non-renormalized) form is kept behind a flag for ablation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::CalibrationTable;
use crate::microlm::{AttentionRecord, AttnRows};
use crate::vtacr::{TokenPartition, VtacrProfile};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InterveneError {
    #[error("base score must be positive, got {0}")]
    NonPositiveBase(f64),
    #[error("modulation inputs must be finite")]
    NonFiniteInput,
    #[error("effective text attenuation {beta_eff} >= 1 would flip text weights")]
    TextAttenuationOverflow { beta_eff: f64 },
    #[error("effective visual attenuation {alpha_eff} outside [0,1) for the text-favored path")]
    VisualAttenuationOverflow { alpha_eff: f64 },
    #[error("negative coefficient {name} = {value}")]
    NegativeCoefficient { name: &'static str, value: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("partition index {index} out of range for row length {len}")]
    PartitionOutOfRange { index: usize, len: usize },
    #[error("rewritten row has zero total mass (head {head})")]
    ZeroRowMass { head: usize },
    #[error("profile has {profile} layers but calibration table has {table}")]
    LayerCountMismatch { profile: usize, table: usize },
}

pub type Result<T> = std::result::Result<T, InterveneError>;

/// How the modulation delta treats the deficit `V - V_b`.
///
/// `Intent` uses the deficit magnitude, so modulation always strengthens
/// the configured coefficients. `Literal` keeps the signed ratio, which is
/// negative whenever it activates; it exists so the two behaviors can be
/// compared empirically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaMode {
    Intent,
    Literal,
}

/// All intervention knobs for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    /// Visual attention coefficient (boost on the visual-favored path,
    /// attenuation on the text-favored path).
    pub alpha: f64,
    /// Text attention coefficient (attenuation on the visual-favored path,
    /// boost on the text-favored path). Must stay below 1.
    pub beta: f64,
    /// Contrastive fusion strength.
    pub lambda: f64,
    /// Modulation ceiling T.
    pub mod_t: f64,
    /// Percentile used when fitting base scores.
    pub tau_pct: f64,
    pub delta_mode: DeltaMode,
    /// Renormalize rewritten rows back to distributions (default true).
    pub renormalize: bool,
    /// Count the current position as a text token (default true).
    pub self_in_text: bool,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.5,
            lambda: 0.2,
            mod_t: 0.2,
            tau_pct: 80.0,
            delta_mode: DeltaMode::Intent,
            renormalize: true,
            self_in_text: true,
        }
    }
}

impl InterventionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("mod_t", self.mod_t),
        ] {
            if !(value >= 0.0) {
                return Err(InterveneError::NegativeCoefficient { name, value });
            }
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(InterveneError::InvalidConfig(format!(
                "beta {} outside [0, 1)",
                self.beta
            )));
        }
        if !(0.0..=100.0).contains(&self.tau_pct) {
            return Err(InterveneError::InvalidConfig(format!(
                "tau_pct {} outside [0, 100]",
                self.tau_pct
            )));
        }
        Ok(())
    }
}

/// Per-layer effective coefficients for one decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCoeff {
    pub t_mod: f64,
    pub alpha_eff: f64,
    pub beta_eff: f64,
    /// True when the layer had no usable VTACR (or base score) and was left
    /// at the base coefficients with zero modulation.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCoefficients {
    pub layers: Vec<LayerCoeff>,
}

/// Modulation delta for one layer.
///
/// Returns 0 when `v >= v_b`. Below the base score, intent mode yields
/// `min(T * (v_b - v)/v_b, T)` (a positive boost capped at `T`), literal
/// mode `min(T * (v - v_b)/v_b, T)` (negative whenever active).
pub fn modulation_delta(v: f64, v_b: f64, t: f64, mode: DeltaMode) -> Result<f64> {
    if !v.is_finite() || !v_b.is_finite() || !t.is_finite() {
        return Err(InterveneError::NonFiniteInput);
    }
    if v_b <= 0.0 {
        return Err(InterveneError::NonPositiveBase(v_b));
    }
    if v < 0.0 {
        return Err(InterveneError::NegativeCoefficient {
            name: "vtacr",
            value: v,
        });
    }
    if v >= v_b {
        return Ok(0.0);
    }
    let ratio = match mode {
        DeltaMode::Intent => (v - v_b).abs() / v_b,
        DeltaMode::Literal => (v - v_b) / v_b,
    };
    Ok((t * ratio).min(t))
}

/// `alpha_eff = alpha + t_mod`, `beta_eff = beta + t_mod`; rejects an
/// effective text attenuation of 1 or more.
pub fn effective_coefficients(alpha: f64, beta: f64, t_mod: f64) -> Result<(f64, f64)> {
    if !alpha.is_finite() || !beta.is_finite() || !t_mod.is_finite() {
        return Err(InterveneError::NonFiniteInput);
    }
    let alpha_eff = alpha + t_mod;
    let beta_eff = beta + t_mod;
    if beta_eff >= 1.0 {
        return Err(InterveneError::TextAttenuationOverflow { beta_eff });
    }
    Ok((alpha_eff, beta_eff))
}

fn renormalize_rows(rows: &mut AttnRows) -> Result<()> {
    for head in 0..rows.heads() {
        let row = rows.row_mut(head);
        let sum: f64 = row.iter().sum();
        if !(sum > 1e-12) {
            return Err(InterveneError::ZeroRowMass { head });
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(())
}

fn check_partition(part: &TokenPartition, len: usize) -> Result<()> {
    for &i in part.visual().iter().chain(part.text()) {
        if i >= len {
            return Err(InterveneError::PartitionOutOfRange { index: i, len });
        }
    }
    Ok(())
}

/// In-place visual-favored rewrite of one step's attention rows:
/// visual columns gain `alpha_eff * |A|`, text columns lose
/// `beta_eff * |A|`. With both coefficients zero the rows are untouched
/// byte for byte.
pub fn rewrite_rows_visual_favored(
    rows: &mut AttnRows,
    part: &TokenPartition,
    alpha_eff: f64,
    beta_eff: f64,
    renormalize: bool,
) -> Result<()> {
    if !(alpha_eff >= 0.0) {
        return Err(InterveneError::NegativeCoefficient {
            name: "alpha_eff",
            value: alpha_eff,
        });
    }
    if !(0.0..1.0).contains(&beta_eff) {
        return Err(InterveneError::TextAttenuationOverflow { beta_eff });
    }
    check_partition(part, rows.len())?;
    if alpha_eff == 0.0 && beta_eff == 0.0 {
        return Ok(());
    }
    for head in 0..rows.heads() {
        let row = rows.row_mut(head);
        for &j in part.visual() {
            row[j] += alpha_eff * row[j].abs();
        }
        for &k in part.text() {
            row[k] -= beta_eff * row[k].abs();
        }
    }
    if renormalize {
        renormalize_rows(rows)?;
    }
    Ok(())
}

/// Mirror rewrite for the text-favored path: visual columns shrink by
/// `alpha_eff * |A|` (so `alpha_eff` must stay below 1 here), text columns
/// grow by `beta_eff * |A|`.
pub fn rewrite_rows_text_favored(
    rows: &mut AttnRows,
    part: &TokenPartition,
    alpha_eff: f64,
    beta_eff: f64,
    renormalize: bool,
) -> Result<()> {
    if !(0.0..1.0).contains(&alpha_eff) {
        return Err(InterveneError::VisualAttenuationOverflow { alpha_eff });
    }
    if !(0.0..1.0).contains(&beta_eff) {
        return Err(InterveneError::TextAttenuationOverflow { beta_eff });
    }
    check_partition(part, rows.len())?;
    if alpha_eff == 0.0 && beta_eff == 0.0 {
        return Ok(());
    }
    for head in 0..rows.heads() {
        let row = rows.row_mut(head);
        for &j in part.visual() {
            row[j] -= alpha_eff * row[j].abs();
        }
        for &k in part.text() {
            row[k] += beta_eff * row[k].abs();
        }
    }
    if renormalize {
        renormalize_rows(rows)?;
    }
    Ok(())
}

/// Pure-record wrapper around [`rewrite_rows_visual_favored`].
pub fn rewrite_visual_favored(
    record: &AttentionRecord,
    part: &TokenPartition,
    alpha_eff: f64,
    beta_eff: f64,
    renormalize: bool,
) -> Result<AttentionRecord> {
    let mut rows = record.rows().clone();
    rewrite_rows_visual_favored(&mut rows, part, alpha_eff, beta_eff, renormalize)?;
    Ok(AttentionRecord::new(record.layer(), rows))
}

/// Pure-record wrapper around [`rewrite_rows_text_favored`].
pub fn rewrite_text_favored(
    record: &AttentionRecord,
    part: &TokenPartition,
    alpha_eff: f64,
    beta_eff: f64,
    renormalize: bool,
) -> Result<AttentionRecord> {
    let mut rows = record.rows().clone();
    rewrite_rows_text_favored(&mut rows, part, alpha_eff, beta_eff, renormalize)?;
    Ok(AttentionRecord::new(record.layer(), rows))
}

/// Combines one step's VTACR profile with the calibration table into
/// per-layer effective coefficients. Layers with a degenerate VTACR or a
/// non-positive base score keep the base coefficients with zero
/// modulation.
pub fn step_coefficients(
    profile: &VtacrProfile,
    table: &CalibrationTable,
    config: &InterventionConfig,
) -> Result<LayerCoefficients> {
    if profile.layers.len() != table.layers.len() {
        return Err(InterveneError::LayerCountMismatch {
            profile: profile.layers.len(),
            table: table.layers.len(),
        });
    }
    let mut layers = Vec::with_capacity(profile.layers.len());
    for (layer, base) in profile.layers.iter().zip(&table.layers) {
        let (t_mod, degenerate) = match layer.vtacr {
            Some(v) if base.v_b > 0.0 => (
                modulation_delta(v, base.v_b, config.mod_t, config.delta_mode)?,
                false,
            ),
            _ => (0.0, true),
        };
        let (alpha_eff, beta_eff) = effective_coefficients(config.alpha, config.beta, t_mod)?;
        layers.push(LayerCoeff {
            t_mod,
            alpha_eff,
            beta_eff,
            degenerate,
        });
    }
    Ok(LayerCoefficients { layers })
}
