//! Mismatch rejection sampling: drop samples whose trainer-side likelihood
//! drifted from the rollout engine's.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MrsError {
    #[error("log-prob traces are empty")]
    Empty,
    #[error("log-prob traces differ in length ({train} train vs {rollout} rollout)")]
    LengthMismatch { train: usize, rollout: usize },
    #[error("non-finite log-prob at token {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrsConfig {
    pub band_low: f64,
    pub band_high: f64,
    /// Minimum allowed per-token ratio `pi_train / pi_rollout`.
    pub token_veto: f64,
}

impl Default for MrsConfig {
    fn default() -> Self {
        Self {
            band_low: 0.999,
            band_high: 1.001,
            token_veto: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MrsDecision {
    Kept,
    GeoOutOfBand,
    TokenVeto,
}

impl MrsDecision {
    pub fn is_kept(self) -> bool {
        self == MrsDecision::Kept
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MrsVerdict {
    /// Geometric-mean importance ratio.
    pub w: f64,
    /// Smallest per-token log-ratio.
    pub min_log_ratio: f64,
    pub decision: MrsDecision,
}

fn check(train: &[f64], rollout: &[f64]) -> Result<(), MrsError> {
    if train.len() != rollout.len() {
        return Err(MrsError::LengthMismatch {
            train: train.len(),
            rollout: rollout.len(),
        });
    }
    if train.is_empty() {
        return Err(MrsError::Empty);
    }
    if let Some(i) = train
        .iter()
        .zip(rollout)
        .position(|(a, b)| !a.is_finite() || !b.is_finite())
    {
        return Err(MrsError::NonFinite(i));
    }
    Ok(())
}

/// `w = exp(mean_t(lp_train - lp_rollout))`.
pub fn mismatch_ratio(token_logprobs_train: &[f64], token_logprobs_rollout: &[f64]) -> Result<f64, MrsError> {
    check(token_logprobs_train, token_logprobs_rollout)?;
    let sum: f64 = token_logprobs_train
        .iter()
        .zip(token_logprobs_rollout)
        .map(|(t, r)| t - r)
        .sum();
    Ok((sum / token_logprobs_train.len() as f64).exp())
}

/// Band check on `w` first, then the per-token veto. The veto compares
/// log-ratios against `ln(token_veto)` so tiny ratios cannot underflow.
pub fn mrs_filter(
    token_logprobs_train: &[f64],
    token_logprobs_rollout: &[f64],
    config: &MrsConfig,
) -> Result<MrsVerdict, MrsError> {
    let w = mismatch_ratio(token_logprobs_train, token_logprobs_rollout)?;
    let min_log_ratio = token_logprobs_train
        .iter()
        .zip(token_logprobs_rollout)
        .map(|(t, r)| t - r)
        .fold(f64::INFINITY, f64::min);
    let decision = if !(config.band_low..=config.band_high).contains(&w) {
        MrsDecision::GeoOutOfBand
    } else if min_log_ratio < config.token_veto.ln() {
        MrsDecision::TokenVeto
    } else {
        MrsDecision::Kept
    };
    Ok(MrsVerdict {
        w,
        min_log_ratio,
        decision,
    })
}
