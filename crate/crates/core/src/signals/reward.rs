use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::EvalResult;

pub const DEFAULT_SPEEDUP_CLIP: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("runtimes must be positive and finite (reference {reference}, kernel {kernel})")]
    NonPositiveRuntime { reference: f64, kernel: f64 },
    #[error("discount must lie in [0, 1], got {0}")]
    BadDiscount(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub speedup_clip: f64,
    /// Add the profiling ratio of correct kernels to the reward.
    pub pr_enabled: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            speedup_clip: DEFAULT_SPEEDUP_CLIP,
            pr_enabled: false,
        }
    }
}

/// Per-turn reward and its components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnReward {
    pub correctness: u8,
    pub speedup_clipped: f64,
    pub pr_ratio: f64,
    pub total: f64,
}

impl TurnReward {
    pub fn zero() -> Self {
        Self::default()
    }

    /// `C + C*speedup`, plus `C*pr` when `pr_enabled`. The ratio is recorded
    /// either way so that rejection sampling can use it.
    pub fn from_components(correct: bool, speedup_clipped: f64, pr_ratio: f64, pr_enabled: bool) -> Self {
        if !correct {
            return Self::zero();
        }
        let bonus = if pr_enabled { pr_ratio } else { 0.0 };
        Self {
            correctness: 1,
            speedup_clipped,
            pr_ratio,
            total: 1.0 + speedup_clipped + bonus,
        }
    }
}

/// `min(t_reference / t_kernel, clip)`.
pub fn clip_speedup(t_reference: f64, t_kernel: f64, clip: f64) -> Result<f64, RewardError> {
    if !(t_reference > 0.0 && t_kernel > 0.0 && t_reference.is_finite() && t_kernel.is_finite()) {
        return Err(RewardError::NonPositiveRuntime {
            reference: t_reference,
            kernel: t_kernel,
        });
    }
    Ok((t_reference / t_kernel).min(clip))
}

/// Reward for one evaluated turn. Anything not correct-and-unhacked scores 0.
pub fn turn_reward(result: &EvalResult, config: &RewardConfig) -> TurnReward {
    if !result.is_rewardable() {
        return TurnReward::zero();
    }
    let speedup = match result.speedup_raw {
        Some(s) if s.is_finite() && s > 0.0 => s.min(config.speedup_clip),
        _ => return TurnReward::zero(),
    };
    let pr = result.profiling.pr_ratio.unwrap_or(0.0).clamp(0.0, 1.0);
    TurnReward::from_components(true, speedup, pr, config.pr_enabled)
}

/// `G_t = sum_{t' >= t} gamma^(t'-t) R_t'`, computed right to left.
pub fn reward_to_go(rewards: &[f64], gamma: f64) -> Result<Vec<f64>, RewardError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(RewardError::BadDiscount(gamma));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clip_fixtures() {
        assert_eq!(clip_speedup(10.0, 2.0, 3.0).unwrap(), 3.0);
        assert_eq!(clip_speedup(10.0, 10.0, 3.0).unwrap(), 1.0);
        assert_eq!(clip_speedup(9.0, 6.0, 3.0).unwrap(), 1.5);
        assert!(clip_speedup(0.0, 1.0, 3.0).is_err());
        assert!(clip_speedup(1.0, -1.0, 3.0).is_err());
    }

    #[test]
    fn reward_to_go_fixtures() {
        assert_eq!(reward_to_go(&[1.0, 2.0, 3.0], 1.0).unwrap(), vec![6.0, 5.0, 3.0]);
        assert_eq!(reward_to_go(&[1.0, 2.0, 3.0], 0.0).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(reward_to_go(&[0.0, 0.0, 0.0], 1.0).unwrap(), vec![0.0, 0.0, 0.0]);
        assert_eq!(reward_to_go(&[1.0, 1.0], 0.5).unwrap(), vec![1.5, 1.0]);
        assert!(reward_to_go(&[1.0], 1.5).is_err());
        assert!(reward_to_go(&[], 1.0).unwrap().is_empty());
    }

    #[test]
    fn incorrect_turn_scores_zero() {
        let r = TurnReward::from_components(false, 2.0, 0.9, true);
        assert_eq!(r, TurnReward::zero());
    }

    proptest! {
        #[test]
        fn undiscounted_returns_telescope(rs in proptest::collection::vec(0.0f64..5.0, 1..12)) {
            let g = reward_to_go(&rs, 1.0).unwrap();
            for t in 0..rs.len() - 1 {
                prop_assert!((g[t] - g[t + 1] - rs[t]).abs() < 1e-9);
            }
            prop_assert!((g[rs.len() - 1] - rs[rs.len() - 1]).abs() < 1e-12);
        }

        #[test]
        fn reward_is_monotone_in_components(s1 in 0.0f64..3.0, s2 in 0.0f64..3.0, p1 in 0.0f64..1.0, p2 in 0.0f64..1.0) {
            let (slo, shi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let (plo, phi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            let lo = TurnReward::from_components(true, slo, plo, true).total;
            prop_assert!(TurnReward::from_components(true, shi, plo, true).total >= lo);
            prop_assert!(TurnReward::from_components(true, slo, phi, true).total >= lo);
        }
    }
}
