//! Profiling-based rejection sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrsMode {
    /// Linear ramp of width `softness` above the cutoff.
    Soft,
    /// Keep iff `pr >= tau`.
    Hard,
}

impl std::str::FromStr for PrsMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "soft" => Ok(PrsMode::Soft),
            "hard" => Ok(PrsMode::Hard),
            other => Err(format!("unknown PRS mode {other:?} (expected soft or hard)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrsConfig {
    pub tau: f64,
    pub softness: f64,
    pub mode: PrsMode,
}

impl Default for PrsConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            softness: 0.1,
            mode: PrsMode::Soft,
        }
    }
}

/// `clip((pr - tau) / s, 0, 1)` in soft mode; a step at `tau` in hard mode
/// or when `s <= 0`.
pub fn prs_keep_probability(pr_ratio: f64, config: &PrsConfig) -> f64 {
    if config.mode == PrsMode::Hard || config.softness <= 0.0 {
        return if pr_ratio >= config.tau { 1.0 } else { 0.0 };
    }
    ((pr_ratio - config.tau) / config.softness).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrsDecision {
    Kept,
    Rejected,
    /// Incorrect samples are never filtered by PRS.
    Bypassed,
}

impl PrsDecision {
    pub fn is_kept(self) -> bool {
        self != PrsDecision::Rejected
    }
}

/// One Bernoulli(`p`) draw. `p = 1` always keeps and `p = 0` never does.
pub fn prs_sample<R: Rng + ?Sized>(correct: bool, keep_probability: f64, rng: &mut R) -> PrsDecision {
    if !correct {
        return PrsDecision::Bypassed;
    }
    if rng.random::<f64>() < keep_probability {
        PrsDecision::Kept
    } else {
        PrsDecision::Rejected
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn keep_probability_fixtures() {
        let cfg = PrsConfig::default();
        assert!((prs_keep_probability(0.35, &cfg) - 0.5).abs() < 1e-12);
        assert_eq!(prs_keep_probability(0.45, &cfg), 1.0);
        assert_eq!(prs_keep_probability(0.25, &cfg), 0.0);
    }

    #[test]
    fn hard_mode_is_a_step() {
        let cfg = PrsConfig {
            mode: PrsMode::Hard,
            ..PrsConfig::default()
        };
        assert_eq!(prs_keep_probability(0.3, &cfg), 1.0);
        assert_eq!(prs_keep_probability(0.299, &cfg), 0.0);
        assert_eq!(prs_keep_probability(0.35, &cfg), 1.0);
    }

    #[test]
    fn extremes_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            assert_eq!(prs_sample(true, 1.0, &mut rng), PrsDecision::Kept);
            assert_eq!(prs_sample(true, 0.0, &mut rng), PrsDecision::Rejected);
            assert_eq!(prs_sample(false, 0.0, &mut rng), PrsDecision::Bypassed);
        }
    }

    #[test]
    fn half_probability_keeps_about_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let kept = (0..10_000)
            .filter(|_| prs_sample(true, 0.5, &mut rng) == PrsDecision::Kept)
            .count();
        let frac = kept as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }
}
