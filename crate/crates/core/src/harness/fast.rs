//! Fast@p: the fraction of samples that pass cleanly (correct, no hacking)
//! while running at least `p` times faster than the reference.

use serde::{Deserialize, Serialize};

use crate::eval::EvalResult;

pub const DEFAULT_THRESHOLDS: [f64; 4] = [1.0, 1.2, 1.5, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FastMode {
    /// Judge the final turn.
    LastTurn,
    /// Judge the best turn so far.
    BestOfHistory,
}

/// The parts of an evaluation Fast@p looks at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub pass: bool,
    pub hacked: bool,
    pub speedup_raw: Option<f64>,
}

impl TurnOutcome {
    pub fn from_result(result: &EvalResult) -> Self {
        Self {
            pass: result.status.is_pass(),
            hacked: result.hacking.hacked,
            speedup_raw: result.speedup_raw,
        }
    }

    /// A turn with no usable evaluation.
    pub fn missing() -> Self {
        Self {
            pass: false,
            hacked: false,
            speedup_raw: None,
        }
    }

    /// Speedup if this turn is eligible at all.
    pub fn qualifying_speedup(&self) -> Option<f64> {
        if self.pass && !self.hacked {
            self.speedup_raw
        } else {
            None
        }
    }

    pub fn meets(&self, p: f64) -> bool {
        self.qualifying_speedup().is_some_and(|s| s >= p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastAtP {
    pub p: f64,
    pub mode: FastMode,
    pub hits: usize,
    pub samples: usize,
    pub value: f64,
}

/// Whether one sample (its turns in order) counts, looking only at the first
/// `turns` turns. A sample that stopped early is judged on what it has.
pub fn sample_hits(sample: &[TurnOutcome], p: f64, mode: FastMode, turns: usize) -> bool {
    let seen = &sample[..turns.min(sample.len())];
    match mode {
        FastMode::LastTurn => seen.last().is_some_and(|t| t.meets(p)),
        FastMode::BestOfHistory => seen.iter().any(|t| t.meets(p)),
    }
}

/// Pooled Fast@p over every (prompt, sample) pair, using the first `turns`
/// turns of each sample.
pub fn fast_at_p_upto(samples: &[Vec<TurnOutcome>], p: f64, mode: FastMode, turns: usize) -> FastAtP {
    let hits = samples.iter().filter(|s| sample_hits(s, p, mode, turns)).count();
    FastAtP {
        p,
        mode,
        hits,
        samples: samples.len(),
        value: if samples.is_empty() {
            0.0
        } else {
            hits as f64 / samples.len() as f64
        },
    }
}

pub fn fast_at_p(samples: &[Vec<TurnOutcome>], p: f64, mode: FastMode) -> FastAtP {
    fast_at_p_upto(samples, p, mode, usize::MAX)
}
