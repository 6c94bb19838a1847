//! Turn-level advantages over groups of valid rollouts.

use serde::{Deserialize, Serialize};

/// Valid rollouts of one prompt at one turn, with their returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageGroup {
    pub prompt_id: String,
    pub turn: usize,
    /// Rollout indices, parallel to `returns`.
    pub members: Vec<usize>,
    pub returns: Vec<f64>,
}

impl AdvantageGroup {
    pub fn new(prompt_id: impl Into<String>, turn: usize, members: Vec<usize>, returns: Vec<f64>) -> Self {
        assert_eq!(members.len(), returns.len(), "one return per member");
        Self {
            prompt_id: prompt_id.into(),
            turn,
            members,
            returns,
        }
    }

    /// Anonymous group, handy for tests and ad-hoc use.
    pub fn from_returns(returns: &[f64]) -> Self {
        Self::new("", 0, (0..returns.len()).collect(), returns.to_vec())
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.returns.is_empty() {
            0.0
        } else {
            self.returns.iter().sum::<f64>() / self.returns.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Grpo,
    Trloo,
}

impl std::str::FromStr for Estimator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "grpo" => Ok(Estimator::Grpo),
            "trloo" => Ok(Estimator::Trloo),
            other => Err(format!("unknown estimator {other:?} (expected grpo or trloo)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advantages {
    pub values: Vec<f64>,
    /// Set when the group is too small for the estimator to be defined; the
    /// values are then zero and carry no gradient.
    pub degenerate: bool,
}

/// `A_i = G_i - mean(G)`; the mean includes `G_i` itself.
pub fn grpo_advantages(group: &AdvantageGroup) -> Advantages {
    let mean = group.mean();
    Advantages {
        values: group.returns.iter().map(|g| g - mean).collect(),
        degenerate: false,
    }
}

/// `A_i = G_i - mean_{j != i}(G_j)`. A singleton group has no leave-one-out
/// baseline: it gets advantage 0 and the degenerate flag.
pub fn trloo_advantages(group: &AdvantageGroup) -> Advantages {
    let n = group.len();
    if n <= 1 {
        return Advantages {
            values: vec![0.0; n],
            degenerate: true,
        };
    }
    let total: f64 = group.returns.iter().sum();
    let others = (n - 1) as f64;
    Advantages {
        values: group.returns.iter().map(|g| g - (total - g) / others).collect(),
        degenerate: false,
    }
}

pub fn advantages(group: &AdvantageGroup, estimator: Estimator) -> Advantages {
    match estimator {
        Estimator::Grpo => grpo_advantages(group),
        Estimator::Trloo => trloo_advantages(group),
    }
}
