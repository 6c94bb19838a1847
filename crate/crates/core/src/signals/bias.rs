//! Monte-Carlo measurement of the gradient scale of group-baseline
//! estimators on a softmax bandit, where the true policy gradient is known
//! in closed form.
//!
//! For a group of `N` i.i.d. actions, the in-group mean baseline includes
//! each sample's own return, so the expected estimator equals
//! `(1 - 1/N) * grad J`; the leave-one-out baseline does not, and its
//! expectation is `grad J`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::advantage::Estimator;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BiasError {
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("policy needs at least two arms with one reward per arm")]
    BadPolicy,
    #[error("trials must be positive")]
    NoTrials,
}

/// Softmax policy over a few arms with fixed per-arm rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBanditPolicy {
    pub logits: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Standard deviation of Gaussian noise added to each sampled reward.
    #[serde(default)]
    pub reward_noise: f64,
}

impl ToyBanditPolicy {
    pub fn new(logits: Vec<f64>, rewards: Vec<f64>) -> Result<Self, BiasError> {
        if logits.len() < 2 || logits.len() != rewards.len() {
            return Err(BiasError::BadPolicy);
        }
        Ok(Self {
            logits,
            rewards,
            reward_noise: 0.0,
        })
    }

    /// The five-arm policy used by the acceptance experiment.
    pub fn five_arm() -> Self {
        Self::new(vec![0.4, -0.3, 0.9, 0.0, -0.8], vec![1.0, 0.0, 2.5, 0.5, 3.0]).expect("valid")
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let max = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = self.logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / z).collect()
    }

    /// Expected reward `J = sum_a pi_a r_a`.
    pub fn expected_return(&self) -> f64 {
        self.probabilities().iter().zip(&self.rewards).map(|(p, r)| p * r).sum()
    }

    /// `dJ/dlogit_k = pi_k (r_k - J)`.
    pub fn analytic_gradient(&self) -> Vec<f64> {
        let pi = self.probabilities();
        let j = self.expected_return();
        pi.iter().zip(&self.rewards).map(|(p, r)| p * (r - j)).collect()
    }

    /// Score function `d log pi(a) / dlogit_k = 1[k = a] - pi_k`, added into
    /// `out` scaled by `weight`.
    fn add_score(pi: &[f64], action: usize, weight: f64, out: &mut [f64]) {
        for (k, (o, p)) in out.iter_mut().zip(pi).enumerate() {
            let indicator = if k == action { 1.0 } else { 0.0 };
            *o += weight * (indicator - p);
        }
    }
}

fn sample_index(cdf: &[f64], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0, 1].
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub estimator: Estimator,
    pub group_size: usize,
    pub trials: usize,
    pub seed: u64,
    pub analytic_gradient: Vec<f64>,
    pub mean_gradient: Vec<f64>,
    /// `mean_gradient[k] / analytic_gradient[k]`.
    pub componentwise_ratio: Vec<f64>,
    /// Least-squares scale `<mean, grad J> / <grad J, grad J>`; `None` when
    /// the analytic gradient vanishes and the ratio is undefined.
    pub shrinkage: Option<f64>,
    /// `1 - 1/N` for GRPO, `1` for leave-one-out.
    pub expected_shrinkage: f64,
    pub inconclusive: bool,
}

/// Averages the estimator over `trials` independent groups of `n` samples.
pub fn grpo_bias_experiment(
    policy: &ToyBanditPolicy,
    estimator: Estimator,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<BiasReport, BiasError> {
    if n < 2 {
        return Err(BiasError::GroupTooSmall(n));
    }
    if trials == 0 {
        return Err(BiasError::NoTrials);
    }
    let pi = policy.probabilities();
    let mut cdf = Vec::with_capacity(pi.len());
    let mut acc = 0.0;
    for p in &pi {
        acc += p;
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; pi.len()];
    let mut actions = vec![0usize; n];
    let mut returns = vec![0.0; n];
    let mut trial_grad = vec![0.0; pi.len()];

    for _ in 0..trials {
        for i in 0..n {
            let a = sample_index(&cdf, rng.random::<f64>());
            actions[i] = a;
            returns[i] = policy.rewards[a]
                + if policy.reward_noise > 0.0 {
                    policy.reward_noise * standard_normal(&mut rng)
                } else {
                    0.0
                };
        }
        let total: f64 = returns.iter().sum();
        trial_grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            let baseline = match estimator {
                Estimator::Grpo => total / n as f64,
                Estimator::Trloo => (total - returns[i]) / (n - 1) as f64,
            };
            ToyBanditPolicy::add_score(&pi, actions[i], returns[i] - baseline, &mut trial_grad);
        }
        for (s, g) in sum.iter_mut().zip(&trial_grad) {
            *s += g / n as f64;
        }
    }

    let mean_gradient: Vec<f64> = sum.iter().map(|s| s / trials as f64).collect();
    let analytic = policy.analytic_gradient();
    let norm2: f64 = analytic.iter().map(|g| g * g).sum();
    let inconclusive = norm2 < 1e-12;
    let shrinkage =
        (!inconclusive).then(|| mean_gradient.iter().zip(&analytic).map(|(m, g)| m * g).sum::<f64>() / norm2);
    let componentwise_ratio = mean_gradient
        .iter()
        .zip(&analytic)
        .map(|(m, g)| if g.abs() > 1e-12 { m / g } else { f64::NAN })
        .collect();
    Ok(BiasReport {
        estimator,
        group_size: n,
        trials,
        seed,
        analytic_gradient: analytic,
        mean_gradient,
        componentwise_ratio,
        shrinkage,
        expected_shrinkage: match estimator {
            Estimator::Grpo => 1.0 - 1.0 / n as f64,
            Estimator::Trloo => 1.0,
        },
        inconclusive,
    })
}
