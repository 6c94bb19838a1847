//! K rollouts over a prompt set, with the Fast@p table per mode and per turn.

use std::io::BufRead;
use std::sync::atomic::{AtomicUsize, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::context::{ContextPolicy, TokenCounter};
use super::fast::{fast_at_p_upto, FastMode, DEFAULT_THRESHOLDS};
use super::generator::Generator;
use super::trajectory::{run_trajectory, Prompt, TrajectoryConfig, TrajectoryRun};
use crate::api::CoordinatorApi;
use crate::signals::batch::Trajectory;
use crate::signals::reward::RewardConfig;

pub const REPORT_SCHEMA: &str = "report/v1";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("prompt file line {line}: {message}")]
    Prompt { line: usize, message: String },
    #[error("duplicate prompt_id {0:?}")]
    DuplicatePrompt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads one prompt per non-blank line.
pub fn read_prompts(reader: impl BufRead) -> Result<Vec<Prompt>, BenchError> {
    let mut prompts: Vec<Prompt> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prompt = serde_json::from_str(&line).map_err(|e| BenchError::Prompt {
            line: i + 1,
            message: e.to_string(),
        })?;
        if p.prompt_id.is_empty() {
            return Err(BenchError::Prompt {
                line: i + 1,
                message: "empty prompt_id".into(),
            });
        }
        if !seen.insert(p.prompt_id.clone()) {
            return Err(BenchError::DuplicatePrompt(p.prompt_id));
        }
        prompts.push(p);
    }
    Ok(prompts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub rollouts: usize,
    pub max_turns: usize,
    pub context: ContextPolicy,
    pub reward: RewardConfig,
    pub seed: u64,
    /// Trajectories in flight at once.
    pub parallel: usize,
    pub thresholds: Vec<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            rollouts: 8,
            max_turns: 3,
            context: ContextPolicy::default(),
            reward: RewardConfig::default(),
            seed: 0,
            parallel: 8,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

/// Fast@p after the first `turns` turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastRow {
    pub turns: usize,
    pub mode: FastMode,
    pub p: f64,
    pub hits: usize,
    pub samples: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnSummary {
    pub turn: usize,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
    pub hacked: bool,
    pub speedup_raw: Option<f64>,
    pub reward: f64,
    pub context_turns: Vec<usize>,
    pub context_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub prompt_id: String,
    pub rollout_index: usize,
    pub stopped_early: bool,
    pub turns: Vec<TurnSummary>,
}

impl TrajectorySummary {
    // Task ids and wall-clock times are left out so reruns compare equal.
    fn from_run(run: &TrajectoryRun) -> Self {
        Self {
            prompt_id: run.prompt_id.clone(),
            rollout_index: run.rollout_index,
            stopped_early: run.stopped_early,
            turns: run
                .turns
                .iter()
                .map(|t| TurnSummary {
                    turn: t.turn,
                    valid: t.valid,
                    invalid_reason: t.invalid_reason.clone(),
                    status: t.result.as_ref().map(|r| r.status.status.as_str().to_string()),
                    hacked: t.result.as_ref().is_some_and(|r| r.hacking.hacked),
                    speedup_raw: t.result.as_ref().and_then(|r| r.speedup_raw),
                    reward: t.reward.total,
                    context_turns: t.context_turns.clone(),
                    context_tokens: t.context_tokens,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub config: BenchConfig,
    /// Fully resolved settings of the invoking program, if it supplied them.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub settings: serde_json::Value,
    pub prompts: usize,
    pub samples: usize,
    pub fast: Vec<FastRow>,
    pub trajectories: Vec<TrajectorySummary>,
}

impl Report {
    /// Looks up one cell of the Fast@p table.
    pub fn fast_value(&self, turns: usize, mode: FastMode, p: f64) -> Option<f64> {
        self.fast
            .iter()
            .find(|r| r.turns == turns && r.mode == mode && r.p == p)
            .map(|r| r.value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_text(&self) -> String {
        let mut out = format!(
            "{} prompts x {} rollouts, up to {} turns ({} samples)\n",
            self.prompts, self.config.rollouts, self.config.max_turns, self.samples
        );
        for mode in [FastMode::LastTurn, FastMode::BestOfHistory] {
            out.push_str(&format!("\n{mode:?}\n  T "));
            for p in &self.config.thresholds {
                out.push_str(&format!("{:>10}", format!("Fast@{p}")));
            }
            out.push('\n');
            for t in 1..=self.config.max_turns {
                out.push_str(&format!("{t:>3} "));
                for p in &self.config.thresholds {
                    let v = self.fast_value(t, mode, *p).unwrap_or(0.0);
                    out.push_str(&format!("{:>9.1}%", v * 100.0));
                }
                out.push('\n');
            }
        }
        out
    }
}

pub struct BenchOutcome {
    pub report: Report,
    /// Full runs, sorted by (prompt_id, rollout_index).
    pub runs: Vec<TrajectoryRun>,
}

impl BenchOutcome {
    pub fn rl_trajectories(&self) -> Vec<Trajectory> {
        self.runs.iter().map(TrajectoryRun::to_rl).collect()
    }
}

/// Runs every (prompt, rollout) pair with up to `parallel` trajectories in
/// flight. Output order does not depend on completion order.
pub fn run_benchmark(
    prompts: &[Prompt],
    generator: &dyn Generator,
    api: &dyn CoordinatorApi,
    config: &BenchConfig,
    trajectory: &TrajectoryConfig,
    counter: &dyn TokenCounter,
) -> BenchOutcome {
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| (0..config.rollouts).map(move |r| (p, r)))
        .collect();
    let tcfg = TrajectoryConfig {
        max_turns: config.max_turns,
        context: config.context.clone(),
        reward: config.reward.clone(),
        ..trajectory.clone()
    };
    let slots: Vec<Mutex<Option<TrajectoryRun>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..config.parallel.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(p, r)) = jobs.get(i) else { break };
                let run = run_trajectory(&prompts[p], r, generator, api, &tcfg, counter, config.seed);
                *slots[i].lock() = Some(run);
            });
        }
    });
    let mut runs: Vec<TrajectoryRun> = slots.into_iter().filter_map(Mutex::into_inner).collect();
    runs.sort_by(|a, b| (a.prompt_id.as_str(), a.rollout_index).cmp(&(b.prompt_id.as_str(), b.rollout_index)));

    let outcomes: Vec<_> = runs.iter().map(TrajectoryRun::outcomes).collect();
    let mut fast = Vec::new();
    if !runs.is_empty() {
        for mode in [FastMode::LastTurn, FastMode::BestOfHistory] {
            for turns in 1..=config.max_turns {
                for &p in &config.thresholds {
                    let f = fast_at_p_upto(&outcomes, p, mode, turns);
                    fast.push(FastRow {
                        turns,
                        mode,
                        p,
                        hits: f.hits,
                        samples: f.samples,
                        value: f.value,
                    });
                }
            }
        }
    }
    let report = Report {
        schema: REPORT_SCHEMA.to_string(),
        config: config.clone(),
        settings: serde_json::Value::Null,
        prompts: prompts.len(),
        samples: runs.len(),
        fast,
        trajectories: runs.iter().map(TrajectorySummary::from_run).collect(),
    };
    BenchOutcome { report, runs }
}
