//! Batch pipeline over `rl/v1` JSONL.
//!
//! Input, one trajectory per line:
//!
//! ```json
//! {"schema":"rl/v1","prompt_id":"p0","rollout_index":0,
//!  "turns":[{"reward":{"correctness":1,"speedup_clipped":1.5,"pr_ratio":0.8,"total":2.5},
//!            "valid":true,"token_logprobs_rollout":[-0.1],"token_logprobs_train":[-0.1]}]}
//! ```
//!
//! Output, one row per (prompt, rollout, turn), sorted by that key:
//!
//! ```json
//! {"schema":"rl/v1","prompt_id":"p0","rollout_index":0,"turn":0,"valid":true,
//!  "reward":2.5,"return":2.5,"advantage":0.0,"estimator":"trloo","group_size":1,
//!  "degenerate":true,"mrs":{"w":1.0,"decision":"kept"},"prs":{"p":1.0,"decision":"kept"},
//!  "keep":false}
//! ```
//!
//! Advantages are computed over each (prompt, turn) group of valid turns
//! before any filtering; the filters only set `keep`. Turns with no log-prob
//! traces skip the mismatch filter. A filter that runs after another one
//! rejected the sample is not evaluated and reports `null`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::advantage::{advantages, AdvantageGroup, Estimator};
use super::mrs::{mrs_filter, MrsConfig, MrsDecision, MrsError};
use super::prs::{prs_keep_probability, prs_sample, PrsConfig, PrsDecision};
use super::reward::{reward_to_go, RewardError, TurnReward};
use crate::worker::sim::SplitMix64;

pub const RL_SCHEMA: &str = "rl/v1";

fn rl_schema() -> String {
    RL_SCHEMA.to_string()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub reward: TurnReward,
    #[serde(default = "default_true")]
    pub valid: bool,
    #[serde(default)]
    pub token_logprobs_rollout: Vec<f64>,
    #[serde(default)]
    pub token_logprobs_train: Vec<f64>,
}

impl TurnRecord {
    pub fn new(reward: TurnReward, valid: bool) -> Self {
        Self {
            reward,
            valid,
            token_logprobs_rollout: Vec::new(),
            token_logprobs_train: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(default = "rl_schema")]
    pub schema: String,
    pub prompt_id: String,
    pub rollout_index: usize,
    pub turns: Vec<TurnRecord>,
}

impl Trajectory {
    pub fn new(prompt_id: impl Into<String>, rollout_index: usize, turns: Vec<TurnRecord>) -> Self {
        Self {
            schema: rl_schema(),
            prompt_id: prompt_id.into(),
            rollout_index,
            turns,
        }
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.turns.iter().map(|t| t.reward.total).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterOrder {
    MrsThenPrs,
    PrsThenMrs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalsConfig {
    pub gamma: f64,
    pub estimator: Estimator,
    pub mrs_enabled: bool,
    pub mrs: MrsConfig,
    pub prs_enabled: bool,
    pub prs: PrsConfig,
    pub order: FilterOrder,
    pub seed: u64,
    /// Trajectories longer than this are rejected; 0 disables the check.
    pub max_turns: usize,
}

impl Default for SignalsConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            estimator: Estimator::Trloo,
            mrs_enabled: true,
            mrs: MrsConfig::default(),
            prs_enabled: true,
            prs: PrsConfig::default(),
            order: FilterOrder::MrsThenPrs,
            seed: 0,
            max_turns: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum SignalsError {
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("line {line}: unsupported schema {schema:?}")]
    Schema { line: usize, schema: String },
    #[error("duplicate trajectory for prompt {prompt_id:?} rollout {rollout_index}")]
    Duplicate { prompt_id: String, rollout_index: usize },
    #[error("prompt {prompt_id:?} rollout {rollout_index} has {turns} turns, limit is {max}")]
    TooManyTurns {
        prompt_id: String,
        rollout_index: usize,
        turns: usize,
        max: usize,
    },
    #[error("prompt {prompt_id:?} rollout {rollout_index} turn {turn}: {source}")]
    Logprobs {
        prompt_id: String,
        rollout_index: usize,
        turn: usize,
        source: MrsError,
    },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrsOutcome {
    pub w: f64,
    pub decision: MrsDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrsOutcome {
    pub p: f64,
    pub decision: PrsDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalRow {
    pub schema: String,
    pub prompt_id: String,
    pub rollout_index: usize,
    pub turn: usize,
    pub valid: bool,
    pub reward: f64,
    #[serde(rename = "return")]
    pub return_: f64,
    /// `None` for invalid turns, which belong to no group.
    pub advantage: Option<f64>,
    pub estimator: Estimator,
    pub group_size: usize,
    pub degenerate: bool,
    pub mrs: Option<MrsOutcome>,
    pub prs: Option<PrsOutcome>,
    pub keep: bool,
}

pub fn read_trajectories<R: BufRead>(reader: R) -> Result<Vec<Trajectory>, SignalsError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory =
            serde_json::from_str(&line).map_err(|source| SignalsError::Parse { line: i + 1, source })?;
        if t.schema != RL_SCHEMA {
            return Err(SignalsError::Schema {
                line: i + 1,
                schema: t.schema,
            });
        }
        out.push(t);
    }
    Ok(out)
}

pub fn write_rows<W: Write>(rows: &[SignalRow], mut writer: W) -> Result<(), SignalsError> {
    for row in rows {
        serde_json::to_writer(&mut writer, row).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seed for the PRS draw of one sample; independent of batch order.
pub fn sample_seed(seed: u64, prompt_id: &str, rollout_index: usize, turn: usize) -> u64 {
    let key = seed ^ fnv1a(prompt_id) ^ ((rollout_index as u64) << 32 | turn as u64);
    SplitMix64::new(key).next_u64()
}

/// Builds the (prompt, turn) groups over valid turns, given per-trajectory
/// returns.
pub fn build_groups(trajectories: &[Trajectory], returns: &[Vec<f64>]) -> Vec<AdvantageGroup> {
    let mut groups: BTreeMap<(&str, usize), AdvantageGroup> = BTreeMap::new();
    for (traj, g) in trajectories.iter().zip(returns) {
        for (t, turn) in traj.turns.iter().enumerate() {
            if !turn.valid {
                continue;
            }
            let group = groups
                .entry((traj.prompt_id.as_str(), t))
                .or_insert_with(|| AdvantageGroup::new(traj.prompt_id.clone(), t, Vec::new(), Vec::new()));
            group.members.push(traj.rollout_index);
            group.returns.push(g[t]);
        }
    }
    groups.into_values().collect()
}

pub fn compute_signals(trajectories: &[Trajectory], config: &SignalsConfig) -> Result<Vec<SignalRow>, SignalsError> {
    // Canonical order keeps floating-point sums independent of input order.
    let mut sorted = trajectories.to_vec();
    sorted.sort_by(|a, b| (a.prompt_id.as_str(), a.rollout_index).cmp(&(b.prompt_id.as_str(), b.rollout_index)));
    let trajectories = sorted.as_slice();
    let mut seen = BTreeSet::new();
    for t in trajectories {
        if !seen.insert((t.prompt_id.as_str(), t.rollout_index)) {
            return Err(SignalsError::Duplicate {
                prompt_id: t.prompt_id.clone(),
                rollout_index: t.rollout_index,
            });
        }
        if config.max_turns > 0 && t.turns.len() > config.max_turns {
            return Err(SignalsError::TooManyTurns {
                prompt_id: t.prompt_id.clone(),
                rollout_index: t.rollout_index,
                turns: t.turns.len(),
                max: config.max_turns,
            });
        }
    }

    let returns = trajectories
        .iter()
        .map(|t| reward_to_go(&t.rewards(), config.gamma))
        .collect::<Result<Vec<_>, _>>()?;

    // (prompt, rollout, turn) -> (advantage, group size, degenerate)
    let mut adv: BTreeMap<(String, usize, usize), (f64, usize, bool)> = BTreeMap::new();
    let groups = build_groups(trajectories, &returns);
    for group in &groups {
        let a = advantages(group, config.estimator);
        for (member, value) in group.members.iter().zip(&a.values) {
            adv.insert(
                (group.prompt_id.clone(), *member, group.turn),
                (*value, group.len(), a.degenerate),
            );
        }
    }

    let mut rows = Vec::new();
    for (traj, g) in trajectories.iter().zip(&returns) {
        for (t, turn) in traj.turns.iter().enumerate() {
            let slot = adv.get(&(traj.prompt_id.clone(), traj.rollout_index, t)).copied();
            let (advantage, group_size, degenerate) = match slot {
                Some((a, n, d)) => (Some(a), n, d),
                None => (None, 0, false),
            };
            let mut row = SignalRow {
                schema: rl_schema(),
                prompt_id: traj.prompt_id.clone(),
                rollout_index: traj.rollout_index,
                turn: t,
                valid: turn.valid,
                reward: turn.reward.total,
                return_: g[t],
                advantage,
                estimator: config.estimator,
                group_size,
                degenerate,
                mrs: None,
                prs: None,
                keep: false,
            };
            if turn.valid {
                apply_filters(&mut row, turn, config)?;
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

fn apply_filters(row: &mut SignalRow, turn: &TurnRecord, config: &SignalsConfig) -> Result<(), SignalsError> {
    let run_mrs = |row: &mut SignalRow| -> Result<bool, SignalsError> {
        if !config.mrs_enabled || (turn.token_logprobs_train.is_empty() && turn.token_logprobs_rollout.is_empty()) {
            return Ok(true);
        }
        let v =
            mrs_filter(&turn.token_logprobs_train, &turn.token_logprobs_rollout, &config.mrs).map_err(|source| {
                SignalsError::Logprobs {
                    prompt_id: row.prompt_id.clone(),
                    rollout_index: row.rollout_index,
                    turn: row.turn,
                    source,
                }
            })?;
        row.mrs = Some(MrsOutcome {
            w: v.w,
            decision: v.decision,
        });
        Ok(v.decision.is_kept())
    };
    let run_prs = |row: &mut SignalRow| -> bool {
        if !config.prs_enabled {
            return true;
        }
        let correct = turn.reward.correctness == 1;
        let p = if correct {
            prs_keep_probability(turn.reward.pr_ratio, &config.prs)
        } else {
            0.0
        };
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, &row.prompt_id, row.rollout_index, row.turn));
        let decision = prs_sample(correct, p, &mut rng);
        row.prs = Some(PrsOutcome { p, decision });
        decision.is_kept()
    };
    let kept = match config.order {
        FilterOrder::MrsThenPrs => run_mrs(row)? && run_prs(row),
        FilterOrder::PrsThenMrs => run_prs(row) && run_mrs(row)?,
    };
    row.keep = kept && !row.degenerate;
    Ok(())
}
