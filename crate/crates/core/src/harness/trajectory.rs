//! The propose, evaluate, refine loop for one (prompt, rollout).

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::context::{assemble_context, ContextPolicy, HistoryTurn, TokenCounter};
use super::fast::TurnOutcome;
use super::generator::{Generation, GenerationRequest, Generator};
use crate::api::{ApiError, CoordinatorApi, SubmitRequest, TaskSnapshot};
use crate::coordinator::TaskState;
use crate::eval::{CandidateSpec, EvalResult};
use crate::signals::batch::{Trajectory, TurnRecord};
use crate::signals::reward::{turn_reward, RewardConfig, TurnReward};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub prompt_id: String,
    /// Task descriptor handed to the generator verbatim.
    #[serde(default)]
    pub task: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub max_turns: usize,
    pub context: ContextPolicy,
    pub reward: RewardConfig,
    /// Per-task deadline passed to the coordinator; `None` uses its default.
    pub deadline_s: Option<f64>,
    /// How often to poll for a submitted task's result.
    pub poll_interval: Duration,
    /// Give up waiting for a result after this long; the turn is invalid.
    pub result_timeout: Duration,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            max_turns: 3,
            context: ContextPolicy::default(),
            reward: RewardConfig::default(),
            deadline_s: None,
            poll_interval: Duration::from_millis(2),
            result_timeout: Duration::from_secs(600),
        }
    }
}

/// Everything recorded about one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnLog {
    pub turn: usize,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<CandidateSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<EvalResult>,
    pub reward: TurnReward,
    pub context_turns: Vec<usize>,
    pub context_tokens: usize,
}

impl TurnLog {
    pub fn outcome(&self) -> TurnOutcome {
        match (&self.result, self.valid) {
            (Some(r), true) => TurnOutcome::from_result(r),
            _ => TurnOutcome::missing(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRun {
    pub prompt_id: String,
    pub rollout_index: usize,
    /// Full history (the external memory), independent of what the context
    /// policy showed the generator.
    pub turns: Vec<TurnLog>,
    /// The generator declared it was done before `max_turns`.
    pub stopped_early: bool,
}

impl TrajectoryRun {
    pub fn outcomes(&self) -> Vec<TurnOutcome> {
        self.turns.iter().map(TurnLog::outcome).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.turns.iter().map(|t| t.reward.total).collect()
    }

    /// Training view of this run.
    pub fn to_rl(&self) -> Trajectory {
        Trajectory::new(
            self.prompt_id.clone(),
            self.rollout_index,
            self.turns.iter().map(|t| TurnRecord::new(t.reward, t.valid)).collect(),
        )
    }
}

enum Awaited {
    Result(EvalResult),
    Invalid(String),
}

fn describe(candidate: &CandidateSpec) -> String {
    match (&candidate.code, &candidate.sim) {
        (Some(code), _) => code.clone(),
        (None, Some(sim)) => serde_json::to_string(sim).unwrap_or_default(),
        (None, None) => String::new(),
    }
}

/// Waits for this trajectory's own task; other tasks' results are never
/// consulted, so arrival order does not matter.
fn await_result(api: &dyn CoordinatorApi, task_id: &str, config: &TrajectoryConfig) -> Awaited {
    let started = Instant::now();
    loop {
        match api.query(task_id) {
            Ok(TaskSnapshot {
                state: TaskState::Completed,
                result: Some(r),
                ..
            }) => return Awaited::Result(r),
            Ok(TaskSnapshot {
                state: TaskState::Failed,
                result,
                failure,
                ..
            }) => {
                let failure = failure.unwrap_or_default();
                // A candidate that keeps killing its sandbox still gets
                // feedback and a zero reward; losing the task to timeouts or
                // dead workers says nothing about the candidate.
                return match result {
                    Some(r) if failure.starts_with("infrastructure") => Awaited::Result(r),
                    _ => Awaited::Invalid(format!("evaluation failed: {failure}")),
                };
            }
            Ok(_) => {}
            Err(e @ ApiError::NotFound(_)) => return Awaited::Invalid(e.to_string()),
            Err(e) => log::debug!("query {task_id}: {e}"),
        }
        if started.elapsed() >= config.result_timeout {
            return Awaited::Invalid(format!("no result within {:.1} s", config.result_timeout.as_secs_f64()));
        }
        std::thread::sleep(config.poll_interval);
    }
}

pub fn run_trajectory(
    prompt: &Prompt,
    rollout_index: usize,
    generator: &dyn Generator,
    api: &dyn CoordinatorApi,
    config: &TrajectoryConfig,
    counter: &dyn TokenCounter,
    seed: u64,
) -> TrajectoryRun {
    let mut history: Vec<HistoryTurn> = Vec::new();
    let mut turns = Vec::new();
    let mut stopped_early = false;
    for turn in 0..config.max_turns {
        let context = assemble_context(
            &prompt.prompt_id,
            &prompt.task,
            &history,
            &config.context,
            turn,
            counter,
        );
        let mut log = TurnLog {
            turn,
            valid: false,
            invalid_reason: None,
            task_id: None,
            candidate: None,
            result: None,
            reward: TurnReward::zero(),
            context_turns: context.selected_turns.clone(),
            context_tokens: context.token_estimate,
        };
        let request = GenerationRequest {
            rollout_index,
            seed,
            context,
        };
        let candidate = match generator.generate(&request) {
            Ok(Generation::Candidate(c)) => c,
            Ok(Generation::Stop { .. }) => {
                stopped_early = true;
                break;
            }
            Err(e) => {
                log.invalid_reason = Some(e.to_string());
                turns.push(log);
                continue;
            }
        };
        log.candidate = Some(candidate.clone());
        let submitted = api.submit(SubmitRequest {
            payload: candidate.clone(),
            deadline_s: config.deadline_s,
        });
        let task_id = match submitted {
            Ok(id) => id,
            Err(e) => {
                log.invalid_reason = Some(format!("submission failed: {e}"));
                history.push(HistoryTurn {
                    turn,
                    candidate: describe(&candidate),
                    feedback: format!("submission failed: {e}"),
                    reward: 0.0,
                });
                turns.push(log);
                continue;
            }
        };
        log.task_id = Some(task_id.clone());
        match await_result(api, &task_id, config) {
            Awaited::Result(result) => {
                log.valid = true;
                log.reward = turn_reward(&result, &config.reward);
                history.push(HistoryTurn {
                    turn,
                    candidate: describe(&candidate),
                    feedback: result.profiling.feedback_text.clone(),
                    reward: log.reward.total,
                });
                log.result = Some(result);
            }
            Awaited::Invalid(reason) => {
                history.push(HistoryTurn {
                    turn,
                    candidate: describe(&candidate),
                    feedback: reason.clone(),
                    reward: 0.0,
                });
                log.invalid_reason = Some(reason);
            }
        }
        turns.push(log);
    }
    TrajectoryRun {
        prompt_id: prompt.prompt_id.clone(),
        rollout_index,
        turns,
        stopped_early,
    }
}
