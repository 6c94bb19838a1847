use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::eval::{CandidateSpec, EvalResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Queued,
    Dispatched,
    Running,
    Completed,
    Failed,
    Requeued,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Completed | TaskState::Failed)
    }

    /// Held by a worker.
    pub fn is_assigned(self) -> bool {
        matches!(self, TaskState::Dispatched | TaskState::Running)
    }

    /// Eligible for dispatch.
    pub fn is_pending(self) -> bool {
        matches!(self, TaskState::Queued | TaskState::Requeued)
    }

    /// The permitted lifecycle edges. `Requeued -> Queued` is the bookkeeping
    /// step taken right after a re-queue; `Requeued -> Dispatched` is allowed
    /// as well. Recovery after a coordinator restart resets assigned tasks to
    /// `Queued` directly.
    pub fn can_transition(self, to: TaskState) -> bool {
        use TaskState::*;
        matches!(
            (self, to),
            (Queued, Dispatched)
                | (Dispatched, Running)
                | (Dispatched, Completed)
                | (Dispatched, Failed)
                | (Running, Completed)
                | (Running, Failed)
                | (Dispatched, Requeued)
                | (Running, Requeued)
                | (Requeued, Queued)
                | (Requeued, Dispatched)
                | (Dispatched, Queued)
                | (Running, Queued)
        )
    }
}

/// Why a task ended up `Failed`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum FailureMarker {
    Timeout,
    WorkerLost,
    Infrastructure(String),
}

impl std::fmt::Display for FailureMarker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FailureMarker::Timeout => f.write_str("timeout"),
            FailureMarker::WorkerLost => f.write_str("worker_lost"),
            FailureMarker::Infrastructure(d) => write!(f, "infrastructure: {d}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub task_id: String,
    pub payload: CandidateSpec,
    pub state: TaskState,
    pub attempts: u32,
    pub submitted_at: Duration,
    pub dispatched_at: Option<Duration>,
    pub deadline_s: f64,
    pub assigned_worker: Option<String>,
    /// Worker whose report produced the terminal result.
    pub completed_by: Option<String>,
    pub failure: Option<FailureMarker>,
    pub result: Option<EvalResult>,
}

impl EvalTask {
    pub(crate) fn overdue(&self, now: Duration) -> bool {
        match (self.state.is_assigned(), self.dispatched_at) {
            (true, Some(at)) => now.saturating_sub(at).as_secs_f64() > self.deadline_s,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerStatus {
    Idle,
    Busy,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerRecord {
    pub worker_id: String,
    pub capabilities: BTreeSet<String>,
    pub last_heartbeat: Duration,
    pub status: WorkerStatus,
    pub current_task: Option<String>,
}

impl WorkerRecord {
    pub(crate) fn release(&mut self) {
        self.current_task = None;
        if self.status == WorkerStatus::Busy {
            self.status = WorkerStatus::Idle;
        }
    }
}

/// Append-only coordinator event, used for auditing invariants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum Event {
    Submitted {
        task_id: String,
        at: Duration,
    },
    WorkerRegistered {
        worker_id: String,
        revived: bool,
        at: Duration,
    },
    WorkerDead {
        worker_id: String,
        at: Duration,
    },
    Dispatched {
        task_id: String,
        worker_id: String,
        at: Duration,
    },
    Running {
        task_id: String,
        worker_id: String,
        at: Duration,
    },
    Released {
        task_id: String,
        worker_id: String,
        at: Duration,
    },
    Requeued {
        task_id: String,
        attempts: u32,
        reason: String,
        at: Duration,
    },
    Completed {
        task_id: String,
        worker_id: String,
        at: Duration,
    },
    Failed {
        task_id: String,
        marker: FailureMarker,
        at: Duration,
    },
    StaleReport {
        task_id: String,
        worker_id: String,
        at: Duration,
    },
    DuplicateReport {
        task_id: String,
        worker_id: String,
        at: Duration,
    },
    Recovered {
        task_id: String,
        from: TaskState,
    },
}
