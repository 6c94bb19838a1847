//! Central task/worker state machine.
//!
//! Workers pull work with `next_task` and heartbeat while they run it. A periodic
//! [`Coordinator::sweep`] re-queues tasks whose holder missed its deadline or
//! stopped heartbeating. All state lives behind a single lock, so every
//! transition is atomic and linearizable per task and per worker. Each task
//! mutation is journaled to a [`StateStore`] before it becomes visible;
//! [`Coordinator::recover`] rebuilds state after a restart.

mod state;
pub mod store;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::api::{
    ApiError, Assignment, CoordinatorApi, Registration, ReportAck, ReportOutcome, SubmitRequest, TaskSnapshot,
};
use crate::clock::Clock;
use crate::eval::{CandidateSpec, EvalResult};

pub use state::{EvalTask, Event, FailureMarker, TaskState, WorkerRecord, WorkerStatus};
pub use store::{FileStore, MemoryStore, StateStore, StoreError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorConfig {
    pub max_attempts: u32,
    pub default_deadline_s: f64,
    pub liveness_timeout_s: f64,
    /// Journal entries between snapshot compactions.
    pub compact_every: usize,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            default_deadline_s: 300.0,
            liveness_timeout_s: 30.0,
            compact_every: 1000,
        }
    }
}

/// What a sweep changed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub requeued: Vec<String>,
    pub failed: Vec<String>,
    pub dead_workers: Vec<String>,
}

impl SweepReport {
    pub fn is_empty(&self) -> bool {
        self.requeued.is_empty() && self.failed.is_empty() && self.dead_workers.is_empty()
    }
}

type QueueKey = (Duration, String);

#[derive(Default)]
struct State {
    tasks: HashMap<String, EvalTask>,
    queue: BTreeSet<QueueKey>,
    workers: HashMap<String, WorkerRecord>,
    next_seq: u64,
    events: Vec<Event>,
    since_compact: usize,
}

pub struct Coordinator {
    config: CoordinatorConfig,
    clock: Arc<dyn Clock>,
    store: Arc<dyn StateStore>,
    state: Mutex<State>,
}

fn queue_key(task: &EvalTask) -> QueueKey {
    (task.submitted_at, task.task_id.clone())
}

fn parse_seq(task_id: &str) -> Option<u64> {
    task_id.strip_prefix("task-")?.parse().ok()
}

impl Coordinator {
    pub fn new(config: CoordinatorConfig, clock: Arc<dyn Clock>, store: Arc<dyn StateStore>) -> Self {
        Self {
            config,
            clock,
            store,
            state: Mutex::new(State::default()),
        }
    }

    /// Rebuilds a coordinator from `store`. Terminal tasks are kept verbatim;
    /// every other task goes back to `Queued` with its attempt count intact.
    /// Worker registrations are not persisted: workers re-register on their
    /// next call.
    pub fn recover(
        config: CoordinatorConfig,
        clock: Arc<dyn Clock>,
        store: Arc<dyn StateStore>,
    ) -> Result<Self, StoreError> {
        let tasks = store.load()?;
        let coordinator = Self::new(config, clock, store);
        {
            let mut st = coordinator.state.lock();
            let mut max_seq = None;
            for mut task in tasks {
                max_seq = max_seq.max(parse_seq(&task.task_id));
                if !task.state.is_terminal() {
                    st.events.push(Event::Recovered {
                        task_id: task.task_id.clone(),
                        from: task.state,
                    });
                    task.state = TaskState::Queued;
                    task.dispatched_at = None;
                    task.assigned_worker = None;
                    // Timestamps from the previous process are meaningless on
                    // this clock; recovered work sorts ahead of new
                    // submissions, ordered by id.
                    task.submitted_at = Duration::ZERO;
                    st.queue.insert(queue_key(&task));
                }
                st.tasks.insert(task.task_id.clone(), task);
            }
            st.next_seq = max_seq.map_or(st.tasks.len() as u64, |s| s + 1);
            let mut all: Vec<EvalTask> = st.tasks.values().cloned().collect();
            all.sort_by(|a, b| a.task_id.cmp(&b.task_id));
            coordinator.store.compact(&all)?;
        }
        Ok(coordinator)
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.config
    }

    fn now(&self) -> Duration {
        self.clock.now()
    }

    fn commit(&self, st: &mut State, task: EvalTask) -> Result<(), ApiError> {
        self.store.append(&task).map_err(|e| ApiError::Storage(e.to_string()))?;
        if let Some(old) = st.tasks.get(&task.task_id) {
            if old.state.is_pending() {
                st.queue.remove(&queue_key(old));
            }
        }
        if task.state.is_pending() {
            st.queue.insert(queue_key(&task));
        }
        st.tasks.insert(task.task_id.clone(), task);
        st.since_compact += 1;
        if st.since_compact >= self.config.compact_every {
            let mut all: Vec<EvalTask> = st.tasks.values().cloned().collect();
            all.sort_by(|a, b| a.task_id.cmp(&b.task_id));
            match self.store.compact(&all) {
                Ok(()) => st.since_compact = 0,
                Err(e) => log::warn!("snapshot compaction failed, journal retained: {e}"),
            }
        }
        Ok(())
    }

    pub fn submit_task(&self, payload: CandidateSpec, deadline_s: Option<f64>) -> Result<String, ApiError> {
        payload.validate().map_err(ApiError::Validation)?;
        let deadline_s = deadline_s.unwrap_or(self.config.default_deadline_s);
        if !(deadline_s.is_finite() && deadline_s > 0.0) {
            return Err(ApiError::Validation(format!(
                "deadline_s must be a positive number, got {deadline_s}"
            )));
        }
        let now = self.now();
        let mut st = self.state.lock();
        let task_id = format!("task-{:010}", st.next_seq);
        let task = EvalTask {
            task_id: task_id.clone(),
            payload,
            state: TaskState::Queued,
            attempts: 0,
            submitted_at: now,
            dispatched_at: None,
            deadline_s,
            assigned_worker: None,
            completed_by: None,
            failure: None,
            result: None,
        };
        self.commit(&mut st, task)?;
        st.next_seq += 1;
        st.events.push(Event::Submitted {
            task_id: task_id.clone(),
            at: now,
        });
        Ok(task_id)
    }

    pub fn register_worker(&self, worker_id: &str, capabilities: &[String]) -> Result<Registration, ApiError> {
        if worker_id.trim().is_empty() {
            return Err(ApiError::Validation("worker_id must be non-empty".into()));
        }
        let now = self.now();
        let liveness = self.config.liveness_timeout_s;
        let mut st = self.state.lock();
        let mut revived = false;
        if let Some(existing) = st.workers.get(worker_id).cloned() {
            let silent_for = now.saturating_sub(existing.last_heartbeat).as_secs_f64();
            match existing.status {
                WorkerStatus::Busy if silent_for <= liveness => {
                    return Err(ApiError::Conflict(format!(
                        "worker {worker_id} is live and holds task {}",
                        existing.current_task.as_deref().unwrap_or("?")
                    )));
                }
                WorkerStatus::Busy => {
                    // Stale instance: treat as dead before reviving.
                    self.mark_dead(&mut st, worker_id, now, &mut SweepReport::default())?;
                    revived = true;
                }
                WorkerStatus::Dead => revived = true,
                WorkerStatus::Idle => {}
            }
        }
        st.workers.insert(
            worker_id.to_string(),
            WorkerRecord {
                worker_id: worker_id.to_string(),
                capabilities: capabilities.iter().cloned().collect(),
                last_heartbeat: now,
                status: WorkerStatus::Idle,
                current_task: None,
            },
        );
        st.events.push(Event::WorkerRegistered {
            worker_id: worker_id.to_string(),
            revived,
            at: now,
        });
        Ok(Registration {
            worker_id: worker_id.to_string(),
            revived,
            liveness_timeout_s: liveness,
        })
    }

    fn live_worker<'a>(st: &'a mut State, worker_id: &str) -> Result<&'a mut WorkerRecord, ApiError> {
        match st.workers.get_mut(worker_id) {
            Some(w) if w.status != WorkerStatus::Dead => Ok(w),
            Some(_) => Err(ApiError::Unauthorized(format!(
                "worker {worker_id} was declared dead; re-register"
            ))),
            None => Err(ApiError::Unauthorized(format!("worker {worker_id} is not registered"))),
        }
    }

    pub fn heartbeat(&self, worker_id: &str, task_id: Option<&str>) -> Result<(), ApiError> {
        let now = self.now();
        let mut st = self.state.lock();
        let worker = Self::live_worker(&mut st, worker_id)?;
        worker.last_heartbeat = now;
        let holds = task_id.is_some() && worker.current_task.as_deref() == task_id;
        if let (true, Some(task_id)) = (holds, task_id) {
            if let Some(task) = st.tasks.get(task_id) {
                if task.state == TaskState::Dispatched {
                    let mut task = task.clone();
                    task.state = TaskState::Running;
                    self.commit(&mut st, task)?;
                    st.events.push(Event::Running {
                        task_id: task_id.to_string(),
                        worker_id: worker_id.to_string(),
                        at: now,
                    });
                }
            }
        }
        Ok(())
    }

    /// Re-queues an assigned task (attempts + 1) or fails it once attempts
    /// are exhausted. Releases the worker holding it.
    fn requeue_or_fail(
        &self,
        st: &mut State,
        task_id: &str,
        reason: FailureMarker,
        reported: Option<EvalResult>,
        now: Duration,
        report: &mut SweepReport,
    ) -> Result<ReportOutcome, ApiError> {
        let Some(old) = st.tasks.get(task_id) else {
            return Err(ApiError::NotFound(task_id.to_string()));
        };
        debug_assert!(old.state.is_assigned());
        let holder = old.assigned_worker.clone();
        let mut task = old.clone();
        task.assigned_worker = None;
        task.dispatched_at = None;
        let outcome = if task.attempts >= self.config.max_attempts {
            task.state = TaskState::Failed;
            let backend = task.payload.backend.clone();
            task.result = Some(reported.unwrap_or_else(|| {
                EvalResult::infrastructure_failure(&backend, format!("evaluation abandoned: {reason}"))
            }));
            task.failure = Some(reason.clone());
            self.commit(st, task)?;
            st.events.push(Event::Failed {
                task_id: task_id.to_string(),
                marker: reason,
                at: now,
            });
            report.failed.push(task_id.to_string());
            ReportOutcome::Failed
        } else {
            task.attempts += 1;
            task.state = TaskState::Queued;
            self.commit(st, task)?;
            st.events.push(Event::Requeued {
                task_id: task_id.to_string(),
                attempts: st.tasks[task_id].attempts,
                reason: reason.to_string(),
                at: now,
            });
            report.requeued.push(task_id.to_string());
            ReportOutcome::Requeued
        };
        if let Some(holder) = holder {
            if let Some(w) = st.workers.get_mut(&holder) {
                if w.current_task.as_deref() == Some(task_id) {
                    w.release();
                }
            }
            st.events.push(Event::Released {
                task_id: task_id.to_string(),
                worker_id: holder,
                at: now,
            });
        }
        Ok(outcome)
    }

    fn mark_dead(
        &self,
        st: &mut State,
        worker_id: &str,
        now: Duration,
        report: &mut SweepReport,
    ) -> Result<(), ApiError> {
        let held = st.workers.get(worker_id).and_then(|w| w.current_task.clone());
        if let Some(task_id) = held {
            let still_held = st
                .tasks
                .get(&task_id)
                .is_some_and(|t| t.state.is_assigned() && t.assigned_worker.as_deref() == Some(worker_id));
            if still_held {
                self.requeue_or_fail(st, &task_id, FailureMarker::WorkerLost, None, now, report)?;
            }
        }
        if let Some(w) = st.workers.get_mut(worker_id) {
            w.status = WorkerStatus::Dead;
            w.current_task = None;
        }
        st.events.push(Event::WorkerDead {
            worker_id: worker_id.to_string(),
            at: now,
        });
        report.dead_workers.push(worker_id.to_string());
        Ok(())
    }

    /// Hands the oldest matching task to `worker_id`. A worker that polls
    /// while still holding a task has abandoned it (the lane is single-task),
    /// so that task is re-queued first.
    pub fn next_task(&self, worker_id: &str) -> Result<Option<Assignment>, ApiError> {
        let now = self.now();
        let mut st = self.state.lock();
        let worker = Self::live_worker(&mut st, worker_id)?;
        worker.last_heartbeat = now;
        if let Some(held) = worker.current_task.clone() {
            let assigned_here = st
                .tasks
                .get(&held)
                .is_some_and(|t| t.state.is_assigned() && t.assigned_worker.as_deref() == Some(worker_id));
            if assigned_here {
                let reason = FailureMarker::Infrastructure("abandoned by worker".into());
                self.requeue_or_fail(&mut st, &held, reason, None, now, &mut SweepReport::default())?;
            }
            if let Some(w) = st.workers.get_mut(worker_id) {
                w.release();
            }
        }
        let caps = st.workers[worker_id].capabilities.clone();
        let candidate = st
            .queue
            .iter()
            .find(|(_, id)| caps.contains(&st.tasks[id].payload.backend))
            .map(|(_, id)| id.clone());
        let Some(task_id) = candidate else {
            return Ok(None);
        };
        let mut task = st.tasks[&task_id].clone();
        task.state = TaskState::Dispatched;
        task.dispatched_at = Some(now);
        task.assigned_worker = Some(worker_id.to_string());
        let assignment = Assignment {
            task_id: task_id.clone(),
            payload: task.payload.clone(),
            deadline_s: task.deadline_s,
        };
        self.commit(&mut st, task)?;
        let w = st.workers.get_mut(worker_id).expect("checked above");
        w.status = WorkerStatus::Busy;
        w.current_task = Some(task_id.clone());
        st.events.push(Event::Dispatched {
            task_id,
            worker_id: worker_id.to_string(),
            at: now,
        });
        Ok(Some(assignment))
    }

    pub fn report_result(&self, worker_id: &str, task_id: &str, result: EvalResult) -> Result<ReportAck, ApiError> {
        let now = self.now();
        let mut st = self.state.lock();
        let Some(task) = st.tasks.get(task_id).cloned() else {
            return Err(ApiError::NotFound(format!("task {task_id}")));
        };
        let ack = |outcome| ReportAck {
            task_id: task_id.to_string(),
            outcome,
        };
        if task.state.is_terminal() {
            if task.completed_by.as_deref() == Some(worker_id) {
                st.events.push(Event::DuplicateReport {
                    task_id: task_id.to_string(),
                    worker_id: worker_id.to_string(),
                    at: now,
                });
                return Ok(ack(ReportOutcome::Duplicate));
            }
            log::warn!("rejecting report for finished task {task_id} from non-owner {worker_id}");
            st.events.push(Event::StaleReport {
                task_id: task_id.to_string(),
                worker_id: worker_id.to_string(),
                at: now,
            });
            return Err(ApiError::Stale(format!("task {task_id} is already terminal")));
        }
        if !(task.state.is_assigned() && task.assigned_worker.as_deref() == Some(worker_id)) {
            log::warn!("rejecting stale report for {task_id} from {worker_id}");
            st.events.push(Event::StaleReport {
                task_id: task_id.to_string(),
                worker_id: worker_id.to_string(),
                at: now,
            });
            return Err(ApiError::Stale(format!(
                "task {task_id} is not assigned to worker {worker_id}"
            )));
        }
        if let Some(w) = st.workers.get_mut(worker_id) {
            w.last_heartbeat = now;
        }
        if result.infra_failure {
            let detail = result.status.detail.clone().unwrap_or_default();
            let outcome = self.requeue_or_fail(
                &mut st,
                task_id,
                FailureMarker::Infrastructure(detail),
                Some(result),
                now,
                &mut SweepReport::default(),
            )?;
            if outcome == ReportOutcome::Failed {
                if let Some(t) = st.tasks.get(task_id).cloned() {
                    let mut t = t;
                    t.completed_by = Some(worker_id.to_string());
                    self.commit(&mut st, t)?;
                }
            }
            return Ok(ack(outcome));
        }
        let mut task = task;
        task.state = TaskState::Completed;
        task.result = Some(result);
        task.completed_by = Some(worker_id.to_string());
        task.assigned_worker = None;
        self.commit(&mut st, task)?;
        if let Some(w) = st.workers.get_mut(worker_id) {
            w.release();
        }
        st.events.push(Event::Completed {
            task_id: task_id.to_string(),
            worker_id: worker_id.to_string(),
            at: now,
        });
        Ok(ack(ReportOutcome::Completed))
    }

    /// Re-queues (or fails) every assigned task past its deadline. Returns the
    /// ids that went back to the queue.
    pub fn reap_timeouts(&self) -> Vec<String> {
        let now = self.now();
        let mut st = self.state.lock();
        let mut report = SweepReport::default();
        self.reap_timeouts_locked(&mut st, now, &mut report);
        report.requeued
    }

    fn reap_timeouts_locked(&self, st: &mut State, now: Duration, report: &mut SweepReport) {
        let mut overdue: Vec<String> = st
            .tasks
            .values()
            .filter(|t| t.overdue(now))
            .map(|t| t.task_id.clone())
            .collect();
        overdue.sort();
        for id in overdue {
            if let Err(e) = self.requeue_or_fail(st, &id, FailureMarker::Timeout, None, now, report) {
                log::error!("timeout sweep could not persist {id}: {e}");
            }
        }
    }

    /// Marks silent workers dead and re-queues what they held.
    pub fn reap_dead_workers(&self) -> Vec<String> {
        let now = self.now();
        let mut st = self.state.lock();
        let mut report = SweepReport::default();
        self.reap_dead_locked(&mut st, now, &mut report);
        report.dead_workers
    }

    fn reap_dead_locked(&self, st: &mut State, now: Duration, report: &mut SweepReport) {
        let limit = self.config.liveness_timeout_s;
        let mut silent: Vec<String> = st
            .workers
            .values()
            .filter(|w| w.status != WorkerStatus::Dead)
            .filter(|w| now.saturating_sub(w.last_heartbeat).as_secs_f64() > limit)
            .map(|w| w.worker_id.clone())
            .collect();
        silent.sort();
        for id in silent {
            if let Err(e) = self.mark_dead(st, &id, now, report) {
                log::error!("liveness sweep could not persist worker {id}: {e}");
            }
        }
    }

    /// Liveness sweep followed by the deadline sweep, atomically.
    pub fn sweep(&self) -> SweepReport {
        let now = self.now();
        let mut st = self.state.lock();
        let mut report = SweepReport::default();
        self.reap_dead_locked(&mut st, now, &mut report);
        self.reap_timeouts_locked(&mut st, now, &mut report);
        report
    }

    pub fn query_task(&self, task_id: &str) -> Result<TaskSnapshot, ApiError> {
        let st = self.state.lock();
        let task = st
            .tasks
            .get(task_id)
            .ok_or_else(|| ApiError::NotFound(format!("task {task_id}")))?;
        Ok(TaskSnapshot {
            task_id: task.task_id.clone(),
            state: task.state,
            attempts: task.attempts,
            assigned_worker: task.assigned_worker.clone(),
            failure: task.failure.as_ref().map(ToString::to_string),
            result: if task.state.is_terminal() {
                task.result.clone()
            } else {
                None
            },
        })
    }

    pub fn task(&self, task_id: &str) -> Option<EvalTask> {
        self.state.lock().tasks.get(task_id).cloned()
    }

    pub fn tasks(&self) -> Vec<EvalTask> {
        let mut v: Vec<EvalTask> = self.state.lock().tasks.values().cloned().collect();
        v.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        v
    }

    pub fn worker(&self, worker_id: &str) -> Option<WorkerRecord> {
        self.state.lock().workers.get(worker_id).cloned()
    }

    pub fn workers(&self) -> Vec<WorkerRecord> {
        let mut v: Vec<WorkerRecord> = self.state.lock().workers.values().cloned().collect();
        v.sort_by(|a, b| a.worker_id.cmp(&b.worker_id));
        v
    }

    pub fn events(&self) -> Vec<Event> {
        self.state.lock().events.clone()
    }

    pub fn all_terminal(&self) -> bool {
        self.state.lock().tasks.values().all(|t| t.state.is_terminal())
    }
}

impl CoordinatorApi for Coordinator {
    fn submit(&self, request: SubmitRequest) -> Result<String, ApiError> {
        self.submit_task(request.payload, request.deadline_s)
    }
    fn query(&self, task_id: &str) -> Result<TaskSnapshot, ApiError> {
        self.query_task(task_id)
    }
    fn register(&self, worker_id: &str, capabilities: &[String]) -> Result<Registration, ApiError> {
        self.register_worker(worker_id, capabilities)
    }
    fn heartbeat(&self, worker_id: &str, task_id: Option<&str>) -> Result<(), ApiError> {
        Coordinator::heartbeat(self, worker_id, task_id)
    }
    fn next_task(&self, worker_id: &str) -> Result<Option<Assignment>, ApiError> {
        Coordinator::next_task(self, worker_id)
    }
    fn report(&self, worker_id: &str, task_id: &str, result: EvalResult) -> Result<ReportAck, ApiError> {
        self.report_result(worker_id, task_id, result)
    }
}
