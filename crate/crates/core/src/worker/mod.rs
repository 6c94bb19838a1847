//! Worker runtime: pull a task, run it in a sandbox, apply the toolkits,
//! report, repeat. One worker is one execution lane; it never holds more
//! than one task.

pub mod backend;
pub mod sandbox;
pub mod sim;
pub mod toolkits;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::api::{ApiError, Assignment, CoordinatorApi, ReportOutcome};
use crate::eval::{CandidateSpec, CorrectnessStatus, EvalResult, FailureDiagnostics, StatusKind};
use backend::ExecutionRecord;
use sandbox::{Sandbox, SandboxOutcome};
use toolkits::{render_failure, HACKING_MARKER};

pub use backend::{Backend, BackendError, BackendSet, KernelTiming};
pub use sandbox::{ProcessSandbox, ThreadSandbox};
pub use sim::{SimBackend, SimulatedTaskSpec};

/// Runs payloads through a sandbox and turns the raw record into an
/// [`EvalResult`].
#[derive(Clone)]
pub struct TaskRunner {
    sandbox: Arc<dyn Sandbox>,
    wall_limit: Duration,
}

impl TaskRunner {
    pub fn new(sandbox: impl Sandbox + 'static, wall_limit: Duration) -> Self {
        Self {
            sandbox: Arc::new(sandbox),
            wall_limit,
        }
    }

    pub fn from_arc(sandbox: Arc<dyn Sandbox>, wall_limit: Duration) -> Self {
        Self { sandbox, wall_limit }
    }

    /// compile/load, correctness, hacking check, timing, profiling, in order.
    pub fn run_task(&self, payload: &CandidateSpec) -> EvalResult {
        let backend = payload.backend.as_str();
        match self.sandbox.run(payload, self.wall_limit) {
            SandboxOutcome::Finished(record) => assemble(backend, &record),
            SandboxOutcome::Rejected(msg) => failure_result(
                backend,
                StatusKind::RuntimeError,
                format!("backend error: {msg}"),
                FailureDiagnostics {
                    exception_type: "BackendError".into(),
                    traceback: msg,
                },
                false,
            ),
            SandboxOutcome::Crashed {
                exception_type,
                traceback,
            } => failure_result(
                backend,
                StatusKind::RuntimeError,
                format!("sandbox crashed ({exception_type})"),
                FailureDiagnostics {
                    exception_type,
                    traceback,
                },
                true,
            ),
            SandboxOutcome::TimedOut { limit } => {
                let detail = format!("timeout: sandbox exceeded wall limit of {:.3} s", limit.as_secs_f64());
                failure_result(
                    backend,
                    StatusKind::RuntimeError,
                    detail.clone(),
                    FailureDiagnostics {
                        exception_type: "TimeoutError".into(),
                        traceback: detail,
                    },
                    true,
                )
            }
        }
    }
}

fn failure_result(
    backend: &str,
    status: StatusKind,
    detail: String,
    diagnostics: FailureDiagnostics,
    infra_failure: bool,
) -> EvalResult {
    let feedback_text = render_failure(status, &detail, &diagnostics);
    EvalResult {
        status: CorrectnessStatus::failed(status, detail),
        timing: None,
        speedup_raw: None,
        hacking: toolkits::hacking_check(&[], &[]),
        profiling: crate::eval::ProfilingSummary {
            failure_diagnostics: Some(diagnostics),
            feedback_text,
            ..Default::default()
        },
        backend: backend.to_string(),
        wall_time_ms: 0.0,
        infra_failure,
    }
}

/// Applies the toolkits to a raw execution record.
pub fn assemble(backend: &str, record: &ExecutionRecord) -> EvalResult {
    let mut status = toolkits::correctness(record);
    let hacking = toolkits::hacking_check(&record.kernels_train, &record.kernels_eval);
    if status.is_pass() && hacking.hacked {
        let which = match (
            hacking.kernels_executed_train.is_empty(),
            hacking.kernels_executed_eval.is_empty(),
        ) {
            (true, true) => "train or eval",
            (true, false) => "train",
            _ => "eval",
        };
        status = CorrectnessStatus::failed(
            StatusKind::Mismatch,
            format!("{HACKING_MARKER}: no generated kernel executed in {which} mode"),
        );
    }
    let mut timing = None;
    let mut speedup_raw = None;
    if status.is_pass() {
        match toolkits::timing(record).and_then(|t| toolkits::measure_speedup(&t).map(|s| (t, s))) {
            Ok((t, s)) => {
                timing = Some(t);
                speedup_raw = Some(s);
            }
            Err(e) => {
                status = CorrectnessStatus::failed(StatusKind::RuntimeError, format!("measurement error: {e}"));
            }
        }
    }
    let profiling = toolkits::profile(record, &status, &hacking);
    EvalResult {
        status,
        timing,
        speedup_raw,
        hacking,
        profiling,
        backend: backend.to_string(),
        wall_time_ms: record.wall_time_ms,
        infra_failure: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerConfig {
    pub worker_id: String,
    pub capabilities: Vec<String>,
    pub poll_interval: Duration,
    pub heartbeat_interval: Duration,
    pub backoff_base: Duration,
    pub backoff_max: Duration,
}

impl WorkerConfig {
    pub fn new(worker_id: impl Into<String>, capabilities: &[&str]) -> Self {
        Self {
            worker_id: worker_id.into(),
            capabilities: capabilities.iter().map(|s| s.to_string()).collect(),
            poll_interval: Duration::from_millis(250),
            heartbeat_interval: Duration::from_secs(5),
            backoff_base: Duration::from_millis(50),
            backoff_max: Duration::from_secs(2),
        }
    }
}

/// Outcome of one pull-run-report cycle.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    /// Nothing to do.
    Idle,
    /// A task ran. `ack` is `None` when the coordinator rejected the report
    /// as stale or the report is still pending delivery.
    Executed {
        task_id: String,
        ack: Option<ReportOutcome>,
    },
    /// The coordinator could not be reached or refused us; back off.
    Backoff(ApiError),
}

/// Start/finish of one task execution, for auditing serialized execution.
#[derive(Debug, Clone)]
pub struct ExecutionSpan {
    pub task_id: String,
    pub started: Instant,
    pub finished: Instant,
}

/// The worker's protocol state machine, independent of threading and time.
pub struct WorkerAgent {
    config: WorkerConfig,
    runner: TaskRunner,
    registered: bool,
    pending: Option<(String, EvalResult)>,
    spans: Vec<ExecutionSpan>,
}

impl WorkerAgent {
    pub fn new(config: WorkerConfig, runner: TaskRunner) -> Self {
        Self {
            config,
            runner,
            registered: false,
            pending: None,
            spans: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.config.worker_id
    }

    pub fn config(&self) -> &WorkerConfig {
        &self.config
    }

    pub fn spans(&self) -> &[ExecutionSpan] {
        &self.spans
    }

    pub fn is_registered(&self) -> bool {
        self.registered
    }

    /// Forgets local protocol state, as after a process restart.
    pub fn reset(&mut self) {
        self.registered = false;
        self.pending = None;
    }

    pub fn ensure_registered(&mut self, api: &dyn CoordinatorApi) -> Result<(), ApiError> {
        if !self.registered {
            api.register(&self.config.worker_id, &self.config.capabilities)?;
            self.registered = true;
        }
        Ok(())
    }

    fn note_error(&mut self, e: &ApiError) {
        if matches!(e, ApiError::Unauthorized(_)) {
            self.registered = false;
        }
    }

    /// Registers if needed and asks for work.
    pub fn poll(&mut self, api: &dyn CoordinatorApi) -> Result<Option<Assignment>, ApiError> {
        let r = self
            .ensure_registered(api)
            .and_then(|_| api.next_task(&self.config.worker_id));
        if let Err(e) = &r {
            self.note_error(e);
        }
        r
    }

    pub fn execute(&mut self, assignment: &Assignment) -> EvalResult {
        let started = Instant::now();
        let result = if self.config.capabilities.contains(&assignment.payload.backend) {
            self.runner.run_task(&assignment.payload)
        } else {
            EvalResult::infrastructure_failure(
                &assignment.payload.backend,
                format!(
                    "backend {:?} is not supported by this worker",
                    assignment.payload.backend
                ),
            )
        };
        self.spans.push(ExecutionSpan {
            task_id: assignment.task_id.clone(),
            started,
            finished: Instant::now(),
        });
        result
    }

    /// Reports a result. Stale and not-found rejections are final (another
    /// attempt owns the task now); transport failures keep the report pending.
    pub fn deliver(
        &mut self,
        api: &dyn CoordinatorApi,
        task_id: String,
        result: EvalResult,
    ) -> Result<Option<ReportOutcome>, ApiError> {
        match api.report(&self.config.worker_id, &task_id, result.clone()) {
            Ok(ack) => Ok(Some(ack.outcome)),
            Err(ApiError::Stale(m)) | Err(ApiError::NotFound(m)) => {
                log::info!("report for {task_id} dropped by coordinator: {m}");
                Ok(None)
            }
            Err(e) => {
                if e.is_retriable() {
                    self.pending = Some((task_id, result));
                }
                self.note_error(&e);
                Err(e)
            }
        }
    }

    pub fn has_pending_report(&self) -> bool {
        self.pending.is_some()
    }

    /// Retries a report that previously failed in transit.
    pub fn flush_pending(
        &mut self,
        api: &dyn CoordinatorApi,
    ) -> Result<Option<(String, Option<ReportOutcome>)>, ApiError> {
        match self.pending.take() {
            None => Ok(None),
            Some((task_id, result)) => {
                let ack = self.deliver(api, task_id.clone(), result)?;
                Ok(Some((task_id, ack)))
            }
        }
    }

    /// One full cycle: flush, pull, execute (heartbeating alongside), report.
    pub fn step(&mut self, api: &dyn CoordinatorApi) -> StepOutcome {
        match self.flush_pending(api) {
            Ok(Some((task_id, ack))) => return StepOutcome::Executed { task_id, ack },
            Ok(None) => {}
            Err(e) => return StepOutcome::Backoff(e),
        }
        let assignment = match self.poll(api) {
            Ok(Some(a)) => a,
            Ok(None) => return StepOutcome::Idle,
            Err(e) => return StepOutcome::Backoff(e),
        };
        let _ = api.heartbeat(&self.config.worker_id, Some(&assignment.task_id));
        let done = AtomicBool::new(false);
        let interval = self.config.heartbeat_interval;
        let worker_id = self.config.worker_id.clone();
        let task_id = assignment.task_id.clone();
        let result = std::thread::scope(|scope| {
            scope.spawn(|| {
                let mut last = Instant::now();
                while !done.load(Ordering::Acquire) {
                    std::thread::sleep(Duration::from_millis(10).min(interval));
                    if last.elapsed() >= interval {
                        let _ = api.heartbeat(&worker_id, Some(&task_id));
                        last = Instant::now();
                    }
                }
            });
            let r = self.execute(&assignment);
            done.store(true, Ordering::Release);
            r
        });
        match self.deliver(api, assignment.task_id.clone(), result) {
            Ok(ack) => StepOutcome::Executed {
                task_id: assignment.task_id,
                ack,
            },
            Err(e) => StepOutcome::Backoff(e),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoopStats {
    pub executed: usize,
    pub idle_polls: usize,
    pub backoffs: usize,
}

/// Drives `agent` until `stop` is set. A stop request never interrupts a
/// running task; the loop exits between cycles, so no partial report is
/// ever sent.
pub fn run_worker_loop(agent: &mut WorkerAgent, api: &dyn CoordinatorApi, stop: &AtomicBool) -> LoopStats {
    let mut stats = LoopStats::default();
    let mut failures: u32 = 0;
    while !stop.load(Ordering::Acquire) {
        match agent.step(api) {
            StepOutcome::Executed { .. } => {
                stats.executed += 1;
                failures = 0;
            }
            StepOutcome::Idle => {
                stats.idle_polls += 1;
                failures = 0;
                let _ = api.heartbeat(agent.id(), None);
                sleep_unless_stopped(agent.config.poll_interval, stop);
            }
            StepOutcome::Backoff(e) => {
                stats.backoffs += 1;
                let delay = agent
                    .config
                    .backoff_base
                    .saturating_mul(1u32 << failures.min(16))
                    .min(agent.config.backoff_max);
                failures = failures.saturating_add(1);
                log::debug!("worker {} backing off {:?}: {e}", agent.id(), delay);
                sleep_unless_stopped(delay, stop);
            }
        }
    }
    stats
}

fn sleep_unless_stopped(total: Duration, stop: &AtomicBool) {
    let deadline = Instant::now() + total;
    while !stop.load(Ordering::Acquire) {
        let now = Instant::now();
        if now >= deadline {
            break;
        }
        std::thread::sleep((deadline - now).min(Duration::from_millis(5)));
    }
}
