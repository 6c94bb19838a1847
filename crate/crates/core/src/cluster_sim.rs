//! Deterministic discrete-event simulation of a coordinator and its workers
//! on virtual time.
//!
//! Workers run the real `TaskRunner`; a task occupies its worker for
//! `max(1 ms, wall_time_ms)` of virtual time, taken from the result. Faults
//! are scheduled up front or drawn from a seeded RNG, so a run is a pure
//! function of its inputs.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::api::ApiError;
use crate::clock::ManualClock;
use crate::coordinator::{Coordinator, CoordinatorConfig, EvalTask, Event, MemoryStore};
use crate::eval::{CandidateSpec, EvalResult, SIM_BACKEND};
use crate::worker::{SimBackend, TaskRunner, ThreadSandbox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum SimAction {
    /// The worker process dies; anything it was running is lost.
    KillWorker {
        worker: String,
    },
    AddWorker {
        worker: String,
    },
    /// Coordinator process restarts and rebuilds from its store.
    RestartCoordinator,
    /// The worker stops talking to the coordinator for a while but keeps
    /// running its current task.
    SilenceWorker {
        worker: String,
        for_ms: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledAction {
    pub at_ms: u64,
    #[serde(flatten)]
    pub action: SimAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSimConfig {
    pub coordinator: CoordinatorConfig,
    pub workers: usize,
    pub poll_interval: Duration,
    pub heartbeat_interval: Duration,
    pub sweep_period: Duration,
    /// Chance that a finished task's report is lost in transit.
    pub drop_report_prob: f64,
    pub seed: u64,
    pub actions: Vec<ScheduledAction>,
    /// Stop even if tasks are still open.
    pub horizon: Duration,
    pub wall_limit: Duration,
}

impl Default for ClusterSimConfig {
    fn default() -> Self {
        Self {
            coordinator: CoordinatorConfig::default(),
            workers: 3,
            poll_interval: Duration::from_millis(50),
            heartbeat_interval: Duration::from_secs(5),
            sweep_period: Duration::from_secs(1),
            drop_report_prob: 0.0,
            seed: 0,
            actions: Vec::new(),
            horizon: Duration::from_secs(24 * 3600),
            wall_limit: Duration::from_secs(30),
        }
    }
}

pub fn worker_name(i: usize) -> String {
    format!("sim-w{i}")
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    /// Virtual time at which the last task became terminal.
    pub makespan: Duration,
    pub all_terminal: bool,
    pub tasks: Vec<EvalTask>,
    /// Coordinator events across every coordinator incarnation.
    pub events: Vec<Event>,
    pub steps: usize,
    pub dropped_reports: usize,
    pub stale_reports: usize,
    pub restarts: usize,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone)]
enum Kind {
    Poll,
    Heartbeat,
    Finish { task_id: String, result: EvalResult },
    Sweep,
    Action(SimAction),
}

#[derive(Debug, Clone)]
struct Scheduled {
    worker: Option<String>,
    generation: u64,
    kind: Kind,
}

#[derive(Debug, Default)]
struct SimWorker {
    generation: u64,
    alive: bool,
    silent_until: Duration,
    current: Option<String>,
}

struct Sim {
    config: ClusterSimConfig,
    clock: ManualClock,
    store: MemoryStore,
    coordinator: Coordinator,
    runner: TaskRunner,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<(Duration, u64)>>,
    payloads: BTreeMap<u64, Scheduled>,
    seq: u64,
    workers: BTreeMap<String, SimWorker>,
    past_events: Vec<Event>,
    terminal: BTreeMap<String, EvalResult>,
    out: SimOutcome,
}

impl Sim {
    fn now(&self) -> Duration {
        use crate::clock::Clock;
        self.clock.now()
    }

    fn schedule(&mut self, at: Duration, worker: Option<&str>, kind: Kind) {
        let generation = worker.and_then(|w| self.workers.get(w)).map_or(0, |w| w.generation);
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq)));
        self.payloads.insert(
            self.seq,
            Scheduled {
                worker: worker.map(str::to_string),
                generation,
                kind,
            },
        );
    }

    fn capabilities() -> Vec<String> {
        vec![SIM_BACKEND.to_string()]
    }

    /// Runs `call`, re-registering once if the coordinator no longer knows
    /// the worker.
    fn authed<T>(&self, worker: &str, call: impl Fn(&Coordinator) -> Result<T, ApiError>) -> Result<T, ApiError> {
        match call(&self.coordinator) {
            Err(ApiError::Unauthorized(_)) => {
                self.coordinator.register_worker(worker, &Self::capabilities())?;
                call(&self.coordinator)
            }
            other => other,
        }
    }

    fn start_worker(&mut self, id: &str) {
        let w = self.workers.entry(id.to_string()).or_default();
        w.generation += 1;
        w.alive = true;
        w.current = None;
        w.silent_until = Duration::ZERO;
        if let Err(e) = self.coordinator.register_worker(id, &Self::capabilities()) {
            self.out.violations.push(format!("register {id}: {e}"));
        }
        let now = self.now();
        self.schedule(now, Some(id), Kind::Poll);
        self.schedule(now + self.config.heartbeat_interval, Some(id), Kind::Heartbeat);
    }

    fn poll(&mut self, id: &str) {
        let now = self.now();
        let busy = self.workers[id].current.is_some();
        if busy {
            return;
        }
        match self.authed(id, |c| c.next_task(id)) {
            Ok(Some(assignment)) => {
                let _ = self.coordinator.heartbeat(id, Some(&assignment.task_id));
                let result = self.runner.run_task(&assignment.payload);
                let took = Duration::from_secs_f64((result.wall_time_ms / 1000.0).max(0.001));
                self.workers.get_mut(id).expect("known worker").current = Some(assignment.task_id.clone());
                self.schedule(
                    now + took,
                    Some(id),
                    Kind::Finish {
                        task_id: assignment.task_id,
                        result,
                    },
                );
            }
            Ok(None) | Err(_) => self.schedule(now + self.config.poll_interval, Some(id), Kind::Poll),
        }
    }

    fn finish(&mut self, id: &str, task_id: String, result: EvalResult) {
        let now = self.now();
        let silent_until = self.workers[id].silent_until;
        if silent_until > now {
            // Deliver once the worker can talk again.
            self.schedule(silent_until, Some(id), Kind::Finish { task_id, result });
            return;
        }
        self.workers.get_mut(id).expect("known worker").current = None;
        if self.config.drop_report_prob > 0.0 && self.rng.random::<f64>() < self.config.drop_report_prob {
            self.out.dropped_reports += 1;
        } else {
            match self.authed(id, |c| c.report_result(id, &task_id, result.clone())) {
                Ok(_) => {}
                Err(ApiError::Stale(_)) => self.out.stale_reports += 1,
                Err(e) => log::debug!("{id} report {task_id}: {e}"),
            }
        }
        self.schedule(now, Some(id), Kind::Poll);
    }

    fn heartbeat(&mut self, id: &str) {
        let now = self.now();
        if self.workers[id].silent_until <= now {
            let current = self.workers[id].current.clone();
            let _ = self.authed(id, |c| c.heartbeat(id, current.as_deref()));
        }
        self.schedule(now + self.config.heartbeat_interval, Some(id), Kind::Heartbeat);
    }

    fn act(&mut self, action: SimAction) {
        let now = self.now();
        match action {
            SimAction::KillWorker { worker } => {
                if let Some(w) = self.workers.get_mut(&worker) {
                    w.alive = false;
                    w.generation += 1;
                    w.current = None;
                }
            }
            SimAction::AddWorker { worker } => self.start_worker(&worker),
            SimAction::RestartCoordinator => {
                self.past_events.extend(self.coordinator.events());
                match Coordinator::recover(
                    self.config.coordinator.clone(),
                    Arc::new(self.clock.clone()),
                    Arc::new(self.store.clone()),
                ) {
                    Ok(c) => {
                        self.coordinator = c;
                        self.out.restarts += 1;
                    }
                    Err(e) => self.out.violations.push(format!("recovery failed: {e}")),
                }
            }
            SimAction::SilenceWorker { worker, for_ms } => {
                if let Some(w) = self.workers.get_mut(&worker) {
                    w.silent_until = now + Duration::from_millis(for_ms);
                }
            }
        }
    }

    fn check(&mut self) {
        let tasks = self.coordinator.tasks();
        let mut held: BTreeMap<&str, usize> = BTreeMap::new();
        for t in &tasks {
            if t.state.is_assigned() {
                if let Some(w) = t.assigned_worker.as_deref() {
                    *held.entry(w).or_default() += 1;
                }
            }
            if t.state.is_terminal() {
                match (&t.result, self.terminal.get(&t.task_id)) {
                    (None, _) => self
                        .out
                        .violations
                        .push(format!("{} terminal without a result", t.task_id)),
                    (Some(r), Some(first)) if r != first => self
                        .out
                        .violations
                        .push(format!("{} terminal result changed", t.task_id)),
                    (Some(r), None) => {
                        self.terminal.insert(t.task_id.clone(), r.clone());
                    }
                    _ => {}
                }
            } else if self.terminal.contains_key(&t.task_id) {
                self.out.violations.push(format!("{} left a terminal state", t.task_id));
            }
        }
        for (w, n) in held {
            if n > 1 {
                self.out.violations.push(format!("worker {w} holds {n} tasks"));
            }
        }
    }
}

/// Submits `tasks` at time zero and runs until every task is terminal or the
/// horizon passes.
pub fn simulate_cluster(tasks: &[CandidateSpec], config: &ClusterSimConfig) -> SimOutcome {
    let clock = ManualClock::new();
    let store = MemoryStore::new();
    let coordinator = Coordinator::new(
        config.coordinator.clone(),
        Arc::new(clock.clone()),
        Arc::new(store.clone()),
    );
    let mut sim = Sim {
        config: config.clone(),
        clock,
        store,
        coordinator,
        runner: TaskRunner::new(ThreadSandbox::new(SimBackend), config.wall_limit),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        queue: BinaryHeap::new(),
        payloads: BTreeMap::new(),
        seq: 0,
        workers: BTreeMap::new(),
        past_events: Vec::new(),
        terminal: BTreeMap::new(),
        out: SimOutcome {
            makespan: Duration::ZERO,
            all_terminal: false,
            tasks: Vec::new(),
            events: Vec::new(),
            steps: 0,
            dropped_reports: 0,
            stale_reports: 0,
            restarts: 0,
            violations: Vec::new(),
        },
    };
    for payload in tasks {
        if let Err(e) = sim.coordinator.submit_task(payload.clone(), None) {
            sim.out.violations.push(format!("submit: {e}"));
        }
    }
    for i in 0..config.workers {
        sim.start_worker(&worker_name(i));
    }
    for a in &config.actions {
        sim.schedule(Duration::from_millis(a.at_ms), None, Kind::Action(a.action.clone()));
    }
    sim.schedule(config.sweep_period, None, Kind::Sweep);

    while !sim.coordinator.all_terminal() {
        let Some(Reverse((at, seq))) = sim.queue.pop() else {
            break;
        };
        if at > config.horizon {
            break;
        }
        let ev = sim.payloads.remove(&seq).expect("scheduled payload");
        sim.clock.advance_to(at);
        if let Some(w) = &ev.worker {
            let live = sim
                .workers
                .get(w)
                .is_some_and(|s| s.alive && s.generation == ev.generation);
            if !live {
                continue;
            }
        }
        sim.out.steps += 1;
        match ev.kind {
            Kind::Poll => {
                let w = ev.worker.expect("worker event");
                if sim.workers[&w].silent_until > at {
                    let until = sim.workers[&w].silent_until;
                    sim.schedule(until, Some(&w), Kind::Poll);
                } else {
                    sim.poll(&w);
                }
            }
            Kind::Heartbeat => sim.heartbeat(&ev.worker.expect("worker event")),
            Kind::Finish { task_id, result } => sim.finish(&ev.worker.expect("worker event"), task_id, result),
            Kind::Sweep => {
                sim.coordinator.sweep();
                sim.schedule(at + config.sweep_period, None, Kind::Sweep);
            }
            Kind::Action(a) => sim.act(a),
        }
        sim.check();
    }
    sim.out.all_terminal = sim.coordinator.all_terminal();
    sim.out.makespan = sim.now();
    sim.out.tasks = sim.coordinator.tasks();
    sim.past_events.extend(sim.coordinator.events());
    sim.out.events = std::mem::take(&mut sim.past_events);
    sim.out
}
