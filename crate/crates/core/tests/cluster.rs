use std::time::Duration;

use kgrid_core::cluster_sim::{simulate_cluster, worker_name, ClusterSimConfig, ScheduledAction, SimAction};
use kgrid_core::coordinator::{CoordinatorConfig, TaskState};
use kgrid_core::eval::CandidateSpec;
use kgrid_core::worker::sim::SimulatedTaskSpec;

fn uniform(n: usize) -> Vec<CandidateSpec> {
    (0..n)
        .map(|_| {
            let mut c = CandidateSpec::simulated(SimulatedTaskSpec::passing(100.0, 50.0));
            c.eval.warmup_runs = 1;
            c.eval.measured_runs = 3;
            c
        })
        .collect()
}

fn add_at(ms: u64, names: &[usize]) -> Vec<ScheduledAction> {
    names
        .iter()
        .map(|&i| ScheduledAction {
            at_ms: ms,
            action: SimAction::AddWorker { worker: worker_name(i) },
        })
        .collect()
}

#[test]
fn adding_workers_mid_run_never_slows_the_batch() {
    let tasks = uniform(60);
    let base = ClusterSimConfig {
        workers: 2,
        ..ClusterSimConfig::default()
    };
    let mut previous = simulate_cluster(&tasks, &base);
    assert!(previous.all_terminal && previous.violations.is_empty());
    for extra in 1..=4 {
        let cfg = ClusterSimConfig {
            actions: add_at(1_000, &(2..2 + extra).collect::<Vec<_>>()),
            ..base.clone()
        };
        let out = simulate_cluster(&tasks, &cfg);
        assert!(out.all_terminal);
        assert!(out.violations.is_empty(), "{:?}", out.violations);
        assert!(
            out.makespan <= previous.makespan,
            "{extra} extra workers: {:?} > {:?}",
            out.makespan,
            previous.makespan
        );
        previous = out;
    }
}

#[test]
fn removing_a_worker_still_finishes() {
    let cfg = ClusterSimConfig {
        workers: 4,
        actions: vec![
            ScheduledAction {
                at_ms: 500,
                action: SimAction::KillWorker { worker: worker_name(0) },
            },
            ScheduledAction {
                at_ms: 900,
                action: SimAction::KillWorker { worker: worker_name(3) },
            },
        ],
        ..ClusterSimConfig::default()
    };
    let out = simulate_cluster(&uniform(40), &cfg);
    assert!(out.all_terminal);
    assert!(out.violations.is_empty(), "{:?}", out.violations);
    assert!(out.tasks.iter().all(|t| t.state == TaskState::Completed));
}

#[test]
fn dropped_reports_terminate_within_the_liveness_bound() {
    let deadline = 2.0;
    let sweep = Duration::from_millis(250);
    let cfg = ClusterSimConfig {
        workers: 3,
        drop_report_prob: 0.4,
        seed: 5,
        sweep_period: sweep,
        coordinator: CoordinatorConfig {
            default_deadline_s: deadline,
            ..CoordinatorConfig::default()
        },
        ..ClusterSimConfig::default()
    };
    let out = simulate_cluster(&uniform(30), &cfg);
    assert!(out.all_terminal);
    assert!(out.dropped_reports > 0);
    assert!(out.violations.is_empty(), "{:?}", out.violations);
    for t in &out.tasks {
        assert!(t.result.is_some(), "{} has no result", t.task_id);
    }
    // Every task is dispatched within a poll of becoming available, so the
    // whole batch fits in the per-task worst case times the queue depth per
    // worker.
    let per_task = cfg.coordinator.max_attempts as f64 * deadline + sweep.as_secs_f64();
    let bound = per_task * (30.0 / 3.0 + 1.0);
    assert!(out.makespan.as_secs_f64() <= bound, "{:?} > {bound}", out.makespan);
}

#[test]
fn restart_and_silence_together() {
    let cfg = ClusterSimConfig {
        workers: 3,
        coordinator: CoordinatorConfig {
            liveness_timeout_s: 1.0,
            default_deadline_s: 3.0,
            ..CoordinatorConfig::default()
        },
        heartbeat_interval: Duration::from_millis(200),
        sweep_period: Duration::from_millis(200),
        actions: vec![
            ScheduledAction {
                at_ms: 100,
                action: SimAction::SilenceWorker {
                    worker: worker_name(2),
                    for_ms: 3_000,
                },
            },
            ScheduledAction {
                at_ms: 400,
                action: SimAction::RestartCoordinator,
            },
        ],
        ..ClusterSimConfig::default()
    };
    let out = simulate_cluster(&uniform(50), &cfg);
    assert!(out.all_terminal);
    assert!(out.violations.is_empty(), "{:?}", out.violations);
    assert!(out.tasks.iter().all(|t| t.state == TaskState::Completed));
}
