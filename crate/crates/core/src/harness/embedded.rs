//! The coordinator and its workers in one process, on real threads and the
//! real clock, under the same contracts as a networked deployment.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::clock::MonotonicClock;
use crate::coordinator::{Coordinator, CoordinatorConfig, MemoryStore};
use crate::worker::{run_worker_loop, LoopStats, SimBackend, TaskRunner, ThreadSandbox, WorkerAgent, WorkerConfig};

#[derive(Debug, Clone)]
pub struct EmbeddedConfig {
    pub workers: usize,
    pub coordinator: CoordinatorConfig,
    pub sweep_period: Duration,
    pub poll_interval: Duration,
    pub wall_limit: Duration,
}

impl Default for EmbeddedConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            coordinator: CoordinatorConfig::default(),
            sweep_period: Duration::from_millis(100),
            poll_interval: Duration::from_millis(2),
            wall_limit: Duration::from_secs(60),
        }
    }
}

pub struct EmbeddedCluster {
    coordinator: Arc<Coordinator>,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<LoopStats>>,
    sweeper: Option<JoinHandle<()>>,
}

impl EmbeddedCluster {
    /// Starts `config.workers` simulated-backend workers.
    pub fn start(config: &EmbeddedConfig) -> Self {
        let runner = TaskRunner::new(ThreadSandbox::new(SimBackend), config.wall_limit);
        Self::start_with(config, runner)
    }

    pub fn start_with(config: &EmbeddedConfig, runner: TaskRunner) -> Self {
        let coordinator = Arc::new(Coordinator::new(
            config.coordinator.clone(),
            Arc::new(MonotonicClock::new()),
            Arc::new(MemoryStore::new()),
        ));
        let stop = Arc::new(AtomicBool::new(false));
        let workers = (0..config.workers.max(1))
            .map(|i| {
                let mut wc = WorkerConfig::new(format!("embedded-{i}"), &[crate::eval::SIM_BACKEND]);
                wc.poll_interval = config.poll_interval;
                wc.backoff_base = config.poll_interval;
                let mut agent = WorkerAgent::new(wc, runner.clone());
                let api = Arc::clone(&coordinator);
                let stop = Arc::clone(&stop);
                std::thread::Builder::new()
                    .name(format!("embedded-worker-{i}"))
                    .spawn(move || run_worker_loop(&mut agent, &api, &stop))
                    .expect("spawn worker thread")
            })
            .collect();
        let sweeper = {
            let api = Arc::clone(&coordinator);
            let stop = Arc::clone(&stop);
            let period = config.sweep_period;
            std::thread::Builder::new()
                .name("embedded-sweeper".into())
                .spawn(move || {
                    while !stop.load(Ordering::Acquire) {
                        let report = api.sweep();
                        if !report.is_empty() {
                            log::info!("sweep: {report:?}");
                        }
                        std::thread::sleep(period);
                    }
                })
                .expect("spawn sweeper thread")
        };
        Self {
            coordinator,
            stop,
            workers,
            sweeper: Some(sweeper),
        }
    }

    pub fn coordinator(&self) -> Arc<Coordinator> {
        Arc::clone(&self.coordinator)
    }

    /// Stops all threads and returns per-worker loop statistics.
    pub fn shutdown(mut self) -> Vec<LoopStats> {
        self.stop.store(true, Ordering::Release);
        let stats = self.workers.drain(..).filter_map(|h| h.join().ok()).collect();
        if let Some(s) = self.sweeper.take() {
            let _ = s.join();
        }
        stats
    }
}

impl Drop for EmbeddedCluster {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
    }
}
