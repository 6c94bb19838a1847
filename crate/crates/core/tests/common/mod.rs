//! Fixtures shared by several test targets.

use kgrid_core::harness::*;

/// The fixed 5 prompts x 2 rollouts x 3 turns benchmark, run on a fresh
/// embedded cluster and rendered as JSON.
pub fn benchmark_report() -> String {
    let cluster = EmbeddedCluster::start(&EmbeddedConfig {
        workers: 3,
        ..EmbeddedConfig::default()
    });
    let api = cluster.coordinator();
    let prompts: Vec<Prompt> = (0..5)
        .map(|i| Prompt {
            prompt_id: format!("prompt-{i}"),
            task: serde_json::json!({"start_speedup": 0.8 + 0.1 * i as f64, "step": 0.25, "spread": 0.3, "jitter": 0.02, "hack_at": [i % 3]}),
        })
        .collect();
    let cfg = BenchConfig {
        rollouts: 2,
        max_turns: 3,
        seed: 42,
        parallel: 4,
        ..BenchConfig::default()
    };
    let out = run_benchmark(
        &prompts,
        &ScriptedGenerator,
        api.as_ref(),
        &cfg,
        &TrajectoryConfig::default(),
        &WhitespaceTokenCounter::default(),
    );
    cluster.shutdown();
    out.report.to_json()
}
