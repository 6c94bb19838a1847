//! End-to-end acceptance criteria. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any FAIL.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

use common::benchmark_report;
use kgrid_core::cluster_sim::{simulate_cluster, worker_name, ClusterSimConfig, ScheduledAction, SimAction};
use kgrid_core::coordinator::{CoordinatorConfig, Event, TaskState};
use kgrid_core::eval::{CandidateSpec, EvalResult, StatusKind};
use kgrid_core::harness::*;
use kgrid_core::signals::*;
use kgrid_core::worker::sim::SimulatedTaskSpec;
use kgrid_core::worker::{SimBackend, TaskRunner, ThreadSandbox};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(got: f64, want: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || {
        format!("{what}: got {got}, want {want} +- {tol}")
    })
}

fn run_sim(spec: SimulatedTaskSpec) -> EvalResult {
    TaskRunner::new(ThreadSandbox::new(SimBackend), Duration::from_secs(10)).run_task(&CandidateSpec::simulated(spec))
}

fn estimator_bias() -> Outcome {
    let started = Instant::now();
    let policy = ToyBanditPolicy::five_arm();
    let mut detail = Vec::new();
    for n in [2usize, 4, 8, 16] {
        for (estimator, want) in [(Estimator::Grpo, 1.0 - 1.0 / n as f64), (Estimator::Trloo, 1.0)] {
            let r = grpo_bias_experiment(&policy, estimator, n, 200_000, 7 + n as u64).map_err(|e| e.to_string())?;
            ensure(!r.inconclusive, || "policy gradient vanished".into())?;
            let s = r.shrinkage.unwrap();
            close(s, want, 0.05, &format!("{estimator:?} N={n} shrinkage"))?;
            detail.push(format!("{estimator:?}/{n}={s:.3}"));
        }
    }
    let took = started.elapsed();
    ensure(took < Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!("{} in {:.1}s", detail.join(" "), took.as_secs_f64()))
}

/// Leave-one-out baseline written out member by member.
fn loo_oracle(g: &[f64]) -> Vec<f64> {
    (0..g.len())
        .map(|i| {
            let mut s = 0.0;
            let mut k = 0;
            for (j, x) in g.iter().enumerate() {
                if j != i {
                    s += x;
                    k += 1;
                }
            }
            g[i] - s / k as f64
        })
        .collect()
}

fn advantage_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_identity: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    for _ in 0..10_000 {
        let n = rng.random_range(2..=16);
        let scale = 10f64.powi(rng.random_range(-2..=2));
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0) * scale).collect();
        let group = AdvantageGroup::from_returns(&g);
        let grpo = grpo_advantages(&group).values;
        let trloo = trloo_advantages(&group).values;
        let oracle = loo_oracle(&g);
        let factor = n as f64 / (n as f64 - 1.0);
        for i in 0..n {
            // The identity is exact in reals; scale the tolerance with the
            // magnitude of the operands so it is a relative check.
            let mag = 1.0f64.max(g.iter().fold(0.0f64, |m, x| m.max(x.abs())));
            let d = (trloo[i] - factor * grpo[i]).abs() / mag;
            worst_identity = worst_identity.max(d);
            ensure(d <= 1e-12, || format!("identity off by {d} on {g:?}"))?;
            ensure((trloo[i] - oracle[i]).abs() / mag <= 1e-12, || {
                format!("trloo vs loop oracle on {g:?}")
            })?;
        }
        let (sa, sb) = (grpo.iter().sum::<f64>(), trloo.iter().sum::<f64>());
        worst_sum = worst_sum.max(sa.abs()).max(sb.abs());
        ensure(sa.abs() <= 1e-9 && sb.abs() <= 1e-9, || {
            format!("sums {sa} {sb} on {g:?}")
        })?;
    }
    Ok(format!(
        "10000 groups, max rel identity err {worst_identity:.1e}, max |sum| {worst_sum:.1e}"
    ))
}

fn formula_goldens() -> Outcome {
    let tol = 1e-12;
    close(clip_speedup(10.0, 2.0, 3.0).unwrap(), 3.0, 0.0, "clip (10,2)")?;
    close(clip_speedup(10.0, 10.0, 3.0).unwrap(), 1.0, 0.0, "clip (10,10)")?;
    close(clip_speedup(9.0, 6.0, 3.0).unwrap(), 1.5, 0.0, "clip (9,6)")?;
    ensure(clip_speedup(10.0, 0.0, 3.0).is_err(), || {
        "clip accepted a zero runtime".into()
    })?;

    let off = RewardConfig::default();
    let on = RewardConfig {
        pr_enabled: true,
        ..RewardConfig::default()
    };
    let r15 = run_sim(SimulatedTaskSpec::passing(9.0, 6.0));
    close(turn_reward(&r15, &off).total, 2.5, tol, "reward at speedup 1.5")?;
    let fusion = run_sim(
        SimulatedTaskSpec::passing(10.0, 5.0)
            .with_profile(&[("fused_kernel", 0.8615, true), ("aten::copy_", 0.1385, false)]),
    );
    close(fusion.profiling.pr_ratio.unwrap(), 0.8615, tol, "better-fusion PR")?;
    close(turn_reward(&fusion, &on).total, 3.8615, tol, "reward with PR")?;
    let lazy = run_sim(
        SimulatedTaskSpec::passing(10.0, 9.9)
            .with_profile(&[("sum_kernel", 0.00014, true), ("aten::conv2d", 0.99986, false)]),
    );
    close(lazy.profiling.pr_ratio.unwrap(), 0.00014, tol, "lazy-optimization PR")?;
    let hacked = run_sim(SimulatedTaskSpec::passing(10.0, 2.0).with_kernels(&[], &[]));
    close(turn_reward(&hacked, &on).total, 0.0, 0.0, "hacked reward")?;

    ensure(
        reward_to_go(&[1.0, 2.0, 3.0], 1.0).unwrap() == vec![6.0, 5.0, 3.0],
        || "rtg gamma 1".into(),
    )?;
    ensure(
        reward_to_go(&[1.0, 2.0, 3.0], 0.0).unwrap() == vec![1.0, 2.0, 3.0],
        || "rtg gamma 0".into(),
    )?;
    ensure(reward_to_go(&[0.0; 3], 1.0).unwrap() == vec![0.0; 3], || {
        "rtg zeros".into()
    })?;

    let g = AdvantageGroup::from_returns(&[1.0, 2.0, 3.0]);
    ensure(grpo_advantages(&g).values == vec![-1.0, 0.0, 1.0], || {
        "grpo [1,2,3]".into()
    })?;
    ensure(trloo_advantages(&g).values == vec![-1.5, 0.0, 1.5], || {
        "trloo [1,2,3]".into()
    })?;
    let single = trloo_advantages(&AdvantageGroup::from_returns(&[5.0]));
    ensure(single.values == vec![0.0] && single.degenerate, || {
        "singleton group".into()
    })?;

    let prs = PrsConfig::default();
    close(prs.tau, 0.3, 0.0, "tau default")?;
    close(prs.softness, 0.1, 0.0, "s default")?;
    close(prs_keep_probability(0.35, &prs), 0.5, tol, "p(0.35)")?;
    close(prs_keep_probability(0.45, &prs), 1.0, 0.0, "p(0.45)")?;
    close(prs_keep_probability(0.25, &prs), 0.0, 0.0, "p(0.25)")?;
    close(
        prs_keep_probability(0.00014, &prs),
        0.0,
        0.0,
        "lazy-optimization kernel is rejected",
    )?;
    close(
        prs_keep_probability(0.8615, &prs),
        1.0,
        0.0,
        "better-fusion kernel is kept",
    )?;
    Ok("formula fixtures from reward through PRS".into())
}

fn mrs_contract() -> Outcome {
    let cfg = MrsConfig::default();
    let same = vec![-0.5; 10];
    let v = mrs_filter(&same, &same, &cfg).map_err(|e| e.to_string())?;
    ensure(v.decision == MrsDecision::Kept, || format!("identical: {v:?}"))?;
    let shift = 1.002f64.ln();
    let train: Vec<f64> = same.iter().map(|x| x + shift).collect();
    let v = mrs_filter(&train, &same, &cfg).map_err(|e| e.to_string())?;
    ensure(v.decision == MrsDecision::GeoOutOfBand, || format!("w=1.002: {v:?}"))?;
    close(v.w, 1.002, 1e-12, "w")?;
    // One token at ratio 1e-5, the others compensating so w stays at 1.
    let n = 20;
    let rollout = vec![-1.0; n];
    let mut train = rollout.clone();
    let low = 1e-5f64.ln();
    train[3] += low;
    let comp = -low / (n - 1) as f64;
    for (i, t) in train.iter_mut().enumerate() {
        if i != 3 {
            *t += comp;
        }
    }
    let v = mrs_filter(&train, &rollout, &cfg).map_err(|e| e.to_string())?;
    close(v.w, 1.0, 1e-12, "veto fixture w")?;
    ensure(v.decision == MrsDecision::TokenVeto, || format!("veto: {v:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for _ in 0..10_000 {
        let len = rng.random_range(1..=64);
        let rollout: Vec<f64> = (0..len).map(|_| rng.random_range(-8.0..0.0)).collect();
        let wide = [1e-4, 1e-3, 0.5, 12.0][rng.random_range(0..4)];
        let mut train: Vec<f64> = rollout.iter().map(|x| x + rng.random_range(-wide..wide)).collect();
        if len > 1 && rng.random::<f64>() < 0.25 {
            // A single collapsed token, compensated elsewhere so the
            // geometric mean can still land in the band.
            let k = rng.random_range(0..len);
            let dip = rng.random_range(6.0..14.0);
            for (i, t) in train.iter_mut().enumerate() {
                *t += if i == k { -dip } else { dip / (len - 1) as f64 };
            }
        }
        let v = mrs_filter(&train, &rollout, &cfg).map_err(|e| e.to_string())?;
        // Oracle: geometric mean of the per-token ratios, and the smallest one.
        let ratios: Vec<f64> = train.iter().zip(&rollout).map(|(a, b)| (a - b).exp()).collect();
        let geo = ratios.iter().map(|r| r.powf(1.0 / len as f64)).product::<f64>();
        let min_ratio = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let want = if !(0.999..=1.001).contains(&geo) {
            MrsDecision::GeoOutOfBand
        } else if min_ratio < 1e-4 {
            MrsDecision::TokenVeto
        } else {
            MrsDecision::Kept
        };
        close(v.w, geo, 1e-9 * geo.max(1.0), "w vs oracle")?;
        ensure(v.decision == want, || {
            format!("decision {:?} != oracle {want:?}", v.decision)
        })?;
        if v.decision.is_kept() {
            ensure((0.999..=1.001).contains(&v.w) && min_ratio >= 1e-4, || {
                "kept outside definition".into()
            })?;
        }
        *counts
            .entry(match v.decision {
                MrsDecision::Kept => "kept",
                MrsDecision::GeoOutOfBand => "band",
                MrsDecision::TokenVeto => "veto",
            })
            .or_default() += 1;
    }
    Ok(format!("3 fixtures, 10000 random samples {counts:?}"))
}

fn hacking_suite() -> Outcome {
    let base = || SimulatedTaskSpec::passing(10.0, 4.0);
    let cases: Vec<(&str, SimulatedTaskSpec, bool)> = vec![
        ("kernel never called", base().with_kernels(&[], &[]), true),
        ("train-mode bypass", base().with_kernels(&[], &["layernorm_fwd"]), true),
        ("eval-mode bypass", base().with_kernels(&["layernorm_fwd"], &[]), true),
        (
            "never called, huge speedup",
            SimulatedTaskSpec::passing(10.0, 0.1).with_kernels(&[], &[]),
            true,
        ),
        (
            "train bypass, several eval kernels",
            base().with_kernels(&[], &["gemm_fwd", "relu_fwd"]),
            true,
        ),
        (
            "never called, jittered timing",
            base().with_kernels(&[], &[]).with_jitter(0.1, 5),
            true,
        ),
        ("one kernel both modes", base(), false),
        (
            "two kernels both modes",
            base().with_kernels(&["a", "b"], &["a", "b"]),
            false,
        ),
        (
            "different kernels per mode",
            base().with_kernels(&["bwd_kernel"], &["fwd_kernel"]),
            false,
        ),
        ("slower than reference", SimulatedTaskSpec::passing(4.0, 8.0), false),
        ("jittered timing", base().with_jitter(0.1, 9), false),
        (
            "lazy optimization",
            base().with_profile(&[("sum_kernel", 0.00014, true), ("aten::conv2d", 0.99986, false)]),
            false,
        ),
    ];
    let (mut caught, mut hacked_total) = (0, 0);
    for (name, spec, hacked) in cases {
        let r = run_sim(spec);
        if hacked {
            hacked_total += 1;
            if r.hacking.hacked && r.status.status == StatusKind::Mismatch {
                caught += 1;
            } else {
                return Err(format!("missed: {name}"));
            }
        } else if r.hacking.hacked || !r.status.is_pass() {
            return Err(format!("false positive: {name}"));
        }
    }
    Ok(format!("{caught}/{hacked_total} hacked flagged, 0 false positives"))
}

fn chaos_run() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let tasks: Vec<CandidateSpec> = (0..200)
        .map(|i| {
            let mut spec = SimulatedTaskSpec::passing(20.0 + (i % 7) as f64, 10.0 + (i % 5) as f64);
            if rng.random::<f64>() < 0.3 {
                spec = spec.with_crash();
            }
            CandidateSpec::simulated(spec)
        })
        .collect();
    let crashing = tasks.iter().filter(|t| t.sim.as_ref().unwrap().crash).count();
    let cfg = ClusterSimConfig {
        workers: 3,
        coordinator: CoordinatorConfig {
            default_deadline_s: 5.0,
            liveness_timeout_s: 2.0,
            ..CoordinatorConfig::default()
        },
        heartbeat_interval: Duration::from_millis(500),
        sweep_period: Duration::from_millis(500),
        seed: 31,
        actions: vec![
            ScheduledAction {
                at_ms: 3_000,
                action: SimAction::KillWorker { worker: worker_name(1) },
            },
            ScheduledAction {
                at_ms: 6_000,
                action: SimAction::RestartCoordinator,
            },
        ],
        ..ClusterSimConfig::default()
    };
    let out = simulate_cluster(&tasks, &cfg);
    ensure(out.violations.is_empty(), || {
        format!("invariant violations: {:?}", out.violations)
    })?;
    ensure(out.all_terminal, || "tasks left open".into())?;
    ensure(out.restarts == 1, || "coordinator did not restart".into())?;
    ensure(out.events.iter().any(|e| matches!(e, Event::WorkerDead { .. })), || {
        "killed worker never declared dead".into()
    })?;
    let mut terminal_events: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &out.events {
        match e {
            Event::Completed { task_id, .. } | Event::Failed { task_id, .. } => {
                *terminal_events.entry(task_id.as_str()).or_default() += 1
            }
            _ => {}
        }
    }
    ensure(out.tasks.len() == 200, || format!("{} tasks stored", out.tasks.len()))?;
    for t in &out.tasks {
        ensure(t.state.is_terminal() && t.result.is_some(), || {
            format!("{} has no terminal result", t.task_id)
        })?;
        let n = terminal_events.get(t.task_id.as_str()).copied().unwrap_or(0);
        ensure(n == 1, || format!("{} reached a terminal state {n} times", t.task_id))?;
        let crash = t.payload.sim.as_ref().unwrap().crash;
        ensure((t.state == TaskState::Failed) == crash, || {
            format!("{} ended {:?} (crash directive {crash})", t.task_id, t.state)
        })?;
    }
    let took = started.elapsed();
    ensure(took < Duration::from_secs(30), || format!("took {took:?}"))?;
    Ok(format!(
        "200 tasks ({crashing} crashing), makespan {:.1}s virtual, {:.2}s wall",
        out.makespan.as_secs_f64(),
        took.as_secs_f64()
    ))
}

fn tts_properties() -> Outcome {
    let top = select_turns(
        &[1.0, 3.0, 2.0, 5.0, 4.0, 0.0]
            .iter()
            .enumerate()
            .map(|(i, r)| HistoryTurn {
                turn: i,
                candidate: String::new(),
                feedback: String::new(),
                reward: *r,
            })
            .collect::<Vec<_>>(),
        &ContextPolicy::default(),
    );
    ensure(top == vec![1, 2, 3, 4], || format!("top-w selected {top:?}"))?;

    let cluster = EmbeddedCluster::start(&EmbeddedConfig {
        workers: 4,
        ..EmbeddedConfig::default()
    });
    let api = cluster.coordinator();
    let prompts: Vec<Prompt> = (0..4)
        .map(|i| Prompt {
            prompt_id: format!("tts-{i}"),
            task: serde_json::json!({"start_speedup": 0.5, "step": 0.08, "spread": 0.5}),
        })
        .collect();
    let mut reports = Vec::new();
    for mode in [ContextMode::ContextManagement, ContextMode::Vanilla] {
        let cfg = BenchConfig {
            rollouts: 2,
            max_turns: 12,
            context: ContextPolicy {
                mode,
                ..ContextPolicy::default()
            },
            seed: 3,
            ..BenchConfig::default()
        };
        reports.push(
            run_benchmark(
                &prompts,
                &ScriptedGenerator,
                api.as_ref(),
                &cfg,
                &TrajectoryConfig::default(),
                &WhitespaceTokenCounter::default(),
            )
            .report,
        );
    }
    cluster.shutdown();
    let (ctx, vanilla) = (&reports[0], &reports[1]);
    let curve: Vec<f64> = (1..=12)
        .map(|t| ctx.fast_value(t, FastMode::BestOfHistory, 1.2).unwrap())
        .collect();
    ensure(curve.windows(2).all(|w| w[1] >= w[0]), || {
        format!("best-of curve {curve:?}")
    })?;
    ensure(curve[11] > curve[0], || {
        format!("scripted improvement not visible: {curve:?}")
    })?;
    for traj in &ctx.trajectories {
        for t in &traj.turns {
            ensure(t.context_turns.len() <= 4, || {
                format!("ctxmgmt used {} turns", t.context_turns.len())
            })?;
        }
    }
    for traj in &vanilla.trajectories {
        let tokens: Vec<usize> = traj.turns.iter().map(|t| t.context_tokens).collect();
        for (i, t) in traj.turns.iter().enumerate() {
            ensure(t.context_turns.len() == i, || {
                format!("vanilla turn {i} saw {}", t.context_turns.len())
            })?;
        }
        let steps: Vec<usize> = tokens.windows(2).map(|w| w[1] - w[0]).collect();
        let (lo, hi) = (*steps.iter().min().unwrap(), *steps.iter().max().unwrap());
        ensure(lo > 0 && hi <= 2 * lo, || {
            format!("vanilla token growth not linear: {tokens:?}")
        })?;
    }
    Ok(format!(
        "best-of Fast@1.2 by T: {}",
        curve.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" ")
    ))
}

fn determinism() -> Outcome {
    let a = benchmark_report();
    let b = benchmark_report();
    ensure(a == b, || "reports differ between runs".into())?;
    ensure(a.contains("\"schema\": \"report/v1\""), || "schema tag missing".into())?;
    Ok(format!("two runs, {} identical bytes", a.len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("estimator bias reproduction", estimator_bias),
        ("advantage identity and zero-sum", advantage_identity),
        ("formula goldens", formula_goldens),
        ("mismatch rejection contract", mrs_contract),
        ("hacking-check detection", hacking_suite),
        ("fault tolerance chaos run", chaos_run),
        ("test-time scaling properties", tts_properties),
        ("benchmark determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
