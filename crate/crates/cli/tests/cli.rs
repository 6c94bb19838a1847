use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use serde_json::{json, Value};

fn kgrid() -> Command {
    cmd(env!("CARGO_BIN_EXE_kgrid"))
}

fn cmd(bin: &str) -> Command {
    let mut c = Command::new(bin);
    // Keep the caller's environment from leaking settings into the run.
    for (k, _) in std::env::vars() {
        if k.starts_with("KGRID_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(c: &mut Command) -> Output {
    c.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn candidate(reference_ms: f64, candidate_ms: f64) -> Value {
    json!({
        "backend": "sim",
        "sim": {
            "reference_ms": reference_ms,
            "candidate_ms": candidate_ms,
            "kernels_train": ["k"],
            "kernels_eval": ["k"],
            "profile": [{"name": "k", "share": 1.0, "generated": true}]
        }
    })
}

/// A `kgrid serve` child on an ephemeral port, killed on drop.
struct Server {
    child: Child,
    url: String,
}

impl Server {
    fn start() -> Self {
        let mut child = kgrid()
            .args([
                "--json",
                "serve",
                "--bind",
                "127.0.0.1:0",
                "--set",
                "sweep_interval_s=0.1",
            ])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let v: Value = serde_json::from_str(&line).expect("listening line");
        Self {
            child,
            url: format!("http://{}", v["listening"].as_str().unwrap()),
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn bias_experiment_shows_half_shrinkage_for_pairs() {
    let o = run(kgrid().args(["bias-exp", "--N", "2", "--trials", "200000", "--seed", "7"]));
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let s = v["shrinkage"].as_f64().unwrap();
    assert!((s - 0.5).abs() < 0.05, "shrinkage {s}");

    let o = run(kgrid().args([
        "bias-exp",
        "--N",
        "2",
        "--trials",
        "200000",
        "--seed",
        "7",
        "--estimator",
        "trloo",
    ]));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["shrinkage"].as_f64().unwrap() - 1.0).abs() < 0.05);

    assert_eq!(code(&run(kgrid().args(["bias-exp", "--N", "1"]))), 2);
}

fn trajectory(prompt: &str, rollout: usize, rewards: &[f64]) -> String {
    let turns: Vec<Value> = rewards
        .iter()
        .map(|r| {
            json!({"reward": {"correctness": 1, "speedup_clipped": r - 1.0, "pr_ratio": 0.9, "total": r},
                   "valid": true})
        })
        .collect();
    json!({"schema": "rl/v1", "prompt_id": prompt, "rollout_index": rollout, "turns": turns}).to_string()
}

#[test]
fn signals_pipe_matches_leave_one_out_by_hand() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("traj.jsonl");
    let rewards = [[2.0, 2.5], [3.5, 1.0], [1.0, 4.0]];
    let lines: Vec<String> = rewards.iter().enumerate().map(|(i, r)| trajectory("p", i, r)).collect();
    std::fs::write(&input, lines.join("\n") + "\n").unwrap();

    let o = run(kgrid()
        .args(["signals", "--in"])
        .arg(&input)
        .args(["--estimator", "trloo"]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 6);

    for turn in 0..2 {
        let g: Vec<f64> = rewards.iter().map(|r| r[turn..].iter().sum()).collect();
        for (i, gi) in g.iter().enumerate() {
            let mut others = 0.0;
            for (j, gj) in g.iter().enumerate() {
                if j != i {
                    others += gj;
                }
            }
            let want = gi - others / 2.0;
            let row = rows
                .iter()
                .find(|r| r["rollout_index"] == i && r["turn"] == turn)
                .unwrap();
            assert!((row["advantage"].as_f64().unwrap() - want).abs() < 1e-12, "{row}");
            assert_eq!(row["estimator"], "trloo");
            assert_eq!(row["keep"], true);
        }
    }

    // The standalone binary writes the same rows.
    let out = dir.path().join("adv.jsonl");
    let o = run(cmd(env!("CARGO_BIN_EXE_rl-signals"))
        .args(["compute", "--estimator", "trloo", "--in"])
        .arg(&input)
        .arg("--out")
        .arg(&out));
    assert_eq!(code(&o), 0);
    assert_eq!(
        std::fs::read_to_string(&out).unwrap(),
        stdout(&run(kgrid().args(["signals", "--in"]).arg(&input)))
    );

    std::fs::write(&input, "{\"schema\":\"rl/v0\"}\n").unwrap();
    assert_eq!(code(&run(kgrid().args(["signals", "--in"]).arg(&input))), 2);
}

#[test]
fn exit_codes_separate_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("c.json");
    std::fs::write(&spec, candidate(10.0, 5.0).to_string()).unwrap();

    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let o = run(kgrid()
        .args(["--json", "submit"])
        .arg(&spec)
        .args(["--coordinator", &format!("http://127.0.0.1:{port}")]));
    assert_eq!(code(&o), 4);
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "connectivity");

    assert_eq!(
        code(&run(kgrid().args(["config", "--resolved", "--set", "window=0"]))),
        2
    );
    assert_eq!(
        code(&run(kgrid().args(["config", "--resolved", "--set", "no_such_key=1"]))),
        2
    );
    assert_eq!(
        code(&run(kgrid().args(["config", "--resolved"]).env("KGRID_GAMMA", "2"))),
        2
    );
    std::fs::write(&spec, "{\"backend\": 3}").unwrap();
    assert_eq!(code(&run(kgrid().arg("submit").arg(&spec))), 2);
    let missing = dir.path().join("absent.toml");
    assert_eq!(
        code(&run(kgrid()
            .arg("--config")
            .arg(&missing)
            .args(["config", "--resolved"]))),
        3
    );
    assert_eq!(code(&run(kgrid().arg("no-such-command"))), 2);
}

#[test]
fn config_layers_resolve_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let template = stdout(&run(kgrid().arg("config")));
    let file = dir.path().join("kgrid.toml");
    std::fs::write(&file, template.replace("window = 4", "window = 6")).unwrap();

    let resolved = |extra: &[&str], env: Option<(&str, &str)>| -> Value {
        let mut c = kgrid();
        c.args(["--json", "--config"])
            .arg(&file)
            .args(["config", "--resolved"])
            .args(extra);
        if let Some((k, v)) = env {
            c.env(k, v);
        }
        let o = run(&mut c);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_str(&stdout(&o)).unwrap()
    };
    let v = resolved(&[], None);
    assert_eq!(v["window"], 6);
    assert_eq!(v["gamma"], 1.0);
    assert_eq!(v["speedup_clip"], 3.0);
    assert_eq!(v["prs_tau"], 0.3);
    assert_eq!(v["eval_rollouts"], 8);
    assert_eq!(v["train_rollouts"], 16);
    assert_eq!(resolved(&[], Some(("KGRID_WINDOW", "5")))["window"], 5);
    assert_eq!(
        resolved(&["--set", "window=2"], Some(("KGRID_WINDOW", "5")))["window"],
        2
    );
}

fn prompts(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("prompts.jsonl");
    let lines = [
        json!({"prompt_id": "a", "task": {"start_speedup": 0.9, "step": 0.3, "spread": 0.2}}),
        json!({"prompt_id": "b", "task": {"start_speedup": 1.1, "step": 0.2, "hack_at": [1]}}),
        json!({"prompt_id": "c", "task": {"start_speedup": 0.7, "step": 0.4, "crash_at": [0]}}),
    ];
    let text: Vec<String> = lines.iter().map(Value::to_string).collect();
    std::fs::write(&path, text.join("\n") + "\n").unwrap();
    path
}

fn harness_run(prompts: &Path, out: &Path, extra: &[&str]) -> Output {
    let o = run(cmd(env!("CARGO_BIN_EXE_harness"))
        .args(["run", "--prompts"])
        .arg(prompts)
        .args(["--mode", "ctxmgmt", "--w", "4", "--max-turns", "3"])
        .args(["--rollouts", "2", "--seed", "11", "--out"])
        .arg(out)
        .args(extra));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn harness_reports_are_reproducible_and_echo_settings() {
    let dir = tempfile::tempdir().unwrap();
    let p = prompts(dir.path());
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    harness_run(&p, &a, &[]);
    harness_run(&p, &b, &["--workers", "2"]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());

    let report: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(report["schema"], "report/v1");
    assert_eq!(report["samples"], 6);
    assert_eq!(report["settings"]["seed"], 11);
    assert_eq!(report["settings"]["window"], 4);
    assert_eq!(report["settings"]["context_mode"], "ctxmgmt");
    assert_eq!(report["trajectories"].as_array().unwrap().len(), 6);

    let traj = dir.path().join("t.jsonl");
    let o = run(kgrid()
        .args([
            "--embedded",
            "bench",
            "--rollouts",
            "2",
            "--seed",
            "11",
            "--max-turns",
            "3",
            "--prompts",
        ])
        .arg(&p)
        .arg("--trajectories")
        .arg(&traj));
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("BestOfHistory"));
    let signals = run(kgrid().args(["signals", "--in"]).arg(&traj));
    assert_eq!(code(&signals), 0);
    assert_eq!(stdout(&signals).lines().count(), 18);
}

#[test]
fn exec_generator_feeds_the_harness() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("c.json");
    std::fs::write(&spec, candidate(9.0, 6.0).to_string()).unwrap();
    let out = dir.path().join("r.json");
    let gen = format!("exec:cat > /dev/null; cat {}", spec.display());
    harness_run(&prompts(dir.path()), &out, &["--generator", &gen]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    for t in report["trajectories"].as_array().unwrap() {
        for turn in t["turns"].as_array().unwrap() {
            assert_eq!(turn["valid"], true);
            assert!((turn["speedup_raw"].as_f64().unwrap() - 1.5).abs() < 1e-12);
        }
    }
    let o = run(cmd(env!("CARGO_BIN_EXE_harness"))
        .args(["run", "--generator", "bogus", "--prompts"])
        .arg(prompts(dir.path())));
    assert_eq!(code(&o), 2);
}

#[test]
fn networked_processes_cooperate() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start();
    let workers: Vec<Child> = (0..2)
        .map(|i| {
            kgrid()
                .args([
                    "work",
                    "--worker-id",
                    &format!("cli-w{i}"),
                    "--coordinator",
                    &server.url,
                ])
                .args(["--set", "poll_interval_ms=10"])
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .spawn()
                .unwrap()
        })
        .collect();
    struct Reap(Vec<Child>);
    impl Drop for Reap {
        fn drop(&mut self) {
            for c in &mut self.0 {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
    let _reap = Reap(workers);

    let spec = dir.path().join("c.json");
    std::fs::write(&spec, candidate(12.0, 4.0).to_string()).unwrap();
    let o = run(kgrid()
        .args(["--json", "submit", "--wait", "--coordinator", &server.url])
        .arg(&spec));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let snap: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(snap["state"], "completed");
    assert_eq!(snap["result"]["speedup_raw"], 3.0);
    assert_eq!(snap["result"]["status"]["status"], "pass");

    let id = snap["task_id"].as_str().unwrap();
    let o = run(kgrid().args(["--json", "status", id, "--coordinator", &server.url]));
    assert_eq!(code(&o), 0);
    assert_eq!(serde_json::from_str::<Value>(&stdout(&o)).unwrap(), snap);
    assert_eq!(
        code(&run(kgrid().args([
            "status",
            "task-9999999999",
            "--coordinator",
            &server.url
        ]))),
        2
    );

    // A crashing sandbox process is an infrastructure failure: retried,
    // then failed with a zero-reward result.
    let mut crash = candidate(12.0, 4.0);
    crash["sim"]["crash"] = json!(true);
    std::fs::write(&spec, crash.to_string()).unwrap();
    let o = run(kgrid()
        .args(["--json", "submit", "--wait", "--coordinator", &server.url])
        .arg(&spec));
    let snap: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(snap["state"], "failed");
    assert_eq!(snap["attempts"], 3);
    assert_eq!(snap["result"]["status"]["status"], "runtime_error");
    assert_eq!(snap["result"]["infra_failure"], true);

    // Same scripted benchmark through the network and in-process. Crash
    // tracebacks differ between process and thread sandboxes, so the
    // crashing prompt is left out.
    let p = dir.path().join("no-crash.jsonl");
    let text = std::fs::read_to_string(prompts(dir.path())).unwrap();
    std::fs::write(
        &p,
        text.lines()
            .filter(|l| !l.contains("crash_at"))
            .collect::<Vec<_>>()
            .join("\n"),
    )
    .unwrap();
    let (remote, local) = (dir.path().join("remote.json"), dir.path().join("local.json"));
    harness_run(&p, &remote, &["--coordinator", &server.url]);
    harness_run(&p, &local, &[]);
    let strip = |path: &Path| {
        let mut v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        v["settings"].as_object_mut().unwrap().remove("coordinator_url");
        v
    };
    assert_eq!(strip(&remote), strip(&local));
}
