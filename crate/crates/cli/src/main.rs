use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};

use kgrid_cli::{
    finish, init_logging, load_config, run_bench, run_signals, BenchRequest, CliError, Cluster, Overrides,
};
use kgrid_core::api::{ApiError, CoordinatorApi, SubmitRequest};
use kgrid_core::clock::MonotonicClock;
use kgrid_core::config::{Config, DEFAULT_TEMPLATE};
use kgrid_core::coordinator::{Coordinator, FileStore, MemoryStore, StateStore};
use kgrid_core::eval::{CandidateSpec, SIM_BACKEND};
use kgrid_core::signals::{grpo_bias_experiment, Estimator, ToyBanditPolicy};
use kgrid_core::worker::sandbox::sandbox_child_main;
use kgrid_core::worker::{
    BackendSet, ProcessSandbox, SimBackend, StepOutcome, TaskRunner, ThreadSandbox, WorkerAgent, WorkerConfig,
};
use kgrid_net::HttpClient;

/// Distributed kernel evaluation with RL signal computation on top.
///
/// Settings resolve from built-in defaults, then `--config FILE`, then
/// `KGRID_<KEY>` environment variables, then `--set key=value`, then the
/// subcommand's own flags. Exit codes: 0 ok, 2 invalid input, 3 runtime
/// failure, 4 coordinator unreachable.
#[derive(Parser)]
#[command(name = "kgrid", version)]
struct Cli {
    /// Flat TOML settings file (see `kgrid config`).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Machine-readable JSON output.
    #[arg(long, global = true)]
    json: bool,
    /// Run coordinator and workers inside this process instead of talking
    /// to a coordinator over HTTP.
    #[arg(long, global = true)]
    embedded: bool,
    /// Log more; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the coordinator's HTTP API.
    Serve {
        #[arg(long, value_name = "ADDR")]
        bind: Option<String>,
        /// Persist task state here and recover it on start.
        #[arg(long, value_name = "DIR")]
        state_dir: Option<String>,
    },
    /// Run one worker against a coordinator.
    Work {
        #[arg(long)]
        worker_id: Option<String>,
        #[arg(long, value_name = "URL")]
        coordinator: Option<String>,
        #[arg(long, value_name = "sim")]
        backend: Option<String>,
        #[arg(long, value_name = "process|thread")]
        sandbox: Option<String>,
        /// Exit after this many tasks.
        #[arg(long)]
        max_tasks: Option<usize>,
    },
    /// Submit a candidate (JSON file, `-` for stdin).
    Submit {
        spec: PathBuf,
        #[arg(long, value_name = "URL")]
        coordinator: Option<String>,
        /// Per-task deadline in seconds.
        #[arg(long)]
        deadline: Option<f64>,
        /// Wait for a terminal state and print the result.
        #[arg(long)]
        wait: bool,
    },
    /// Show one task.
    Status {
        task_id: String,
        #[arg(long, value_name = "URL")]
        coordinator: Option<String>,
    },
    /// Compute advantages and filter decisions for rl/v1 trajectories.
    Signals(SignalsArgs),
    /// Run the multi-turn benchmark and print a report/v1 document.
    Bench(BenchArgs),
    /// Measure the gradient shrinkage of GRPO or leave-one-out on a toy bandit.
    BiasExp {
        /// Group size.
        #[arg(long = "N", short = 'N', default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 200_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = EstimatorArg::Grpo)]
        estimator: EstimatorArg,
    },
    /// Print the commented default settings file, or the resolved settings.
    Config {
        #[arg(long)]
        resolved: bool,
    },
    #[command(hide = true)]
    SandboxExec,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum EstimatorArg {
    Grpo,
    Trloo,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Grpo => Estimator::Grpo,
            EstimatorArg::Trloo => Estimator::Trloo,
        }
    }
}

#[derive(Args)]
struct SignalsArgs {
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Defaults to stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "grpo|trloo")]
    estimator: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    /// JSONL of {"prompt_id", "task"}.
    #[arg(long, value_name = "FILE")]
    prompts: PathBuf,
    /// scripted, exec:COMMAND or http:URL.
    #[arg(long, default_value = "scripted")]
    generator: String,
    #[arg(long, value_name = "vanilla|ctxmgmt")]
    mode: Option<String>,
    /// Context window in turns.
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    max_turns: Option<usize>,
    #[arg(long)]
    rollouts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallel: Option<usize>,
    #[arg(long, value_name = "URL")]
    coordinator: Option<String>,
    /// Workers for `--embedded`.
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Report destination; defaults to stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Also write the trajectories as rl/v1 JSONL.
    #[arg(long, value_name = "FILE")]
    trajectories: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let json = cli.json;
    finish(run(cli), json)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::Serve { bind, state_dir } => {
            let flags = Overrides::new().opt("bind", bind).opt("state_dir", state_dir);
            serve(&load_config(file, &cli.set, flags.into_vec())?, cli.json)
        }
        Command::Work {
            worker_id,
            coordinator,
            backend,
            sandbox,
            max_tasks,
        } => {
            let flags = Overrides::new()
                .opt("worker_id", worker_id)
                .opt("coordinator_url", coordinator)
                .opt("backend", backend)
                .opt("sandbox", sandbox);
            work(&load_config(file, &cli.set, flags.into_vec())?, max_tasks, cli.json)
        }
        Command::Submit {
            spec,
            coordinator,
            deadline,
            wait,
        } => {
            let config = load_config(
                file,
                &cli.set,
                Overrides::new().opt("coordinator_url", coordinator).into_vec(),
            )?;
            submit(&config, &spec, deadline, wait, cli.json)
        }
        Command::Status { task_id, coordinator } => {
            let config = load_config(
                file,
                &cli.set,
                Overrides::new().opt("coordinator_url", coordinator).into_vec(),
            )?;
            let snap = client(&config)?.query(&task_id)?;
            print_json_or(cli.json, &snap, || {
                format!(
                    "{} {:?} attempts={}{}",
                    snap.task_id,
                    snap.state,
                    snap.attempts,
                    snap.failure
                        .as_deref()
                        .map(|f| format!(" failure={f}"))
                        .unwrap_or_default()
                )
            })
        }
        Command::Signals(args) => {
            let flags = Overrides::new()
                .opt("estimator", args.estimator)
                .opt("gamma", args.gamma);
            let config = load_config(file, &cli.set, flags.into_vec())?;
            let rows = run_signals(&config, &args.input, args.out.as_deref())?;
            log::info!("wrote {rows} signal rows");
            Ok(())
        }
        Command::Bench(args) => {
            let flags = Overrides::new()
                .opt("context_mode", args.mode)
                .opt("window", args.w)
                .opt("max_turns", args.max_turns)
                .opt("eval_rollouts", args.rollouts)
                .opt("seed", args.seed)
                .opt("parallel", args.parallel)
                .opt("coordinator_url", args.coordinator);
            let config = load_config(file, &cli.set, flags.into_vec())?;
            let cluster = if cli.embedded {
                Cluster::Embedded { workers: args.workers }
            } else {
                Cluster::Remote {
                    url: config.coordinator_url.clone(),
                }
            };
            run_bench(
                &config,
                BenchRequest {
                    prompts: &args.prompts,
                    generator: &args.generator,
                    cluster,
                    out: args.out,
                    trajectories_out: args.trajectories,
                    json: cli.json,
                },
            )
            .map(|_| ())
        }
        Command::BiasExp {
            n,
            trials,
            seed,
            estimator,
        } => {
            let report = grpo_bias_experiment(&ToyBanditPolicy::five_arm(), estimator.into(), n, trials, seed)
                .map_err(|e| CliError::validation(e.to_string()))?;
            // Always JSON: the report is the output.
            let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::runtime(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
        Command::Config { resolved } => {
            if !resolved {
                print!("{DEFAULT_TEMPLATE}");
                return Ok(());
            }
            let config = load_config(file, &cli.set, Vec::new())?;
            print_json_or(cli.json, &config, || config.to_toml())
        }
        Command::SandboxExec => {
            let backends = BackendSet::new().with(SimBackend);
            sandbox_child_main(&backends, std::io::stdin().lock(), std::io::stdout().lock())
                .map_err(|e| CliError::runtime(e.to_string()))
        }
    }
}

fn print_json_or<T: serde::Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) -> Result<(), CliError> {
    if json {
        let s = serde_json::to_string(value).map_err(|e| CliError::runtime(e.to_string()))?;
        println!("{s}");
    } else {
        println!("{}", text().trim_end());
    }
    Ok(())
}

fn client(config: &Config) -> Result<HttpClient, CliError> {
    Ok(HttpClient::new(&config.coordinator_url)?)
}

fn serve(config: &Config, json: bool) -> Result<(), CliError> {
    let clock = Arc::new(MonotonicClock::new());
    let coordinator = if config.state_dir.is_empty() {
        Coordinator::new(config.coordinator(), clock, Arc::new(MemoryStore::new()))
    } else {
        let store: Arc<dyn StateStore> =
            Arc::new(FileStore::open(&config.state_dir).map_err(|e| CliError::runtime(e.to_string()))?);
        Coordinator::recover(config.coordinator(), clock, store).map_err(|e| CliError::runtime(e.to_string()))?
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::runtime(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&config.bind)
            .await
            .map_err(|e| CliError::runtime(format!("bind {}: {e}", config.bind)))?;
        let addr = listener.local_addr().map_err(|e| CliError::runtime(e.to_string()))?;
        if json {
            println!("{}", serde_json::json!({"listening": addr.to_string()}));
        } else {
            println!("listening on http://{addr}");
        }
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        kgrid_net::serve(
            listener,
            Arc::new(coordinator),
            Duration::from_secs_f64(config.sweep_interval_s),
            shutdown,
        )
        .await
        .map_err(|e| CliError::runtime(e.to_string()))
    })
}

fn work(config: &Config, max_tasks: Option<usize>, json: bool) -> Result<(), CliError> {
    if config.backend != SIM_BACKEND {
        return Err(CliError::validation(format!(
            "unsupported backend {:?}",
            config.backend
        )));
    }
    let wall = Duration::from_secs_f64(config.wall_limit_s);
    let runner = match config.sandbox.as_str() {
        "thread" => TaskRunner::new(ThreadSandbox::new(BackendSet::new().with(SimBackend)), wall),
        _ => {
            let exe = std::env::current_exe().map_err(|e| CliError::runtime(e.to_string()))?;
            TaskRunner::new(ProcessSandbox::new(exe, ["sandbox-exec"]), wall)
        }
    };
    let worker_id = if config.worker_id.is_empty() {
        format!("worker-{}", std::process::id())
    } else {
        config.worker_id.clone()
    };
    let mut wc = WorkerConfig::new(worker_id, &[config.backend.as_str()]);
    wc.poll_interval = config.poll_interval();
    wc.heartbeat_interval = Duration::from_secs_f64(config.heartbeat_interval_s);
    let mut agent = WorkerAgent::new(wc, runner);
    let api = client(config)?;

    let mut executed = 0usize;
    let mut failures = 0u32;
    let mut last_error: Option<(ApiError, Instant)> = None;
    while max_tasks.is_none_or(|m| executed < m) {
        match agent.step(&api) {
            StepOutcome::Executed { task_id, ack } => {
                executed += 1;
                failures = 0;
                if json {
                    println!("{}", serde_json::json!({"task_id": task_id, "ack": ack}));
                } else {
                    println!(
                        "{task_id} {}",
                        ack.map(|a| format!("{a:?}")).unwrap_or_else(|| "unacknowledged".into())
                    );
                }
            }
            StepOutcome::Idle => {
                failures = 0;
                let _ = api.heartbeat(agent.id(), None);
                std::thread::sleep(config.poll_interval());
            }
            StepOutcome::Backoff(e) => {
                // Log each distinct outage once per minute, not once per retry.
                let quiet = last_error
                    .as_ref()
                    .is_some_and(|(prev, at)| prev.kind() == e.kind() && at.elapsed() < Duration::from_secs(60));
                if !quiet {
                    log::warn!("worker {}: {e}; retrying", agent.id());
                    last_error = Some((e, Instant::now()));
                }
                let delay = Duration::from_millis(50)
                    .saturating_mul(1 << failures.min(6))
                    .min(Duration::from_secs(2));
                failures += 1;
                std::thread::sleep(delay);
            }
        }
    }
    Ok(())
}

fn submit(config: &Config, spec: &Path, deadline: Option<f64>, wait: bool, json: bool) -> Result<(), CliError> {
    let mut raw = Vec::new();
    let read = if spec == Path::new("-") {
        std::io::stdin().read_to_end(&mut raw)
    } else {
        std::fs::File::open(spec).and_then(|mut f| f.read_to_end(&mut raw))
    };
    read.map_err(|e| CliError::runtime(format!("{}: {e}", spec.display())))?;
    let payload: CandidateSpec = serde_json::from_slice(&raw)
        .map_err(|e| CliError::validation(format!("{}: not a candidate: {e}", spec.display())))?;
    let api = client(config)?;
    let task_id = api.submit(SubmitRequest {
        payload,
        deadline_s: deadline,
    })?;
    if !wait {
        return print_json_or(json, &serde_json::json!({"task_id": task_id}), || task_id.clone());
    }
    loop {
        let snap = api.query(&task_id)?;
        if snap.is_terminal() {
            return print_json_or(json, &snap, || {
                serde_json::to_string_pretty(&snap).unwrap_or_else(|_| format!("{task_id} {:?}", snap.state))
            });
        }
        std::thread::sleep(Duration::from_millis(100));
    }
}
