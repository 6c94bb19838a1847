//! Multi-turn benchmark runner. Evaluates in-process unless `--coordinator`
//! points at a running coordinator.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kgrid_cli::{finish, init_logging, load_config, run_bench, BenchRequest, CliError, Cluster, Overrides};

#[derive(Parser)]
#[command(name = "harness", version)]
struct Cli {
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every prompt K times for up to T turns and write report/v1.
    Run {
        #[arg(long, value_name = "FILE")]
        prompts: PathBuf,
        /// scripted, exec:COMMAND or http:URL.
        #[arg(long, default_value = "scripted")]
        generator: String,
        #[arg(long, value_name = "vanilla|ctxmgmt")]
        mode: Option<String>,
        #[arg(long)]
        w: Option<usize>,
        #[arg(long, value_name = "T")]
        max_turns: Option<usize>,
        #[arg(long, value_name = "K")]
        rollouts: Option<usize>,
        #[arg(long, value_name = "S")]
        seed: Option<u64>,
        #[arg(long)]
        parallel: Option<usize>,
        #[arg(long, value_name = "URL")]
        coordinator: Option<String>,
        /// In-process workers when no coordinator is given.
        #[arg(long, default_value_t = 4)]
        workers: usize,
        /// Defaults to a text summary on stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Also write the trajectories as rl/v1 JSONL.
        #[arg(long, value_name = "FILE")]
        trajectories: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let json = matches!(cli.command, Command::Run { json: true, .. });
    finish(run(cli), json)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let Command::Run {
        prompts,
        generator,
        mode,
        w,
        max_turns,
        rollouts,
        seed,
        parallel,
        coordinator,
        workers,
        out,
        trajectories,
        json,
    } = cli.command;
    let cluster = match &coordinator {
        Some(url) => Cluster::Remote { url: url.clone() },
        None => Cluster::Embedded { workers },
    };
    let flags = Overrides::new()
        .opt("context_mode", mode)
        .opt("window", w)
        .opt("max_turns", max_turns)
        .opt("eval_rollouts", rollouts)
        .opt("seed", seed)
        .opt("parallel", parallel)
        .opt("coordinator_url", coordinator);
    let config = load_config(cli.config.as_deref(), &cli.set, flags.into_vec())?;
    run_bench(
        &config,
        BenchRequest {
            prompts: &prompts,
            generator: &generator,
            cluster,
            out,
            trajectories_out: trajectories,
            json,
        },
    )
    .map(|_| ())
}
