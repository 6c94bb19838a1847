//! Standalone advantage and filter computation for external trainers.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kgrid_cli::{finish, init_logging, load_config, run_signals, CliError, Overrides};

#[derive(Parser)]
#[command(name = "rl-signals", version)]
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
    /// rl/v1 trajectories in, one rl/v1 signal row per turn out.
    Compute {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        #[arg(long, value_name = "grpo|trloo")]
        estimator: Option<String>,
        #[arg(long)]
        gamma: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    finish(run(cli), false)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let Command::Compute {
        input,
        out,
        estimator,
        gamma,
    } = cli.command;
    let flags = Overrides::new().opt("estimator", estimator).opt("gamma", gamma);
    let config = load_config(cli.config.as_deref(), &cli.set, flags.into_vec())?;
    run_signals(&config, &input, out.as_deref()).map(|_| ())
}
