//! Shared plumbing for the `kgrid`, `rl-signals` and `harness` binaries.
//! Holds config layering with exit-code mapping, plus the commands that
//! more than one binary exposes.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use kgrid_core::api::{ApiError, CoordinatorApi};
use kgrid_core::config::{Config, ConfigError};
use kgrid_core::harness::{
    read_prompts, run_benchmark, BenchError, BenchOutcome, EmbeddedCluster, EmbeddedConfig, ExecGenerator, Generator,
    ScriptedGenerator,
};
use kgrid_core::signals::batch::SignalsError;
use kgrid_core::signals::{compute_signals, read_trajectories, write_rows};
use kgrid_net::{HttpClient, HttpGenerator};

/// Why a command failed; each kind has its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// Bad flags or malformed input.
    Validation,
    /// The command started but could not finish.
    Runtime,
    /// The coordinator could not be reached.
    Connectivity,
}

impl FailureKind {
    pub fn exit_code(self) -> u8 {
        match self {
            FailureKind::Validation => 2,
            FailureKind::Runtime => 3,
            FailureKind::Connectivity => 4,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            FailureKind::Validation => "validation",
            FailureKind::Runtime => "runtime",
            FailureKind::Connectivity => "connectivity",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: FailureKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: FailureKind::Validation,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            kind: FailureKind::Runtime,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::runtime(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<ApiError> for CliError {
    fn from(e: ApiError) -> Self {
        let kind = match e {
            ApiError::Unreachable(_) => FailureKind::Connectivity,
            ApiError::Validation(_) | ApiError::NotFound(_) => FailureKind::Validation,
            _ => FailureKind::Runtime,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Read { .. } => Self::runtime(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<SignalsError> for CliError {
    fn from(e: SignalsError) -> Self {
        match e {
            SignalsError::Io(_) => Self::runtime(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Io(_) => Self::runtime(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

/// Prints the error (as JSON when asked) and maps it to an exit code.
pub fn finish(result: Result<(), CliError>, json: bool) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json {
                eprintln!(
                    "{}",
                    serde_json::json!({"error": e.kind.as_str(), "message": e.message})
                );
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.kind.exit_code())
        }
    }
}

pub fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_millis()
        .try_init();
}

/// Resolves defaults, file, `KGRID_*` variables, `--set` pairs, then the
/// command's own flags (`flags`, already in `key=value` form).
pub fn load_config(file: Option<&Path>, sets: &[String], flags: Vec<(String, String)>) -> Result<Config, CliError> {
    let mut overrides = sets
        .iter()
        .map(|s| Config::parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    overrides.extend(flags);
    Ok(Config::load(file, std::env::vars(), &overrides)?)
}

/// Collects `Some` flag values as config overrides.
#[derive(Default)]
pub struct Overrides(Vec<(String, String)>);

impl Overrides {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn opt(mut self, key: &str, value: Option<impl ToString>) -> Self {
        if let Some(v) = value {
            self.0.push((key.to_string(), v.to_string()));
        }
        self
    }

    pub fn into_vec(self) -> Vec<(String, String)> {
        self.0
    }
}

pub fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) if p != Path::new("-") => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
        _ => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::runtime(format!("stdout: {e}")))
        }
    }
}

fn open(path: &Path) -> Result<BufReader<Box<dyn std::io::Read>>, CliError> {
    let inner: Box<dyn std::io::Read> = if path == Path::new("-") {
        Box::new(std::io::stdin())
    } else {
        Box::new(File::open(path).map_err(|e| CliError::io(path, e))?)
    };
    Ok(BufReader::new(inner))
}

/// Reads `rl/v1` trajectories and writes one signal row per turn.
pub fn run_signals(config: &Config, input: &Path, output: Option<&Path>) -> Result<usize, CliError> {
    let trajectories = read_trajectories(open(input)?)?;
    let rows = compute_signals(&trajectories, &config.signals())?;
    match output {
        Some(p) if p != Path::new("-") => {
            let file = File::create(p).map_err(|e| CliError::io(p, e))?;
            write_rows(&rows, BufWriter::new(file))?;
        }
        _ => match write_rows(&rows, std::io::stdout().lock()) {
            // A closed pipe (`| head`) is the reader's choice, not a failure.
            Err(SignalsError::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
            r => r?,
        },
    }
    Ok(rows.len())
}

/// `scripted`, `exec:COMMAND`, or `http:URL` (a bare `http://` or
/// `https://` URL also works).
pub fn parse_generator(spec: &str, timeout: Duration) -> Result<Box<dyn Generator>, CliError> {
    let http = |url: &str| -> Result<Box<dyn Generator>, CliError> {
        HttpGenerator::new(url, timeout)
            .map(|g| Box::new(g) as Box<dyn Generator>)
            .map_err(|e| CliError::validation(e.to_string()))
    };
    if spec == "scripted" {
        Ok(Box::new(ScriptedGenerator))
    } else if let Some(cmd) = spec.strip_prefix("exec:") {
        if cmd.trim().is_empty() {
            return Err(CliError::validation("exec: generator needs a command"));
        }
        Ok(Box::new(ExecGenerator::new(cmd)))
    } else if spec.starts_with("http://") || spec.starts_with("https://") {
        http(spec)
    } else if let Some(url) = spec.strip_prefix("http:") {
        http(url)
    } else {
        Err(CliError::validation(format!(
            "unknown generator {spec:?}; expected scripted, exec:COMMAND or http:URL"
        )))
    }
}

/// Where benchmark tasks are evaluated.
pub enum Cluster {
    Embedded { workers: usize },
    Remote { url: String },
}

pub struct BenchRequest<'a> {
    pub prompts: &'a Path,
    pub generator: &'a str,
    pub cluster: Cluster,
    pub out: Option<PathBuf>,
    pub trajectories_out: Option<PathBuf>,
    pub json: bool,
}

/// Runs the benchmark and writes the report. The report echoes `config`.
pub fn run_bench(config: &Config, req: BenchRequest<'_>) -> Result<BenchOutcome, CliError> {
    let prompts = read_prompts(open(req.prompts)?)?;
    let generator = parse_generator(req.generator, Duration::from_secs_f64(config.wall_limit_s))?;
    let mut trajectory = config.trajectory();
    let bench = config.bench();
    let counter = config.token_counter();

    let mut outcome = match req.cluster {
        Cluster::Embedded { workers } => {
            let cluster = EmbeddedCluster::start(&EmbeddedConfig {
                workers,
                coordinator: config.coordinator(),
                wall_limit: Duration::from_secs_f64(config.wall_limit_s),
                ..EmbeddedConfig::default()
            });
            let coordinator = cluster.coordinator();
            let outcome = run_benchmark(
                &prompts,
                generator.as_ref(),
                coordinator.as_ref(),
                &bench,
                &trajectory,
                &counter,
            );
            cluster.shutdown();
            outcome
        }
        Cluster::Remote { url } => {
            let api = HttpClient::new(&url)?;
            // Fail fast instead of marking every turn invalid.
            match api.query("task-0000000000") {
                Ok(_) | Err(ApiError::NotFound(_)) => {}
                Err(e) => return Err(e.into()),
            }
            trajectory.poll_interval = Duration::from_millis(20);
            run_benchmark(&prompts, generator.as_ref(), &api, &bench, &trajectory, &counter)
        }
    };
    outcome.report.settings = serde_json::to_value(config).map_err(|e| CliError::runtime(e.to_string()))?;

    let text = if req.json || req.out.is_some() {
        outcome.report.to_json() + "\n"
    } else {
        outcome.report.render_text()
    };
    write_output(req.out.as_deref(), &text)?;
    if let Some(path) = &req.trajectories_out {
        let mut lines = String::new();
        for t in outcome.rl_trajectories() {
            lines += &serde_json::to_string(&t).map_err(|e| CliError::runtime(e.to_string()))?;
            lines.push('\n');
        }
        std::fs::write(path, lines).map_err(|e| CliError::io(path, e))?;
    }
    Ok(outcome)
}
