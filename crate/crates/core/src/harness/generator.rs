//! Candidate generators: the policy seam of the refinement loop.

use std::io::Write;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::context::AssembledContext;
use crate::eval::{CandidateSpec, StatusKind};
use crate::worker::sim::{SimulatedTaskSpec, SplitMix64};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeneratorError {
    #[error("generator failed: {0}")]
    Failed(String),
    #[error("generator produced malformed output: {0}")]
    Protocol(String),
}

/// What the generator sees for one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub rollout_index: usize,
    pub seed: u64,
    pub context: AssembledContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Generation {
    Candidate(CandidateSpec),
    Stop { stop: bool },
}

impl Generation {
    pub fn stop() -> Self {
        Generation::Stop { stop: true }
    }
}

pub trait Generator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<Generation, GeneratorError>;
}

/// One scripted turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum ScriptStep {
    /// Submit this simulated candidate.
    Submit {
        sim: SimulatedTaskSpec,
    },
    /// Fail to produce anything this turn.
    Error {
        message: String,
    },
    Stop,
}

/// Parameters of the procedural script, read from the task descriptor.
/// Every field is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptedTask {
    pub reference_ms: f64,
    /// Speedup of the first turn.
    pub start_speedup: f64,
    /// Added per turn.
    pub step: f64,
    /// Uniform per-(rollout, turn) perturbation of the speedup, `+-spread/2`.
    pub spread: f64,
    /// Share of device time taken by the generated kernel.
    pub pr: f64,
    /// Timing jitter passed through to the simulated backend.
    pub jitter: f64,
    /// Zero-based turns that emit a kernel which is never launched.
    pub hack_at: Vec<usize>,
    /// Zero-based turns that emit a candidate failing correctness.
    pub fail_at: Vec<usize>,
    /// Zero-based turns whose sandbox crashes.
    pub crash_at: Vec<usize>,
    /// Zero-based turns where generation itself fails.
    pub error_at: Vec<usize>,
    /// Turn at which the generator declares it is done.
    pub stop_at: Option<usize>,
    /// Explicit per-turn table. When present it overrides the procedural
    /// fields; turns past its end repeat the last step.
    pub script: Vec<ScriptStep>,
}

impl Default for ScriptedTask {
    fn default() -> Self {
        Self {
            reference_ms: 10.0,
            start_speedup: 1.0,
            step: 0.3,
            spread: 0.0,
            pr: 0.8,
            jitter: 0.0,
            hack_at: Vec::new(),
            fail_at: Vec::new(),
            crash_at: Vec::new(),
            error_at: Vec::new(),
            stop_at: None,
            script: Vec::new(),
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic, table-driven generator for tests and demos. Output is a
/// function of `(task, prompt_id, rollout_index, turn, seed)` only.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedGenerator;

impl ScriptedGenerator {
    pub fn step_for(&self, request: &GenerationRequest) -> Result<ScriptStep, GeneratorError> {
        let ctx = &request.context;
        let task: ScriptedTask = match &ctx.task {
            serde_json::Value::Null => ScriptedTask::default(),
            v => serde_json::from_value(v.clone())
                .map_err(|e| GeneratorError::Failed(format!("bad scripted task descriptor: {e}")))?,
        };
        let turn = ctx.turn;
        if let Some(last) = task.script.last() {
            return Ok(task.script.get(turn).unwrap_or(last).clone());
        }
        if task.stop_at == Some(turn) {
            return Ok(ScriptStep::Stop);
        }
        if task.error_at.contains(&turn) {
            return Ok(ScriptStep::Error {
                message: format!("scripted generation failure at turn {}", turn + 1),
            });
        }
        let key = request.seed ^ fnv1a(&ctx.prompt_id) ^ ((request.rollout_index as u64) << 32 | turn as u64);
        let mut rng = SplitMix64::new(key);
        let noise = (rng.next_f64() - 0.5) * task.spread;
        let speedup = (task.start_speedup + task.step * turn as f64 + noise).max(0.05);
        let sim_seed = rng.next_u64();
        let mut sim = SimulatedTaskSpec::passing(task.reference_ms, task.reference_ms / speedup)
            .with_profile(&[("generated_kernel", task.pr, true), ("aten::op", 1.0 - task.pr, false)])
            .with_kernels(&["generated_kernel"], &["generated_kernel"]);
        if task.jitter > 0.0 {
            sim = sim.with_jitter(task.jitter, sim_seed);
        }
        if task.hack_at.contains(&turn) {
            sim = sim.with_kernels(&[], &[]);
        }
        if task.fail_at.contains(&turn) {
            sim = SimulatedTaskSpec::failing(StatusKind::Mismatch, "output mismatch: max abs diff 3.2e-1 > atol 1e-3");
        }
        if task.crash_at.contains(&turn) {
            sim = sim.with_crash();
        }
        Ok(ScriptStep::Submit { sim })
    }
}

impl Generator for ScriptedGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<Generation, GeneratorError> {
        match self.step_for(request)? {
            ScriptStep::Submit { sim } => Ok(Generation::Candidate(CandidateSpec::simulated(sim))),
            ScriptStep::Error { message } => Err(GeneratorError::Failed(message)),
            ScriptStep::Stop => Ok(Generation::stop()),
        }
    }
}

/// Runs a shell command per turn: the request as JSON on stdin, one JSON
/// candidate (or `{"stop": true}`) on stdout.
#[derive(Debug, Clone)]
pub struct ExecGenerator {
    pub command: String,
}

impl ExecGenerator {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
        }
    }
}

pub fn parse_generation(bytes: &[u8]) -> Result<Generation, GeneratorError> {
    let g: Generation = serde_json::from_slice(bytes).map_err(|e| GeneratorError::Protocol(e.to_string()))?;
    match &g {
        Generation::Stop { stop: false } => Err(GeneratorError::Protocol("\"stop\": false is not a candidate".into())),
        Generation::Candidate(c) => c.validate().map(|_| g.clone()).map_err(GeneratorError::Protocol),
        _ => Ok(g),
    }
}

impl Generator for ExecGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<Generation, GeneratorError> {
        let input = serde_json::to_vec(request).map_err(|e| GeneratorError::Failed(e.to_string()))?;
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| GeneratorError::Failed(format!("spawning {:?}: {e}", self.command)))?;
        if let Some(mut stdin) = child.stdin.take() {
            // A generator may exit without reading its input.
            let _ = stdin.write_all(&input);
        }
        let out = child
            .wait_with_output()
            .map_err(|e| GeneratorError::Failed(e.to_string()))?;
        if !out.status.success() {
            return Err(GeneratorError::Failed(format!(
                "{:?} exited with {}: {}",
                self.command,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        parse_generation(&out.stdout)
    }
}
