//! Evaluation payloads and structured results.
//!
//! These types are the wire contract between the coordinator, its workers
//! and the training-signal engine. Field names are snake_case
//! and enums serialize as lowercase strings.

use serde::{Deserialize, Serialize};

use crate::worker::sim::SimulatedTaskSpec;

/// Name of the built-in deterministic backend.
pub const SIM_BACKEND: &str = "sim";

/// Discrete correctness outcome of a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusKind {
    Pass,
    Mismatch,
    RuntimeError,
    CompilationError,
}

impl StatusKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StatusKind::Pass => "pass",
            StatusKind::Mismatch => "mismatch",
            StatusKind::RuntimeError => "runtime_error",
            StatusKind::CompilationError => "compilation_error",
        }
    }

    /// Exception-type label used in failure diagnostics.
    pub fn exception_type(self) -> &'static str {
        match self {
            StatusKind::Pass => "",
            StatusKind::Mismatch => "OutputMismatch",
            StatusKind::RuntimeError => "RuntimeError",
            StatusKind::CompilationError => "CompilationError",
        }
    }
}

impl std::fmt::Display for StatusKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Correctness status with a diagnostic for every non-pass outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessStatus {
    pub status: StatusKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CorrectnessStatus {
    pub fn pass() -> Self {
        Self {
            status: StatusKind::Pass,
            detail: None,
        }
    }

    /// Builds a failing status. An empty detail is replaced by the status name
    /// so that non-pass outcomes always carry a diagnostic.
    pub fn failed(status: StatusKind, detail: impl Into<String>) -> Self {
        debug_assert!(status != StatusKind::Pass);
        let mut detail = detail.into();
        if detail.trim().is_empty() {
            detail = status.as_str().to_string();
        }
        Self {
            status,
            detail: Some(detail),
        }
    }

    pub fn is_pass(&self) -> bool {
        self.status == StatusKind::Pass
    }
}

/// Per-run timing samples for the reference and the candidate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSamples {
    pub reference: Vec<f64>,
    pub kernel: Vec<f64>,
}

/// Timing of a correct candidate: warmup runs followed by measured runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub t_reference_ms: f64,
    pub t_kernel_ms: f64,
    pub warmup_runs: u32,
    pub measured_runs: u32,
    /// Measured samples only; these are the samples the means are taken over.
    pub raw_samples_ms: RunSamples,
    /// Warmup samples, retained for bookkeeping and never averaged.
    pub warmup_samples_ms: RunSamples,
}

/// Kernels observed on the instrumented launch path in each module mode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HackingVerdict {
    pub kernels_executed_train: Vec<String>,
    pub kernels_executed_eval: Vec<String>,
    pub hacked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub kernel_name: String,
    pub cuda_time_ms: f64,
    pub fraction_of_total: f64,
    /// Whether the kernel was authored by the candidate (as opposed to a
    /// library/framework kernel).
    pub generated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureDiagnostics {
    pub exception_type: String,
    pub traceback: String,
}

/// Kernel-level runtime breakdown, or failure diagnostics for incorrect
/// candidates, plus the rendered feedback text handed to the next turn.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfilingSummary {
    pub entries: Vec<ProfileEntry>,
    pub t_generated_ms: f64,
    pub t_total_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pr_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_diagnostics: Option<FailureDiagnostics>,
    pub feedback_text: String,
}

/// Structured outcome of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub status: CorrectnessStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup_raw: Option<f64>,
    pub hacking: HackingVerdict,
    pub profiling: ProfilingSummary,
    pub backend: String,
    pub wall_time_ms: f64,
    /// Set when the evaluation itself failed (sandbox death, wall-limit
    /// timeout) rather than the candidate. The coordinator may retry these.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub infra_failure: bool,
}

impl EvalResult {
    /// Correct and timed, with no hacking detected.
    pub fn is_rewardable(&self) -> bool {
        self.status.is_pass() && !self.hacking.hacked && self.speedup_raw.is_some()
    }

    /// Synthesized result stored when the coordinator gives up on a task.
    pub fn infrastructure_failure(backend: &str, detail: impl Into<String>) -> Self {
        let detail = detail.into();
        let diagnostics = FailureDiagnostics {
            exception_type: "InfrastructureFailure".to_string(),
            traceback: detail.clone(),
        };
        let feedback_text = crate::worker::toolkits::render_failure(StatusKind::RuntimeError, &detail, &diagnostics);
        Self {
            status: CorrectnessStatus::failed(StatusKind::RuntimeError, detail),
            timing: None,
            speedup_raw: None,
            hacking: HackingVerdict {
                hacked: true,
                ..HackingVerdict::default()
            },
            profiling: ProfilingSummary {
                failure_diagnostics: Some(diagnostics),
                feedback_text,
                ..ProfilingSummary::default()
            },
            backend: backend.to_string(),
            wall_time_ms: 0.0,
            infra_failure: true,
        }
    }
}

/// Evaluation protocol knobs.
///
/// `rtol`, `atol` and `correctness_inputs` govern output comparison on real
/// backends; the simulated backend declares its correctness outcome directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub warmup_runs: u32,
    pub measured_runs: u32,
    pub correctness_inputs: u32,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            warmup_runs: 3,
            measured_runs: 10,
            correctness_inputs: 5,
            rtol: 1e-2,
            atol: 1e-3,
        }
    }
}

/// One unit of work: candidate code (or a simulated descriptor) with its
/// reference, plus the backend and protocol used to run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSpec {
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimulatedTaskSpec>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl CandidateSpec {
    pub fn simulated(sim: SimulatedTaskSpec) -> Self {
        Self {
            backend: SIM_BACKEND.to_string(),
            code: None,
            reference: None,
            sim: Some(sim),
            eval: EvalConfig::default(),
        }
    }

    /// Structural validation performed at submission time.
    pub fn validate(&self) -> Result<(), String> {
        if self.backend.trim().is_empty() {
            return Err("payload.backend must be a non-empty backend name".to_string());
        }
        if self.eval.measured_runs == 0 {
            return Err("payload.eval.measured_runs must be at least 1".to_string());
        }
        if self.backend == SIM_BACKEND {
            match &self.sim {
                Some(sim) => sim.validate().map_err(|e| format!("payload.sim: {e}"))?,
                None => return Err("the sim backend requires a payload.sim descriptor".to_string()),
            }
        } else if self.code.as_deref().is_none_or(|c| c.trim().is_empty()) && self.sim.is_none() {
            return Err(format!(
                "backend {:?} requires candidate code in payload.code",
                self.backend
            ));
        }
        Ok(())
    }
}
