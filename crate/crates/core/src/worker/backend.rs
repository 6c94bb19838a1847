use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{CandidateSpec, FailureDiagnostics, StatusKind};

/// Raw measurements from one execution, before the toolkits interpret them.
/// Every backend (including out-of-process adapters) produces this shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub status: StatusKind,
    #[serde(default)]
    pub detail: Option<String>,
    #[serde(default)]
    pub diagnostics: Option<FailureDiagnostics>,
    pub kernels_train: Vec<String>,
    pub kernels_eval: Vec<String>,
    /// Number of leading samples in each run list that are warmup.
    pub warmup_runs: u32,
    pub reference_runs_ms: Vec<f64>,
    pub kernel_runs_ms: Vec<f64>,
    pub kernel_profile: Vec<KernelTiming>,
    pub device_total_ms: f64,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTiming {
    pub name: String,
    pub cuda_time_ms: f64,
    pub generated: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend {0:?} is not available on this worker")]
    Unsupported(String),
    #[error("invalid payload: {0}")]
    Invalid(String),
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn execute(&self, payload: &CandidateSpec) -> Result<ExecutionRecord, BackendError>;
}

/// Dispatches to the backend named in the payload.
#[derive(Default, Clone)]
pub struct BackendSet {
    backends: Vec<std::sync::Arc<dyn Backend>>,
}

impl BackendSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, backend: impl Backend + 'static) -> Self {
        self.backends.push(std::sync::Arc::new(backend));
        self
    }

    pub fn names(&self) -> Vec<String> {
        self.backends.iter().map(|b| b.name().to_string()).collect()
    }

    pub fn supports(&self, name: &str) -> bool {
        self.backends.iter().any(|b| b.name() == name)
    }
}

impl Backend for BackendSet {
    fn name(&self) -> &str {
        "set"
    }

    fn execute(&self, payload: &CandidateSpec) -> Result<ExecutionRecord, BackendError> {
        self.backends
            .iter()
            .find(|b| b.name() == payload.backend)
            .ok_or_else(|| BackendError::Unsupported(payload.backend.clone()))?
            .execute(payload)
    }
}
