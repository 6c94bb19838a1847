//! Deterministic simulated backend (`sim/v1`).
//!
//! A [`SimulatedTaskSpec`] declares everything a real backend would measure,
//! from the correctness outcome and runtimes down to which kernels ran in
//! train or eval mode and how device time splits between them. Execution
//! is a pure function of the descriptor, so every toolkit can be tested
//! without a GPU.
//!
//! JSON schema (`"schema": "sim/v1"`; all fields except the runtimes are
//! optional):
//!
//! ```json
//! {
//!   "schema": "sim/v1",
//!   "declared_status": "pass",
//!   "detail": null,
//!   "reference_ms": 10.0,
//!   "candidate_ms": 5.0,
//!   "jitter": 0.0,
//!   "seed": 0,
//!   "kernels_train": ["fused_kernel"],
//!   "kernels_eval": ["fused_kernel"],
//!   "profile": [{"name": "fused_kernel", "share": 0.8, "generated": true},
//!               {"name": "aten::conv2d", "share": 0.2, "generated": false}],
//!   "crash": false,
//!   "hang_ms": null
//! }
//! ```
//!
//! Run-to-run jitter: each sample is `base * (1 + jitter * (2u - 1))` with
//! `u` in `[0, 1)` drawn from SplitMix64 seeded with `seed`, consuming
//! reference warmup, reference measured, candidate warmup, candidate measured
//! samples in that order. `u = (next_u64 >> 11) * 2^-53`.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::backend::{Backend, BackendError, ExecutionRecord, KernelTiming};
use crate::eval::{CandidateSpec, FailureDiagnostics, StatusKind, SIM_BACKEND};

pub const SIM_SCHEMA: &str = "sim/v1";

fn sim_schema() -> String {
    SIM_SCHEMA.to_string()
}

fn pass() -> StatusKind {
    StatusKind::Pass
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimKernelShare {
    pub name: String,
    /// Fraction of total device time spent in this kernel.
    pub share: f64,
    #[serde(default)]
    pub generated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedTaskSpec {
    #[serde(default = "sim_schema")]
    pub schema: String,
    #[serde(default = "pass")]
    pub declared_status: StatusKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub reference_ms: f64,
    pub candidate_ms: f64,
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub kernels_train: Vec<String>,
    #[serde(default)]
    pub kernels_eval: Vec<String>,
    #[serde(default)]
    pub profile: Vec<SimKernelShare>,
    #[serde(default)]
    pub crash: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hang_ms: Option<u64>,
}

impl SimulatedTaskSpec {
    /// A correct candidate with one generated kernel that runs in both modes
    /// and accounts for all device time.
    pub fn passing(reference_ms: f64, candidate_ms: f64) -> Self {
        let kernel = "candidate_kernel".to_string();
        Self {
            schema: sim_schema(),
            declared_status: StatusKind::Pass,
            detail: None,
            reference_ms,
            candidate_ms,
            jitter: 0.0,
            seed: 0,
            kernels_train: vec![kernel.clone()],
            kernels_eval: vec![kernel.clone()],
            profile: vec![SimKernelShare {
                name: kernel,
                share: 1.0,
                generated: true,
            }],
            crash: false,
            hang_ms: None,
        }
    }

    pub fn failing(status: StatusKind, detail: impl Into<String>) -> Self {
        Self {
            declared_status: status,
            detail: Some(detail.into()),
            kernels_train: Vec::new(),
            kernels_eval: Vec::new(),
            profile: Vec::new(),
            ..Self::passing(1.0, 1.0)
        }
    }

    pub fn with_kernels(mut self, train: &[&str], eval: &[&str]) -> Self {
        self.kernels_train = train.iter().map(|s| s.to_string()).collect();
        self.kernels_eval = eval.iter().map(|s| s.to_string()).collect();
        self
    }

    /// `(name, share, generated)` triples.
    pub fn with_profile(mut self, entries: &[(&str, f64, bool)]) -> Self {
        self.profile = entries
            .iter()
            .map(|(name, share, generated)| SimKernelShare {
                name: name.to_string(),
                share: *share,
                generated: *generated,
            })
            .collect();
        self
    }

    pub fn with_jitter(mut self, jitter: f64, seed: u64) -> Self {
        self.jitter = jitter;
        self.seed = seed;
        self
    }

    pub fn with_crash(mut self) -> Self {
        self.crash = true;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.schema != SIM_SCHEMA {
            return Err(format!("unsupported schema {:?}, expected {SIM_SCHEMA:?}", self.schema));
        }
        for (name, v) in [("reference_ms", self.reference_ms), ("candidate_ms", self.candidate_ms)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(format!("jitter must lie in [0, 1), got {}", self.jitter));
        }
        let mut total = 0.0;
        for k in &self.profile {
            if !(0.0..=1.0).contains(&k.share) {
                return Err(format!("share of {} must lie in [0, 1], got {}", k.name, k.share));
            }
            total += k.share;
        }
        if total > 1.0 + 1e-6 {
            return Err(format!("kernel shares sum to {total}, which exceeds 1"));
        }
        Ok(())
    }
}

/// SplitMix64; small enough to re-implement bit-exactly in any language.
#[derive(Debug, Clone)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

fn draw(rng: &mut SplitMix64, base: f64, jitter: f64, n: u32) -> Vec<f64> {
    (0..n)
        .map(|_| base * (1.0 + jitter * (2.0 * rng.next_f64() - 1.0)))
        .collect()
}

/// Executes [`SimulatedTaskSpec`]s. A crash directive panics, which the
/// sandbox observes as the death of the execution context.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimBackend;

impl SimBackend {
    pub fn simulate(spec: &SimulatedTaskSpec, warmup: u32, measured: u32) -> ExecutionRecord {
        if let Some(ms) = spec.hang_ms {
            std::thread::sleep(Duration::from_millis(ms));
        }
        if spec.crash {
            panic!("simulated sandbox crash: an illegal memory access was encountered");
        }
        let status = spec.declared_status;
        let diagnostics = (status != StatusKind::Pass).then(|| FailureDiagnostics {
            exception_type: status.exception_type().to_string(),
            traceback: spec
                .detail
                .clone()
                .unwrap_or_else(|| format!("candidate reported {status}")),
        });
        let mut record = ExecutionRecord {
            status,
            detail: spec.detail.clone(),
            diagnostics,
            kernels_train: spec.kernels_train.clone(),
            kernels_eval: spec.kernels_eval.clone(),
            warmup_runs: warmup,
            reference_runs_ms: Vec::new(),
            kernel_runs_ms: Vec::new(),
            kernel_profile: Vec::new(),
            device_total_ms: 0.0,
            wall_time_ms: 0.0,
        };
        if status == StatusKind::Pass {
            let mut rng = SplitMix64::new(spec.seed);
            let mut reference = draw(&mut rng, spec.reference_ms, spec.jitter, warmup);
            reference.extend(draw(&mut rng, spec.reference_ms, spec.jitter, measured));
            let mut kernel = draw(&mut rng, spec.candidate_ms, spec.jitter, warmup);
            kernel.extend(draw(&mut rng, spec.candidate_ms, spec.jitter, measured));
            let measured_kernel = &kernel[warmup as usize..];
            let total = measured_kernel.iter().sum::<f64>() / measured_kernel.len() as f64;
            record.kernel_profile = spec
                .profile
                .iter()
                .map(|k| KernelTiming {
                    name: k.name.clone(),
                    cuda_time_ms: k.share * total,
                    generated: k.generated,
                })
                .collect();
            record.device_total_ms = total;
            record.wall_time_ms = reference.iter().sum::<f64>() + kernel.iter().sum::<f64>();
            record.reference_runs_ms = reference;
            record.kernel_runs_ms = kernel;
        }
        record
    }
}

impl Backend for SimBackend {
    fn name(&self) -> &str {
        SIM_BACKEND
    }

    fn execute(&self, payload: &CandidateSpec) -> Result<ExecutionRecord, BackendError> {
        let spec = payload
            .sim
            .as_ref()
            .ok_or_else(|| BackendError::Invalid("missing sim descriptor".into()))?;
        spec.validate().map_err(BackendError::Invalid)?;
        Ok(Self::simulate(
            spec,
            payload.eval.warmup_runs,
            payload.eval.measured_runs,
        ))
    }
}
