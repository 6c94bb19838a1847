//! The four evaluation toolkits: correctness, hacking check, timing/speedup
//! and profiling.
//!
//! Feedback text template (stable; consumed by the refinement loop):
//!
//! ```text
//! status: pass
//! hacking_check: ok (train: k1, k2; eval: k1, k2)
//! profiling: generated kernels account for 80.000% of device time (4.0000 ms of 5.0000 ms)
//! kernels:
//!   - k1 [generated] 4.0000 ms (80.000%)
//!   - aten::conv2d 1.0000 ms (20.000%)
//! ```
//!
//! and for incorrect candidates:
//!
//! ```text
//! status: runtime_error
//! error: <detail>
//! exception: <exception type>
//! traceback:
//! <traceback text>
//! ```

use std::fmt::Write as _;

use thiserror::Error;

use super::backend::ExecutionRecord;
use crate::eval::{
    CorrectnessStatus, FailureDiagnostics, HackingVerdict, ProfileEntry, ProfilingSummary, RunSamples, StatusKind,
    TimingReport,
};

/// Marker placed at the start of the detail of a candidate whose status was
/// forced to `mismatch` by the hacking check.
pub const HACKING_MARKER: &str = "hacking";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeasureError {
    #[error("non-positive runtime: reference {reference} ms, kernel {kernel} ms")]
    NonPositive { reference: f64, kernel: f64 },
    #[error("no measured samples")]
    NoSamples,
}

pub fn correctness(record: &ExecutionRecord) -> CorrectnessStatus {
    match record.status {
        StatusKind::Pass => CorrectnessStatus::pass(),
        s => CorrectnessStatus::failed(s, record.detail.clone().unwrap_or_default()),
    }
}

/// A candidate is hacked when no generated kernel executes in train mode or
/// none executes in eval mode.
pub fn hacking_check(train: &[String], eval: &[String]) -> HackingVerdict {
    HackingVerdict {
        kernels_executed_train: train.to_vec(),
        kernels_executed_eval: eval.to_vec(),
        hacked: train.is_empty() || eval.is_empty(),
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Splits warmup from measured samples and averages the measured ones.
pub fn timing(record: &ExecutionRecord) -> Result<TimingReport, MeasureError> {
    let w = record.warmup_runs as usize;
    if record.reference_runs_ms.len() <= w || record.kernel_runs_ms.len() <= w {
        return Err(MeasureError::NoSamples);
    }
    let (ref_warm, ref_meas) = record.reference_runs_ms.split_at(w);
    let (ker_warm, ker_meas) = record.kernel_runs_ms.split_at(w);
    let t_reference_ms = mean(ref_meas).ok_or(MeasureError::NoSamples)?;
    let t_kernel_ms = mean(ker_meas).ok_or(MeasureError::NoSamples)?;
    if !(t_reference_ms > 0.0 && t_kernel_ms > 0.0) {
        return Err(MeasureError::NonPositive {
            reference: t_reference_ms,
            kernel: t_kernel_ms,
        });
    }
    Ok(TimingReport {
        t_reference_ms,
        t_kernel_ms,
        warmup_runs: record.warmup_runs,
        measured_runs: ref_meas.len().min(ker_meas.len()) as u32,
        raw_samples_ms: RunSamples {
            reference: ref_meas.to_vec(),
            kernel: ker_meas.to_vec(),
        },
        warmup_samples_ms: RunSamples {
            reference: ref_warm.to_vec(),
            kernel: ker_warm.to_vec(),
        },
    })
}

/// Unclipped speedup `t_reference / t_kernel`.
pub fn measure_speedup(timing: &TimingReport) -> Result<f64, MeasureError> {
    let (r, k) = (timing.t_reference_ms, timing.t_kernel_ms);
    if !(r > 0.0 && k > 0.0 && r.is_finite() && k.is_finite()) {
        return Err(MeasureError::NonPositive {
            reference: r,
            kernel: k,
        });
    }
    Ok(r / k)
}

fn pct(x: f64) -> String {
    format!("{:.3}%", x * 100.0)
}

fn list(names: &[String]) -> String {
    if names.is_empty() {
        "none".to_string()
    } else {
        names.join(", ")
    }
}

pub fn render_failure(status: StatusKind, detail: &str, diagnostics: &FailureDiagnostics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "status: {status}");
    let _ = writeln!(s, "error: {detail}");
    let _ = writeln!(s, "exception: {}", diagnostics.exception_type);
    let _ = writeln!(s, "traceback:");
    let _ = write!(s, "{}", diagnostics.traceback);
    s
}

/// Kernel-level summary for correct candidates; failure diagnostics for
/// everything else.
pub fn profile(record: &ExecutionRecord, status: &CorrectnessStatus, hacking: &HackingVerdict) -> ProfilingSummary {
    if !status.is_pass() {
        let detail = status.detail.clone().unwrap_or_else(|| status.status.to_string());
        let diagnostics = if detail.starts_with(HACKING_MARKER) {
            FailureDiagnostics {
                exception_type: "RewardHacking".to_string(),
                traceback: format!(
                    "kernels executed (train): {}\nkernels executed (eval): {}",
                    list(&hacking.kernels_executed_train),
                    list(&hacking.kernels_executed_eval)
                ),
            }
        } else {
            record.diagnostics.clone().unwrap_or_else(|| FailureDiagnostics {
                exception_type: status.status.exception_type().to_string(),
                traceback: detail.clone(),
            })
        };
        let feedback_text = render_failure(status.status, &detail, &diagnostics);
        return ProfilingSummary {
            failure_diagnostics: Some(diagnostics),
            feedback_text,
            ..ProfilingSummary::default()
        };
    }

    let t_total_ms = record.device_total_ms;
    let entries: Vec<ProfileEntry> = record
        .kernel_profile
        .iter()
        .map(|k| ProfileEntry {
            kernel_name: k.name.clone(),
            cuda_time_ms: k.cuda_time_ms,
            fraction_of_total: if t_total_ms > 0.0 {
                k.cuda_time_ms / t_total_ms
            } else {
                0.0
            },
            generated: k.generated,
        })
        .collect();
    let t_generated_ms: f64 = entries.iter().filter(|e| e.generated).map(|e| e.cuda_time_ms).sum();
    let pr_ratio = if t_total_ms > 0.0 {
        (t_generated_ms / t_total_ms).clamp(0.0, 1.0)
    } else {
        0.0
    };

    let mut text = String::new();
    let _ = writeln!(text, "status: pass");
    let _ = writeln!(
        text,
        "hacking_check: ok (train: {}; eval: {})",
        list(&hacking.kernels_executed_train),
        list(&hacking.kernels_executed_eval)
    );
    let _ = writeln!(
        text,
        "profiling: generated kernels account for {} of device time ({:.4} ms of {:.4} ms)",
        pct(pr_ratio),
        t_generated_ms,
        t_total_ms
    );
    let _ = write!(text, "kernels:");
    for e in &entries {
        let tag = if e.generated { " [generated]" } else { "" };
        let _ = write!(
            text,
            "\n  - {}{} {:.4} ms ({})",
            e.kernel_name,
            tag,
            e.cuda_time_ms,
            pct(e.fraction_of_total)
        );
    }

    ProfilingSummary {
        entries,
        t_generated_ms,
        t_total_ms,
        pr_ratio: Some(pr_ratio),
        failure_diagnostics: None,
        feedback_text: text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worker::backend::KernelTiming;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn record(kernels: Vec<KernelTiming>, total: f64) -> ExecutionRecord {
        ExecutionRecord {
            status: StatusKind::Pass,
            detail: None,
            diagnostics: None,
            kernels_train: s(&["k"]),
            kernels_eval: s(&["k"]),
            warmup_runs: 2,
            reference_runs_ms: vec![100.0, 90.0, 10.0, 10.0, 10.0],
            kernel_runs_ms: vec![50.0, 40.0, 4.0, 5.0, 6.0],
            kernel_profile: kernels,
            device_total_ms: total,
            wall_time_ms: 0.0,
        }
    }

    #[test]
    fn hacking_check_fixtures() {
        assert!(!hacking_check(&s(&["k1"]), &s(&["k1"])).hacked);
        assert!(hacking_check(&s(&["k1"]), &[]).hacked);
        assert!(hacking_check(&[], &s(&["k1"])).hacked);
        assert!(hacking_check(&[], &[]).hacked);
    }

    #[test]
    fn measure_speedup_fixtures() {
        let mut t = timing(&record(vec![], 5.0)).unwrap();
        t.t_reference_ms = 10.0;
        t.t_kernel_ms = 2.0;
        assert_eq!(measure_speedup(&t).unwrap(), 5.0);
        t.t_kernel_ms = 10.0;
        assert_eq!(measure_speedup(&t).unwrap(), 1.0);
        t.t_kernel_ms = 0.0;
        assert!(measure_speedup(&t).is_err());
    }

    #[test]
    fn warmup_samples_are_excluded_from_means() {
        let t = timing(&record(vec![], 5.0)).unwrap();
        assert_eq!(t.t_reference_ms, 10.0);
        assert_eq!(t.t_kernel_ms, 5.0);
        assert_eq!(t.warmup_samples_ms.reference, vec![100.0, 90.0]);
        assert_eq!(t.raw_samples_ms.kernel, vec![4.0, 5.0, 6.0]);
        assert_eq!(t.measured_runs, 3);
    }

    #[test]
    fn profiling_sums_generated_kernels() {
        let rec = record(
            vec![
                KernelTiming {
                    name: "a".into(),
                    cuda_time_ms: 2.0,
                    generated: true,
                },
                KernelTiming {
                    name: "b".into(),
                    cuda_time_ms: 1.0,
                    generated: true,
                },
                KernelTiming {
                    name: "aten::conv2d".into(),
                    cuda_time_ms: 1.5,
                    generated: false,
                },
            ],
            5.0,
        );
        let p = profile(&rec, &CorrectnessStatus::pass(), &hacking_check(&s(&["a"]), &s(&["a"])));
        assert_eq!(p.t_generated_ms, 3.0);
        assert!((p.pr_ratio.unwrap() - 0.6).abs() < 1e-12);
        let frac: f64 = p.entries.iter().map(|e| e.fraction_of_total).sum();
        assert!(frac <= 1.0 + 1e-6);
        assert!(p.feedback_text.contains("60.000% of device time"));
        assert!(p.failure_diagnostics.is_none());
    }

    #[test]
    fn failing_candidate_gets_diagnostics_not_ratio() {
        let mut rec = record(vec![], 0.0);
        rec.status = StatusKind::RuntimeError;
        rec.detail = Some("CUDA error: an illegal memory access".into());
        let status = correctness(&rec);
        let p = profile(&rec, &status, &hacking_check(&[], &[]));
        assert!(p.pr_ratio.is_none());
        let d = p.failure_diagnostics.unwrap();
        assert_eq!(d.exception_type, "RuntimeError");
        assert!(p.feedback_text.starts_with("status: runtime_error\nerror: CUDA error"));
    }
}
