//! Coordinator API surface shared by the in-process coordinator, the HTTP
//! server and the HTTP client.
//!
//! Routes (JSON bodies, snake_case fields):
//!
//! | method | path                          | request             | response            |
//! |--------|-------------------------------|---------------------|---------------------|
//! | POST   | `/tasks`                      | [`SubmitRequest`]   | [`SubmitResponse`]  |
//! | GET    | `/tasks/{id}`                 |                     | [`TaskSnapshot`]    |
//! | POST   | `/workers/register`           | [`RegisterRequest`] | [`Registration`]    |
//! | POST   | `/workers/{id}/heartbeat`     | [`HeartbeatRequest`]| `{"ok": true}`      |
//! | GET    | `/workers/{id}/next-task`     |                     | [`Assignment`] / 204|
//! | POST   | `/tasks/{id}/result`          | [`ReportRequest`]   | [`ReportAck`]       |
//!
//! Errors are returned as [`ErrorBody`] with the status code given by
//! [`ApiError::http_status`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::TaskState;
use crate::eval::{CandidateSpec, EvalResult};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApiError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("unknown or dead worker: {0}")]
    Unauthorized(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("stale report rejected: {0}")]
    Stale(String),
    /// Persistence failed; the caller may retry.
    #[error("storage failure (retriable): {0}")]
    Storage(String),
    #[error("coordinator unreachable: {0}")]
    Unreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl ApiError {
    pub fn kind(&self) -> &'static str {
        match self {
            ApiError::Validation(_) => "validation",
            ApiError::NotFound(_) => "not_found",
            ApiError::Unauthorized(_) => "unauthorized",
            ApiError::Conflict(_) => "conflict",
            ApiError::Stale(_) => "stale",
            ApiError::Storage(_) => "storage",
            ApiError::Unreachable(_) => "unreachable",
            ApiError::Protocol(_) => "protocol",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            ApiError::Validation(_) => 400,
            ApiError::Unauthorized(_) => 401,
            ApiError::NotFound(_) => 404,
            ApiError::Conflict(_) | ApiError::Stale(_) => 409,
            ApiError::Protocol(_) => 500,
            ApiError::Storage(_) | ApiError::Unreachable(_) => 503,
        }
    }

    pub fn is_retriable(&self) -> bool {
        matches!(self, ApiError::Storage(_) | ApiError::Unreachable(_))
    }

    pub fn to_body(&self) -> ErrorBody {
        let message = match self {
            ApiError::Validation(m)
            | ApiError::NotFound(m)
            | ApiError::Unauthorized(m)
            | ApiError::Conflict(m)
            | ApiError::Stale(m)
            | ApiError::Storage(m)
            | ApiError::Unreachable(m)
            | ApiError::Protocol(m) => m.clone(),
        };
        ErrorBody {
            error: self.kind().to_string(),
            message,
        }
    }

    pub fn from_body(body: ErrorBody) -> Self {
        let m = body.message;
        match body.error.as_str() {
            "validation" => ApiError::Validation(m),
            "not_found" => ApiError::NotFound(m),
            "unauthorized" => ApiError::Unauthorized(m),
            "conflict" => ApiError::Conflict(m),
            "stale" => ApiError::Stale(m),
            "storage" => ApiError::Storage(m),
            "unreachable" => ApiError::Unreachable(m),
            _ => ApiError::Protocol(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub payload: CandidateSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub task_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub worker_id: String,
    pub capabilities: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub worker_id: String,
    /// True when a previously dead worker was brought back.
    pub revived: bool,
    /// Workers should heartbeat at least this often.
    pub liveness_timeout_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatRequest {
    /// The task the worker is currently executing, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub task_id: String,
    pub payload: CandidateSpec,
    pub deadline_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRequest {
    pub worker_id: String,
    pub result: EvalResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportOutcome {
    /// Stored as the task's terminal result.
    Completed,
    /// Infrastructure failure with attempts exhausted; stored as terminal.
    Failed,
    /// Infrastructure failure; the task was queued for another attempt.
    Requeued,
    /// The same worker already delivered the terminal result.
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportAck {
    pub task_id: String,
    pub outcome: ReportOutcome,
}

/// Point-in-time view of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSnapshot {
    pub task_id: String,
    pub state: TaskState,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assigned_worker: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<EvalResult>,
}

impl TaskSnapshot {
    pub fn is_terminal(&self) -> bool {
        self.state.is_terminal()
    }
}

/// Operations every coordinator transport implements.
pub trait CoordinatorApi: Send + Sync {
    fn submit(&self, request: SubmitRequest) -> Result<String, ApiError>;
    fn query(&self, task_id: &str) -> Result<TaskSnapshot, ApiError>;
    fn register(&self, worker_id: &str, capabilities: &[String]) -> Result<Registration, ApiError>;
    fn heartbeat(&self, worker_id: &str, task_id: Option<&str>) -> Result<(), ApiError>;
    fn next_task(&self, worker_id: &str) -> Result<Option<Assignment>, ApiError>;
    fn report(&self, worker_id: &str, task_id: &str, result: EvalResult) -> Result<ReportAck, ApiError>;
}

impl<T: CoordinatorApi + ?Sized> CoordinatorApi for std::sync::Arc<T> {
    fn submit(&self, request: SubmitRequest) -> Result<String, ApiError> {
        (**self).submit(request)
    }
    fn query(&self, task_id: &str) -> Result<TaskSnapshot, ApiError> {
        (**self).query(task_id)
    }
    fn register(&self, worker_id: &str, capabilities: &[String]) -> Result<Registration, ApiError> {
        (**self).register(worker_id, capabilities)
    }
    fn heartbeat(&self, worker_id: &str, task_id: Option<&str>) -> Result<(), ApiError> {
        (**self).heartbeat(worker_id, task_id)
    }
    fn next_task(&self, worker_id: &str) -> Result<Option<Assignment>, ApiError> {
        (**self).next_task(worker_id)
    }
    fn report(&self, worker_id: &str, task_id: &str, result: EvalResult) -> Result<ReportAck, ApiError> {
        (**self).report(worker_id, task_id, result)
    }
}
