//! Blocking HTTP client implementing [`CoordinatorApi`].

use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;

use kgrid_core::api::{
    ApiError, Assignment, CoordinatorApi, ErrorBody, HeartbeatRequest, RegisterRequest, Registration, ReportAck,
    ReportRequest, SubmitRequest, SubmitResponse, TaskSnapshot,
};
use kgrid_core::eval::EvalResult;

#[derive(Debug, Clone)]
pub struct HttpClient {
    base: String,
    http: Client,
}

impl HttpClient {
    pub fn new(base_url: &str) -> Result<Self, ApiError> {
        Self::with_timeout(base_url, Duration::from_secs(30))
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Result<Self, ApiError> {
        let http = Client::builder()
            .timeout(timeout)
            .connect_timeout(timeout.min(Duration::from_secs(5)))
            .build()
            .map_err(|e| ApiError::Protocol(format!("building HTTP client: {e}")))?;
        Ok(Self {
            base: base_url.trim_end_matches('/').to_string(),
            http,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send(&self, req: RequestBuilder) -> Result<Response, ApiError> {
        let resp = req.send().map_err(transport_error)?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let text = resp.text().unwrap_or_default();
        Err(match serde_json::from_str::<ErrorBody>(&text) {
            Ok(body) => ApiError::from_body(body),
            Err(_) if status == StatusCode::SERVICE_UNAVAILABLE => ApiError::Unreachable(format!("{status}: {text}")),
            Err(_) => ApiError::Protocol(format!("unexpected {status}: {text}")),
        })
    }

    fn decode<T: DeserializeOwned>(resp: Response) -> Result<T, ApiError> {
        let bytes = resp.bytes().map_err(transport_error)?;
        serde_json::from_slice(&bytes).map_err(|e| ApiError::Protocol(format!("malformed response: {e}")))
    }
}

fn transport_error(e: reqwest::Error) -> ApiError {
    if e.is_connect() || e.is_timeout() || e.is_request() {
        ApiError::Unreachable(e.to_string())
    } else {
        ApiError::Protocol(e.to_string())
    }
}

fn segment(id: &str) -> Result<&str, ApiError> {
    if id.is_empty() || !id.bytes().all(|b| b.is_ascii_alphanumeric() || b"-_.".contains(&b)) {
        return Err(ApiError::Validation(format!(
            "id {id:?} must be non-empty [A-Za-z0-9._-]"
        )));
    }
    Ok(id)
}

impl CoordinatorApi for HttpClient {
    fn submit(&self, request: SubmitRequest) -> Result<String, ApiError> {
        let resp = self.send(self.http.post(self.url("/tasks")).json(&request))?;
        Ok(Self::decode::<SubmitResponse>(resp)?.task_id)
    }

    fn query(&self, task_id: &str) -> Result<TaskSnapshot, ApiError> {
        let resp = self.send(self.http.get(self.url(&format!("/tasks/{}", segment(task_id)?))))?;
        Self::decode(resp)
    }

    fn register(&self, worker_id: &str, capabilities: &[String]) -> Result<Registration, ApiError> {
        let body = RegisterRequest {
            worker_id: segment(worker_id)?.to_string(),
            capabilities: capabilities.to_vec(),
        };
        let resp = self.send(self.http.post(self.url("/workers/register")).json(&body))?;
        Self::decode(resp)
    }

    fn heartbeat(&self, worker_id: &str, task_id: Option<&str>) -> Result<(), ApiError> {
        let body = HeartbeatRequest {
            task_id: task_id.map(str::to_string),
        };
        let path = format!("/workers/{}/heartbeat", segment(worker_id)?);
        self.send(self.http.post(self.url(&path)).json(&body))?;
        Ok(())
    }

    fn next_task(&self, worker_id: &str) -> Result<Option<Assignment>, ApiError> {
        let path = format!("/workers/{}/next-task", segment(worker_id)?);
        let resp = self.send(self.http.get(self.url(&path)))?;
        if resp.status() == StatusCode::NO_CONTENT {
            return Ok(None);
        }
        Self::decode(resp).map(Some)
    }

    fn report(&self, worker_id: &str, task_id: &str, result: EvalResult) -> Result<ReportAck, ApiError> {
        let body = ReportRequest {
            worker_id: worker_id.to_string(),
            result,
        };
        let path = format!("/tasks/{}/result", segment(task_id)?);
        let resp = self.send(self.http.post(self.url(&path)).json(&body))?;
        Self::decode(resp)
    }
}
