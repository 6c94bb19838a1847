//! HTTP JSON front end for a [`Coordinator`].

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;

use kgrid_core::api::{ApiError, HeartbeatRequest, RegisterRequest, ReportRequest, SubmitRequest, SubmitResponse};
use kgrid_core::coordinator::Coordinator;

type Shared = Arc<Coordinator>;

struct Failure(ApiError);

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0.to_body())).into_response()
    }
}

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        Failure(e)
    }
}

// Bodies are parsed by hand so malformed input gets the same error shape as
// every other failure.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, Failure> {
    serde_json::from_slice(body).map_err(|e| Failure(ApiError::Validation(format!("malformed request body: {e}"))))
}

/// Runs a coordinator call off the async executor; store writes may block.
async fn call<T, F>(c: &Shared, f: F) -> Result<T, Failure>
where
    T: Send + 'static,
    F: FnOnce(&Coordinator) -> Result<T, ApiError> + Send + 'static,
{
    let c = Arc::clone(c);
    tokio::task::spawn_blocking(move || f(&c))
        .await
        .map_err(|e| Failure(ApiError::Protocol(format!("handler panicked: {e}"))))?
        .map_err(Failure)
}

fn json<T: Serialize>(status: StatusCode, value: T) -> Response {
    (status, Json(value)).into_response()
}

async fn submit(State(c): State<Shared>, body: Bytes) -> Result<Response, Failure> {
    let req: SubmitRequest = parse(&body)?;
    let task_id = call(&c, move |c| c.submit_task(req.payload, req.deadline_s)).await?;
    Ok(json(StatusCode::CREATED, SubmitResponse { task_id }))
}

async fn query(State(c): State<Shared>, Path(id): Path<String>) -> Result<Response, Failure> {
    let snap = call(&c, move |c| c.query_task(&id)).await?;
    Ok(json(StatusCode::OK, snap))
}

async fn register(State(c): State<Shared>, body: Bytes) -> Result<Response, Failure> {
    let req: RegisterRequest = parse(&body)?;
    let reg = call(&c, move |c| c.register_worker(&req.worker_id, &req.capabilities)).await?;
    Ok(json(StatusCode::OK, reg))
}

async fn heartbeat(State(c): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Response, Failure> {
    let req: HeartbeatRequest = if body.is_empty() {
        HeartbeatRequest::default()
    } else {
        parse(&body)?
    };
    call(&c, move |c| c.heartbeat(&id, req.task_id.as_deref())).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn next_task(State(c): State<Shared>, Path(id): Path<String>) -> Result<Response, Failure> {
    match call(&c, move |c| c.next_task(&id)).await? {
        Some(a) => Ok(json(StatusCode::OK, a)),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

async fn report(State(c): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Response, Failure> {
    let req: ReportRequest = parse(&body)?;
    let ack = call(&c, move |c| c.report_result(&req.worker_id, &id, req.result)).await?;
    Ok(json(StatusCode::OK, ack))
}

async fn health() -> Response {
    json(StatusCode::OK, serde_json::json!({"status": "ok"}))
}

pub fn router(coordinator: Arc<Coordinator>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/tasks", post(submit))
        .route("/tasks/{id}", get(query))
        .route("/tasks/{id}/result", post(report))
        .route("/workers/register", post(register))
        .route("/workers/{id}/heartbeat", post(heartbeat))
        .route("/workers/{id}/next-task", get(next_task))
        .with_state(coordinator)
}

/// Serves until `shutdown` resolves, sweeping for timeouts and dead workers
/// every `sweep_period`.
pub async fn serve(
    listener: tokio::net::TcpListener,
    coordinator: Arc<Coordinator>,
    sweep_period: Duration,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let sweeper = {
        let c = Arc::clone(&coordinator);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(sweep_period);
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                tick.tick().await;
                let c = Arc::clone(&c);
                if let Ok(report) = tokio::task::spawn_blocking(move || c.sweep()).await {
                    if !report.is_empty() {
                        log::info!(
                            "sweep: requeued {:?} failed {:?} dead {:?}",
                            report.requeued,
                            report.failed,
                            report.dead_workers
                        );
                    }
                }
            }
        })
    };
    let result = axum::serve(listener, router(coordinator))
        .with_graceful_shutdown(shutdown)
        .await;
    sweeper.abort();
    result
}

/// A server on a background thread with its own runtime.
pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn spawn(bind: &str, coordinator: Arc<Coordinator>, sweep_period: Duration) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(bind))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::Builder::new().name("kgrid-http".into()).spawn(move || {
            runtime.block_on(serve(listener, coordinator, sweep_period, async {
                let _ = rx.await;
            }))
        })?;
        Ok(Self {
            addr,
            stop: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop_now()
    }

    fn stop_now(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_now();
    }
}
