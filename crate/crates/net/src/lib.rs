//! HTTP transport for the coordinator API. The axum server and the blocking
//! client are interchangeable with the in-process coordinator; a remote
//! generator rides on the same stack.
//!
//! | method | path                          | body / response                          |
//! |--------|-------------------------------|------------------------------------------|
//! | POST   | `/tasks`                      | `SubmitRequest` -> 201 `SubmitResponse`  |
//! | GET    | `/tasks/{id}`                 | `TaskSnapshot`                           |
//! | POST   | `/tasks/{id}/result`          | `ReportRequest` -> `ReportAck`           |
//! | POST   | `/workers/register`           | `RegisterRequest` -> `Registration`      |
//! | POST   | `/workers/{id}/heartbeat`     | `HeartbeatRequest` -> 204                |
//! | GET    | `/workers/{id}/next-task`     | `Assignment`, or 204 when nothing queued |
//! | GET    | `/health`                     | `{"status": "ok"}`                       |
//!
//! Errors carry `{"error": kind, "message": text}` with the status from
//! `ApiError::http_status`.

pub mod client;
pub mod generator;
pub mod server;

pub use client::HttpClient;
pub use generator::HttpGenerator;
pub use server::{router, serve, ServerHandle};
