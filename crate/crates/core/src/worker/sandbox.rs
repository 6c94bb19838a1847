//! Isolated execution contexts for candidate code.
//!
//! [`ProcessSandbox`] spawns a fresh child process per evaluation: the
//! payload goes in on stdin as JSON and a [`SandboxReply`] comes back on
//! stdout. Any abnormal exit is reported as a crash and the parent keeps
//! serving. [`ThreadSandbox`] runs the backend on a dedicated thread and
//! treats a panic as a crash; it isolates only what unwinding isolates and
//! exists for tests and embedded runs.

use std::io::{Read, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::{mpsc, Arc, Once};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use super::backend::{Backend, ExecutionRecord};
use crate::eval::CandidateSpec;

const MAX_TRACEBACK_BYTES: usize = 8 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub enum SandboxOutcome {
    Finished(ExecutionRecord),
    /// The backend refused the payload without crashing.
    Rejected(String),
    Crashed {
        exception_type: String,
        traceback: String,
    },
    TimedOut {
        limit: Duration,
    },
}

pub trait Sandbox: Send + Sync {
    fn run(&self, payload: &CandidateSpec, wall_limit: Duration) -> SandboxOutcome;
}

/// What the sandbox child writes to stdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SandboxReply {
    Record(ExecutionRecord),
    Rejected(String),
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic with non-string payload".to_string()
    }
}

fn tail(text: &str) -> String {
    if text.len() <= MAX_TRACEBACK_BYTES {
        return text.to_string();
    }
    let mut start = text.len() - MAX_TRACEBACK_BYTES;
    while !text.is_char_boundary(start) {
        start += 1;
    }
    format!("...\n{}", &text[start..])
}

#[derive(Clone)]
pub struct ThreadSandbox {
    backend: Arc<dyn Backend>,
}

const SANDBOX_THREAD: &str = "sandbox";

/// Panics inside sandbox threads are expected and reported through the
/// result; keep them off stderr. Other threads use the previous hook.
fn quiet_sandbox_panics() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        let previous = std::panic::take_hook();
        std::panic::set_hook(Box::new(move |info| {
            if std::thread::current().name() != Some(SANDBOX_THREAD) {
                previous(info);
            }
        }));
    });
}

impl ThreadSandbox {
    pub fn new(backend: impl Backend + 'static) -> Self {
        quiet_sandbox_panics();
        Self {
            backend: Arc::new(backend),
        }
    }
}

impl Sandbox for ThreadSandbox {
    fn run(&self, payload: &CandidateSpec, wall_limit: Duration) -> SandboxOutcome {
        let (tx, rx) = mpsc::channel();
        let backend = Arc::clone(&self.backend);
        let payload = payload.clone();
        let spawned = std::thread::Builder::new().name(SANDBOX_THREAD.into()).spawn(move || {
            let out = catch_unwind(AssertUnwindSafe(|| backend.execute(&payload)));
            let _ = tx.send(out);
        });
        if let Err(e) = spawned {
            return SandboxOutcome::Crashed {
                exception_type: "SandboxSpawnError".into(),
                traceback: e.to_string(),
            };
        }
        // On timeout the thread is detached; it cannot be killed.
        match rx.recv_timeout(wall_limit) {
            Ok(Ok(Ok(record))) => SandboxOutcome::Finished(record),
            Ok(Ok(Err(e))) => SandboxOutcome::Rejected(e.to_string()),
            Ok(Err(panic)) => SandboxOutcome::Crashed {
                exception_type: "SandboxCrash".into(),
                traceback: panic_message(panic.as_ref()),
            },
            Err(mpsc::RecvTimeoutError::Timeout) => SandboxOutcome::TimedOut { limit: wall_limit },
            Err(mpsc::RecvTimeoutError::Disconnected) => SandboxOutcome::Crashed {
                exception_type: "SandboxCrash".into(),
                traceback: "sandbox thread exited without a result".into(),
            },
        }
    }
}

/// Runs `program args..` once per evaluation.
#[derive(Debug, Clone)]
pub struct ProcessSandbox {
    program: PathBuf,
    args: Vec<String>,
}

impl ProcessSandbox {
    pub fn new(program: impl Into<PathBuf>, args: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            program: program.into(),
            args: args.into_iter().map(Into::into).collect(),
        }
    }
}

impl Sandbox for ProcessSandbox {
    fn run(&self, payload: &CandidateSpec, wall_limit: Duration) -> SandboxOutcome {
        let crashed = |exception_type: &str, traceback: String| SandboxOutcome::Crashed {
            exception_type: exception_type.to_string(),
            traceback: tail(&traceback),
        };
        let input = match serde_json::to_vec(payload) {
            Ok(v) => v,
            Err(e) => return SandboxOutcome::Rejected(format!("payload encoding: {e}")),
        };
        let mut child = match Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .env_remove("RUST_BACKTRACE")
            .spawn()
        {
            Ok(c) => c,
            Err(e) => return crashed("SandboxSpawnError", format!("{}: {e}", self.program.display())),
        };
        let mut stdin = child.stdin.take().expect("piped");
        let mut stdout = child.stdout.take().expect("piped");
        let mut stderr = child.stderr.take().expect("piped");
        let writer = std::thread::spawn(move || {
            let _ = stdin.write_all(&input);
        });
        let out_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stdout.read_to_end(&mut buf);
            buf
        });
        let err_reader = std::thread::spawn(move || {
            let mut buf = String::new();
            let _ = stderr.read_to_string(&mut buf);
            buf
        });
        let status = match child.wait_timeout(wall_limit) {
            Ok(Some(status)) => status,
            Ok(None) => {
                let _ = child.kill();
                let _ = child.wait();
                let _ = writer.join();
                let _ = out_reader.join();
                let _ = err_reader.join();
                return SandboxOutcome::TimedOut { limit: wall_limit };
            }
            Err(e) => return crashed("SandboxWaitError", e.to_string()),
        };
        let _ = writer.join();
        let stdout = out_reader.join().unwrap_or_default();
        let stderr = err_reader.join().unwrap_or_default();
        if !status.success() {
            return crashed(
                "SandboxCrash",
                format!("sandbox process exited with {status}\n{stderr}"),
            );
        }
        match serde_json::from_slice::<SandboxReply>(&stdout) {
            Ok(SandboxReply::Record(r)) => SandboxOutcome::Finished(r),
            Ok(SandboxReply::Rejected(m)) => SandboxOutcome::Rejected(m),
            Err(e) => crashed(
                "SandboxProtocolError",
                format!("unreadable sandbox reply: {e}\n{stderr}"),
            ),
        }
    }
}

/// Entry point for the sandbox child: payload JSON on `input`, one
/// [`SandboxReply`] on `output`. Crashes in the backend propagate and kill
/// the process, which is the point.
pub fn sandbox_child_main(backend: &dyn Backend, mut input: impl Read, mut output: impl Write) -> std::io::Result<()> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let reply = match serde_json::from_slice::<CandidateSpec>(&buf) {
        Ok(payload) => match backend.execute(&payload) {
            Ok(record) => SandboxReply::Record(record),
            Err(e) => SandboxReply::Rejected(e.to_string()),
        },
        Err(e) => SandboxReply::Rejected(format!("payload decoding: {e}")),
    };
    serde_json::to_writer(&mut output, &reply)?;
    output.flush()
}
