//! Task persistence: a snapshot plus a write-ahead journal of task records.
//!
//! Every task mutation is journaled before it becomes visible. Loading
//! replays the journal over the latest snapshot; the last record written for
//! a task id wins.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use super::state::EvalTask;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt record: {0}")]
    Corrupt(#[from] serde_json::Error),
    #[error("injected failure")]
    Injected,
}

pub trait StateStore: Send + Sync {
    /// Journals the current version of a task.
    fn append(&self, task: &EvalTask) -> Result<(), StoreError>;
    /// Replaces the snapshot with `tasks` and truncates the journal.
    fn compact(&self, tasks: &[EvalTask]) -> Result<(), StoreError>;
    /// Snapshot with the journal replayed on top, ordered by task id.
    fn load(&self) -> Result<Vec<EvalTask>, StoreError>;
}

fn replay(snapshot: Vec<EvalTask>, journal: impl IntoIterator<Item = EvalTask>) -> Vec<EvalTask> {
    let mut by_id: BTreeMap<String, EvalTask> = snapshot.into_iter().map(|t| (t.task_id.clone(), t)).collect();
    for t in journal {
        by_id.insert(t.task_id.clone(), t);
    }
    by_id.into_values().collect()
}

/// Volatile store. Clones share contents, so a "restarted" coordinator in a
/// test can recover from what its predecessor wrote.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    inner: Arc<Mutex<MemoryInner>>,
    fail_next: Arc<AtomicUsize>,
}

#[derive(Debug, Default)]
struct MemoryInner {
    snapshot: Vec<EvalTask>,
    journal: Vec<EvalTask>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes the next `n` writes fail.
    pub fn fail_next_writes(&self, n: usize) {
        self.fail_next.store(n, Ordering::SeqCst);
    }

    pub fn journal_len(&self) -> usize {
        self.inner.lock().journal.len()
    }

    fn take_failure(&self) -> bool {
        self.fail_next
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
    }
}

impl StateStore for MemoryStore {
    fn append(&self, task: &EvalTask) -> Result<(), StoreError> {
        if self.take_failure() {
            return Err(StoreError::Injected);
        }
        self.inner.lock().journal.push(task.clone());
        Ok(())
    }

    fn compact(&self, tasks: &[EvalTask]) -> Result<(), StoreError> {
        if self.take_failure() {
            return Err(StoreError::Injected);
        }
        let mut inner = self.inner.lock();
        inner.snapshot = tasks.to_vec();
        inner.journal.clear();
        Ok(())
    }

    fn load(&self) -> Result<Vec<EvalTask>, StoreError> {
        let inner = self.inner.lock();
        Ok(replay(inner.snapshot.clone(), inner.journal.iter().cloned()))
    }
}

/// Directory-backed store: `snapshot.json` plus `journal.jsonl`.
#[derive(Debug)]
pub struct FileStore {
    dir: PathBuf,
    journal: Mutex<File>,
}

impl FileStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let journal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("journal.jsonl"))?;
        Ok(Self {
            dir,
            journal: Mutex::new(journal),
        })
    }

    fn snapshot_path(&self) -> PathBuf {
        self.dir.join("snapshot.json")
    }
}

impl StateStore for FileStore {
    fn append(&self, task: &EvalTask) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(task)?;
        line.push(b'\n');
        let mut f = self.journal.lock();
        f.write_all(&line)?;
        f.flush()?;
        Ok(())
    }

    fn compact(&self, tasks: &[EvalTask]) -> Result<(), StoreError> {
        let tmp = self.dir.join("snapshot.json.tmp");
        fs::write(&tmp, serde_json::to_vec(tasks)?)?;
        fs::rename(&tmp, self.snapshot_path())?;
        let mut f = self.journal.lock();
        *f = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(self.dir.join("journal.jsonl"))?;
        Ok(())
    }

    fn load(&self) -> Result<Vec<EvalTask>, StoreError> {
        let snapshot = match fs::read(self.snapshot_path()) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let reader = BufReader::new(File::open(self.dir.join("journal.jsonl"))?);
        let mut journal = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<EvalTask>(&line) {
                Ok(t) => journal.push(t),
                // A torn final line from a crash mid-write is dropped.
                Err(e) if e.is_eof() => break,
                Err(e) => return Err(e.into()),
            }
        }
        Ok(replay(snapshot, journal))
    }
}
