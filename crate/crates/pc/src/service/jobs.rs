//! Asynchronous jobs: a queue drained by worker threads, an in-memory table
//! of records and an append-only JSONL event log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{PcError, PcResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Embed,
    Tune,
    Generate,
    Edit,
    Compose,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    fn can_move_to(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running) | (JobState::Running, JobState::Done | JobState::Failed)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub kind: JobKind,
    pub state: JobState,
    /// In `[0, 1]`, never decreasing.
    pub progress: f64,
    /// Artifact hash of the result JSON once done.
    pub result_ref: Option<String>,
    pub result: Option<Value>,
    pub error: Option<String>,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
}

/// One line of the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobEvent {
    pub seq: u64,
    pub job_id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: f64,
    pub at_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// What a job body returns: the result JSON, or an error message.
pub type JobOutcome = Result<Value, String>;

type Body = Box<dyn FnOnce(&Progress<'_>) -> JobOutcome + Send>;

/// Stores a finished job's result JSON and returns its artifact hash.
pub type ResultSink = Arc<dyn Fn(&Value) -> PcResult<String> + Send + Sync>;

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub struct JobBoard {
    jobs: Mutex<BTreeMap<String, JobRecord>>,
    log: Mutex<File>,
    seq: AtomicU64,
    queue: Mutex<Option<mpsc::Sender<(String, Body)>>>,
    sink: ResultSink,
}

/// Handle a running job uses to report progress.
pub struct Progress<'a> {
    board: &'a JobBoard,
    job_id: &'a str,
}

impl Progress<'_> {
    pub fn set(&self, fraction: f64) {
        self.board.set_progress(self.job_id, fraction);
    }
}

impl JobBoard {
    /// Opens the log for appending and starts `workers` threads.
    pub fn start(log_path: &Path, workers: usize, sink: ResultSink) -> PcResult<Arc<Self>> {
        if workers == 0 {
            return Err(PcError::Config("at least one worker is required".into()));
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .map_err(|e| PcError::io(log_path, e))?;
        let (tx, rx) = mpsc::channel::<(String, Body)>();
        let board = Arc::new(Self {
            jobs: Mutex::new(BTreeMap::new()),
            log: Mutex::new(log),
            seq: AtomicU64::new(0),
            queue: Mutex::new(Some(tx)),
            sink,
        });
        let rx = Arc::new(Mutex::new(rx));
        for i in 0..workers {
            let rx = Arc::clone(&rx);
            let board = Arc::downgrade(&board);
            std::thread::Builder::new()
                .name(format!("pc-worker-{i}"))
                .spawn(move || loop {
                    let next = rx.lock().unwrap_or_else(|p| p.into_inner()).recv();
                    let Ok((id, body)) = next else { break };
                    let Some(board) = board.upgrade() else { break };
                    board.run(&id, body);
                })
                .map_err(|e| PcError::io(log_path, e))?;
        }
        Ok(board)
    }

    /// Queues a job and returns its record in state `queued`.
    pub fn submit(
        &self,
        kind: JobKind,
        body: impl FnOnce(&Progress<'_>) -> JobOutcome + Send + 'static,
    ) -> PcResult<JobRecord> {
        let now = now_ms();
        let record = JobRecord {
            job_id: uuid::Uuid::new_v4().simple().to_string(),
            kind,
            state: JobState::Queued,
            progress: 0.0,
            result_ref: None,
            result: None,
            error: None,
            created_at_ms: now,
            updated_at_ms: now,
        };
        self.lock_jobs().insert(record.job_id.clone(), record.clone());
        self.log_event(&record);
        let queue = self.queue.lock().unwrap_or_else(|p| p.into_inner());
        let sent = queue
            .as_ref()
            .map(|tx| tx.send((record.job_id.clone(), Box::new(body))).is_ok())
            .unwrap_or(false);
        drop(queue);
        if !sent {
            self.finish(&record.job_id, Err("job queue is closed".into()));
            return Err(PcError::Config("job queue is closed".into()));
        }
        Ok(record)
    }

    pub fn get(&self, id: &str) -> Option<JobRecord> {
        self.lock_jobs().get(id).cloned()
    }

    /// Stops accepting jobs; workers exit once the queue drains.
    pub fn close(&self) {
        self.queue.lock().unwrap_or_else(|p| p.into_inner()).take();
    }

    fn lock_jobs(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, JobRecord>> {
        self.jobs.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn run(&self, id: &str, body: Body) {
        if !self.transition(id, JobState::Running, |_| {}) {
            return;
        }
        let progress = Progress { board: self, job_id: id };
        let outcome = catch_unwind(AssertUnwindSafe(|| body(&progress)))
            .unwrap_or_else(|_| Err("job panicked".into()));
        self.finish(id, outcome);
    }

    fn finish(&self, id: &str, outcome: JobOutcome) {
        match outcome.and_then(|v| (self.sink)(&v).map(|h| (v, h)).map_err(|e| e.to_string())) {
            Ok((value, hash)) => {
                self.transition(id, JobState::Done, |r| {
                    r.progress = 1.0;
                    r.result_ref = Some(hash);
                    r.result = Some(value);
                });
            }
            Err(message) => {
                self.transition(id, JobState::Failed, |r| r.error = Some(message));
            }
        }
    }

    fn transition(&self, id: &str, next: JobState, f: impl FnOnce(&mut JobRecord)) -> bool {
        let snapshot = {
            let mut jobs = self.lock_jobs();
            let Some(r) = jobs.get_mut(id) else { return false };
            if !r.state.can_move_to(next) {
                return false;
            }
            r.state = next;
            f(r);
            r.updated_at_ms = now_ms();
            r.clone()
        };
        self.log_event(&snapshot);
        true
    }

    fn set_progress(&self, id: &str, fraction: f64) {
        let snapshot = {
            let mut jobs = self.lock_jobs();
            let Some(r) = jobs.get_mut(id) else { return };
            let p = if fraction.is_nan() { 0.0 } else { fraction.clamp(0.0, 1.0) };
            if r.state != JobState::Running || p <= r.progress {
                return;
            }
            r.progress = p;
            r.updated_at_ms = now_ms();
            r.clone()
        };
        self.log_event(&snapshot);
    }

    fn log_event(&self, r: &JobRecord) {
        // The sequence number is taken under the log lock so lines are in
        // sequence order.
        let mut log = self.log.lock().unwrap_or_else(|p| p.into_inner());
        let event = JobEvent {
            seq: self.seq.fetch_add(1, Ordering::SeqCst),
            job_id: r.job_id.clone(),
            kind: r.kind,
            state: r.state,
            progress: r.progress,
            at_ms: r.updated_at_ms,
            error: r.error.clone(),
        };
        if let Ok(mut line) = serde_json::to_vec(&event) {
            line.push(b'\n');
            if let Err(e) = log.write_all(&line) {
                tracing::warn!("job log write failed: {e}");
            }
        }
    }
}

/// Parses a JSONL event log.
pub fn read_events(path: &Path) -> PcResult<Vec<JobEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| PcError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| PcError::json(path.display().to_string(), e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    fn wait(board: &JobBoard, id: &str) -> JobRecord {
        for _ in 0..500 {
            let r = board.get(id).unwrap();
            if r.state.is_terminal() {
                return r;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        panic!("job {id} did not finish");
    }

    #[test]
    fn jobs_run_and_log_monotone_progress() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("jobs.jsonl");
        let sink: ResultSink = Arc::new(|_| Ok("h".into()));
        let board = JobBoard::start(&log, 1, sink).unwrap();
        let ok = board
            .submit(JobKind::Generate, |p| {
                p.set(0.5);
                p.set(0.25);
                p.set(0.75);
                Ok(Value::from(3))
            })
            .unwrap();
        let bad = board.submit(JobKind::Edit, |_| Err("nope".into())).unwrap();
        let boom = board.submit(JobKind::Eval, |_| panic!("boom")).unwrap();
        let ok = wait(&board, &ok.job_id);
        assert_eq!((ok.state, ok.progress, ok.result_ref.as_deref()), (JobState::Done, 1.0, Some("h")));
        assert_eq!(wait(&board, &bad.job_id).error.as_deref(), Some("nope"));
        assert_eq!(wait(&board, &boom.job_id).state, JobState::Failed);

        let events = read_events(&log).unwrap();
        let mine: Vec<f64> = events.iter().filter(|e| e.job_id == ok.job_id).map(|e| e.progress).collect();
        assert_eq!(mine, [0.0, 0.0, 0.5, 0.75, 1.0]);
        assert!(events.windows(2).all(|w| w[0].seq < w[1].seq));
    }

    #[test]
    fn only_forward_transitions_are_allowed() {
        use JobState::*;
        assert!(Queued.can_move_to(Running));
        assert!(Running.can_move_to(Done) && Running.can_move_to(Failed));
        for (a, b) in [(Queued, Done), (Done, Running), (Failed, Done), (Running, Queued)] {
            assert!(!a.can_move_to(b));
        }
    }
}
