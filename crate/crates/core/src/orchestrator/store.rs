use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::job::{JobRecord, JobState, TransitionError};

pub const JOB_LOG: &str = "joblog.ndjson";
pub const SNAPSHOT: &str = "snapshot.json";

/// One line of the job log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobEvent {
    pub seq: u64,
    pub ts: String,
    pub job_id: String,
    pub event: String,
    pub detail: Value,
}

impl JobEvent {
    /// Lifecycle state entered by this event, if any.
    pub fn state(&self) -> Option<JobState> {
        match self.event.as_str() {
            "submitted" => Some(JobState::Submitted),
            "validated" => Some(JobState::Validated),
            "completed" => Some(JobState::Completed),
            "failed" => Some(JobState::Failed),
            "stage_started" => self
                .detail
                .get("stage")
                .and_then(Value::as_str)
                .and_then(JobState::parse),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("job store I/O at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("job {0} not found")]
    NotFound(String),
    #[error(transparent)]
    Transition(#[from] TransitionError),
}

#[derive(Serialize, Deserialize, Default)]
struct Snapshot {
    last_seq: u64,
    next_job: u64,
    jobs: BTreeMap<String, JobRecord>,
}

struct Inner {
    snapshot: Snapshot,
    events: Vec<JobEvent>,
    log: File,
}

/// Job records persisted as an append-only event log plus a snapshot.
pub struct JobStore {
    dir: PathBuf,
    inner: Mutex<Inner>,
    subscribers: Mutex<Vec<Sender<JobEvent>>>,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Checks every job's state sequence in `events` against the lifecycle.
pub fn audit_events(events: &[JobEvent]) -> Result<(), TransitionError> {
    let mut current: BTreeMap<&str, JobState> = BTreeMap::new();
    for e in events {
        let Some(next) = e.state() else { continue };
        match current.get(e.job_id.as_str()) {
            None if next == JobState::Submitted => {}
            None => {
                return Err(TransitionError {
                    job_id: e.job_id.clone(),
                    from: JobState::Submitted,
                    to: next,
                })
            }
            Some(&from) if !from.can_move_to(next) => {
                return Err(TransitionError {
                    job_id: e.job_id.clone(),
                    from,
                    to: next,
                })
            }
            Some(_) => {}
        }
        current.insert(&e.job_id, next);
    }
    Ok(())
}

impl JobStore {
    /// Opens the store, replaying log entries newer than the snapshot.
    /// Jobs caught mid-flight by a crash are marked failed; returns the ids
    /// of validated jobs that can be queued again.
    pub fn open(dir: &Path) -> Result<(Self, Vec<String>), StoreError> {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
        let snap_path = dir.join(SNAPSHOT);
        let mut snapshot: Snapshot = match fs::read(&snap_path) {
            Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_default(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Snapshot::default(),
            Err(e) => {
                return Err(StoreError::Io {
                    path: snap_path,
                    source: e,
                })
            }
        };
        let log_path = dir.join(JOB_LOG);
        let mut events = Vec::new();
        if log_path.exists() {
            let f = File::open(&log_path).map_err(io_at(&log_path))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(io_at(&log_path))?;
                if let Ok(ev) = serde_json::from_str::<JobEvent>(&line) {
                    events.push(ev);
                }
            }
        }
        let replay_from = snapshot.last_seq;
        for ev in events.iter().filter(|e| e.seq > replay_from) {
            if ev.event == "submitted" {
                if let Ok(rec) = serde_json::from_value::<JobRecord>(ev.detail.clone()) {
                    snapshot.jobs.entry(ev.job_id.clone()).or_insert(rec);
                }
            }
            if let (Some(state), Some(rec)) = (ev.state(), snapshot.jobs.get_mut(&ev.job_id)) {
                rec.state = state;
                rec.updated_at = ev.ts.clone();
                if state == JobState::Failed {
                    rec.failure_reason = ev
                        .detail
                        .get("reason")
                        .and_then(Value::as_str)
                        .map(str::to_string);
                }
            }
            snapshot.last_seq = ev.seq;
            if let Some(n) = ev
                .job_id
                .strip_prefix("j-")
                .and_then(|n| n.parse::<u64>().ok())
            {
                snapshot.next_job = snapshot.next_job.max(n);
            }
        }
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io_at(&log_path))?;
        if fs::read(&log_path)
            .map_err(io_at(&log_path))?
            .last()
            .is_some_and(|b| *b != b'\n')
        {
            log.write_all(b"\n").map_err(io_at(&log_path))?;
        }
        let store = JobStore {
            dir: dir.to_path_buf(),
            inner: Mutex::new(Inner {
                snapshot,
                events,
                log,
            }),
            subscribers: Mutex::new(Vec::new()),
        };

        let mut resumable = Vec::new();
        for rec in store.list() {
            match rec.state {
                JobState::Validated => resumable.push(rec.job_id),
                s if !s.is_terminal() => {
                    store.transition(
                        &rec.job_id,
                        JobState::Failed,
                        json!({ "reason": format!("interrupted by a platform restart while {s}") }),
                    )?;
                }
                _ => {}
            }
        }
        store.persist_snapshot()?;
        Ok((store, resumable))
    }

    fn persist_snapshot_locked(&self, inner: &Inner) -> Result<(), StoreError> {
        let path = self.dir.join(SNAPSHOT);
        let tmp = self.dir.join(format!("{SNAPSHOT}.tmp"));
        let bytes = serde_json::to_vec(&inner.snapshot).expect("snapshot serializes");
        fs::write(&tmp, bytes).map_err(io_at(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_at(&path))
    }

    fn persist_snapshot(&self) -> Result<(), StoreError> {
        let inner = self.inner.lock().expect("store lock");
        self.persist_snapshot_locked(&inner)
    }

    fn append_locked(
        &self,
        inner: &mut Inner,
        job_id: &str,
        event: &str,
        detail: Value,
    ) -> Result<JobEvent, StoreError> {
        let ev = JobEvent {
            seq: inner.snapshot.last_seq + 1,
            ts: now(),
            job_id: job_id.to_string(),
            event: event.to_string(),
            detail,
        };
        let mut line = serde_json::to_vec(&ev).expect("event serializes");
        line.push(b'\n');
        let log_path = self.dir.join(JOB_LOG);
        inner.log.write_all(&line).map_err(io_at(&log_path))?;
        inner.log.sync_data().map_err(io_at(&log_path))?;
        inner.snapshot.last_seq = ev.seq;
        inner.events.push(ev.clone());
        Ok(ev)
    }

    fn publish(&self, ev: &JobEvent) {
        let mut subs = self.subscribers.lock().expect("subscriber lock");
        subs.retain(|s| s.send(ev.clone()).is_ok());
    }

    /// Allocates the next job id and records the job as submitted.
    pub fn create(&self, build: impl FnOnce(String) -> JobRecord) -> Result<JobRecord, StoreError> {
        let mut inner = self.inner.lock().expect("store lock");
        inner.snapshot.next_job += 1;
        let job_id = format!("j-{:04}", inner.snapshot.next_job);
        let mut rec = build(job_id.clone());
        rec.job_id = job_id.clone();
        rec.state = JobState::Submitted;
        let detail = serde_json::to_value(&rec).expect("record serializes");
        let ev = self.append_locked(&mut inner, &job_id, "submitted", detail)?;
        inner.snapshot.jobs.insert(job_id, rec.clone());
        self.persist_snapshot_locked(&inner)?;
        drop(inner);
        self.publish(&ev);
        Ok(rec)
    }

    /// Moves a job along a lifecycle edge and logs the matching event.
    pub fn transition(
        &self,
        job_id: &str,
        to: JobState,
        detail: Value,
    ) -> Result<JobRecord, StoreError> {
        let mut inner = self.inner.lock().expect("store lock");
        let rec = inner
            .snapshot
            .jobs
            .get(job_id)
            .ok_or_else(|| StoreError::NotFound(job_id.to_string()))?;
        let from = rec.state;
        if !from.can_move_to(to) {
            return Err(TransitionError {
                job_id: job_id.to_string(),
                from,
                to,
            }
            .into());
        }
        let (event, detail) = match to {
            JobState::Fetching | JobState::Running | JobState::Archiving => {
                let mut d = detail;
                if let Some(obj) = d.as_object_mut() {
                    obj.insert("stage".into(), Value::String(to.as_str().into()));
                }
                ("stage_started", d)
            }
            other => (other.as_str(), detail),
        };
        let reason = detail
            .get("reason")
            .and_then(Value::as_str)
            .map(str::to_string);
        let ev = self.append_locked(&mut inner, job_id, event, detail)?;
        let rec = inner.snapshot.jobs.get_mut(job_id).expect("checked above");
        rec.state = to;
        rec.updated_at = ev.ts.clone();
        if to == JobState::Failed {
            rec.failure_reason = reason;
        }
        let out = rec.clone();
        self.persist_snapshot_locked(&inner)?;
        drop(inner);
        self.publish(&ev);
        Ok(out)
    }

    /// Mutates non-lifecycle fields, optionally logging an event.
    pub fn update(
        &self,
        job_id: &str,
        event: Option<(&str, Value)>,
        f: impl FnOnce(&mut JobRecord),
    ) -> Result<JobRecord, StoreError> {
        let mut inner = self.inner.lock().expect("store lock");
        let rec = inner
            .snapshot
            .jobs
            .get_mut(job_id)
            .ok_or_else(|| StoreError::NotFound(job_id.to_string()))?;
        let state = rec.state;
        f(rec);
        rec.state = state;
        let ev = match event {
            Some((name, detail)) => Some(self.append_locked(&mut inner, job_id, name, detail)?),
            None => None,
        };
        let rec = inner.snapshot.jobs.get_mut(job_id).expect("present");
        rec.updated_at = now();
        let out = rec.clone();
        self.persist_snapshot_locked(&inner)?;
        drop(inner);
        if let Some(ev) = ev {
            self.publish(&ev);
        }
        Ok(out)
    }

    pub fn get(&self, job_id: &str) -> Option<JobRecord> {
        self.inner
            .lock()
            .expect("store lock")
            .snapshot
            .jobs
            .get(job_id)
            .cloned()
    }

    pub fn list(&self) -> Vec<JobRecord> {
        self.inner
            .lock()
            .expect("store lock")
            .snapshot
            .jobs
            .values()
            .cloned()
            .collect()
    }

    pub fn events(&self, job_id: &str) -> Vec<JobEvent> {
        self.inner
            .lock()
            .expect("store lock")
            .events
            .iter()
            .filter(|e| e.job_id == job_id)
            .cloned()
            .collect()
    }

    pub fn all_events(&self) -> Vec<JobEvent> {
        self.inner.lock().expect("store lock").events.clone()
    }

    /// Receives every event logged from now on.
    pub fn subscribe(&self) -> Receiver<JobEvent> {
        let (tx, rx) = channel();
        self.subscribers.lock().expect("subscriber lock").push(tx);
        rx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::config::Mode;
    use proptest::prelude::*;

    fn blank(job_id: String) -> JobRecord {
        JobRecord {
            job_id,
            user: None,
            mode: Mode::Predict,
            state: JobState::Submitted,
            created_at: now(),
            updated_at: now(),
            label_type: None,
            webhook: None,
            dataset_version: None,
            image_digest: None,
            tasks: Default::default(),
            artifacts: Vec::new(),
            result_id: None,
            failure_reason: None,
            forked_from: None,
            forked_by: Vec::new(),
            sandbox_runs: Default::default(),
            cache_hits: 0,
        }
    }

    #[test]
    fn lifecycle_is_logged_and_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let (store, _) = JobStore::open(dir.path()).unwrap();
        let j = store.create(blank).unwrap();
        assert_eq!(j.job_id, "j-0001");
        assert!(store
            .transition("j-0001", JobState::Running, json!({}))
            .is_err());
        for s in [
            JobState::Validated,
            JobState::Fetching,
            JobState::Running,
            JobState::Archiving,
            JobState::Completed,
        ] {
            store.transition("j-0001", s, json!({})).unwrap();
        }
        assert!(store
            .transition("j-0001", JobState::Failed, json!({}))
            .is_err());
        let names: Vec<_> = store
            .events("j-0001")
            .into_iter()
            .map(|e| e.event)
            .collect();
        assert_eq!(
            names,
            [
                "submitted",
                "validated",
                "stage_started",
                "stage_started",
                "stage_started",
                "completed"
            ]
        );
        audit_events(&store.all_events()).unwrap();
    }

    #[test]
    fn restart_fails_inflight_jobs() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (store, _) = JobStore::open(dir.path()).unwrap();
            store.create(blank).unwrap();
            store.create(blank).unwrap();
            store
                .transition("j-0001", JobState::Validated, json!({}))
                .unwrap();
            store
                .transition("j-0001", JobState::Fetching, json!({}))
                .unwrap();
            store
                .transition("j-0002", JobState::Validated, json!({}))
                .unwrap();
        }
        let (store, resumable) = JobStore::open(dir.path()).unwrap();
        assert_eq!(resumable, ["j-0002"]);
        let j1 = store.get("j-0001").unwrap();
        assert_eq!(j1.state, JobState::Failed);
        assert!(j1.failure_reason.unwrap().contains("restart"));
        assert_eq!(store.create(blank).unwrap().job_id, "j-0003");
        audit_events(&store.all_events()).unwrap();
    }

    #[test]
    fn log_newer_than_snapshot_is_replayed() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (store, _) = JobStore::open(dir.path()).unwrap();
            store.create(blank).unwrap();
            store
                .transition("j-0001", JobState::Validated, json!({}))
                .unwrap();
        }
        // Simulate a crash after the log append but before the snapshot write.
        let snap = fs::read(dir.path().join(SNAPSHOT)).unwrap();
        {
            let (store, _) = JobStore::open(dir.path()).unwrap();
            store
                .transition("j-0001", JobState::Fetching, json!({}))
                .unwrap();
            store.create(blank).unwrap();
        }
        fs::write(dir.path().join(SNAPSHOT), snap).unwrap();
        let (store, resumable) = JobStore::open(dir.path()).unwrap();
        assert!(resumable.is_empty());
        let j1 = store.get("j-0001").unwrap();
        assert_eq!(j1.state, JobState::Failed);
        assert!(j1.failure_reason.unwrap().contains("fetching"));
        assert_eq!(store.get("j-0002").unwrap().state, JobState::Failed);
        audit_events(&store.all_events()).unwrap();
    }

    #[test]
    fn audit_rejects_bad_histories() {
        let ev = |job: &str, event: &str, detail: Value| JobEvent {
            seq: 0,
            ts: String::new(),
            job_id: job.into(),
            event: event.into(),
            detail,
        };
        let bad = vec![
            ev("j-1", "submitted", json!({})),
            ev("j-1", "stage_started", json!({"stage": "running"})),
        ];
        assert!(audit_events(&bad).is_err());
        let bad = vec![ev("j-1", "validated", json!({}))];
        assert!(audit_events(&bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Random transition attempts never produce a history the audit rejects.
        #[test]
        fn random_attempts_keep_log_valid(steps in prop::collection::vec((0usize..3, 0usize..7), 1..40)) {
            let dir = tempfile::tempdir().unwrap();
            let (store, _) = JobStore::open(dir.path()).unwrap();
            for _ in 0..3 {
                store.create(blank).unwrap();
            }
            for (job, state) in steps {
                let _ = store.transition(&format!("j-{:04}", job + 1), JobState::ALL[state], json!({}));
            }
            prop_assert!(audit_events(&store.all_events()).is_ok());
            drop(store);
            let (reopened, _) = JobStore::open(dir.path()).unwrap();
            prop_assert!(audit_events(&reopened.all_events()).is_ok());
        }
    }
}
