// SPDX-License-Identifier: Apache-2.0

//! Long-running job records with ordered progress events.
//!
//! Progress never goes backwards and a job accepts no events once it is
//! `Done` or `Failed`. Subscribers block in [`JobRegistry::wait_events`]
//! until something newer than the sequence number they have seen arrives.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::clock::SharedClock;
use crate::error::ErrorCode;
use crate::store::{Store, StoreError};

const JOBS: &str = "jobs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobKind {
    Register,
    ImageBuild,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobEvent {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub status: JobStatus,
    pub progress: u8,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobFailure {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: u8,
    pub events: Vec<JobEvent>,
    #[serde(default)]
    pub result: Option<serde_json::Value>,
    #[serde(default)]
    pub error: Option<JobFailure>,
    /// Identity-set id of the requester.
    #[serde(default)]
    pub owner: Option<String>,
    pub created: DateTime<Utc>,
}

#[derive(Debug, thiserror::Error)]
pub enum JobError {
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job {0} has already finished")]
    JobTerminal(String),
    #[error("progress may not go from {current} back to {requested}")]
    ProgressRegression { current: u8, requested: u8 },
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ErrorCode for JobError {
    fn code(&self) -> &'static str {
        match self {
            JobError::UnknownJob(_) => "UnknownJob",
            JobError::JobTerminal(_) => "JobTerminal",
            JobError::ProgressRegression { .. } => "ProgressRegression",
            JobError::Store(_) => "StorageError",
        }
    }
}

pub type Result<T, E = JobError> = std::result::Result<T, E>;

#[derive(Debug)]
pub struct JobRegistry {
    jobs: Mutex<HashMap<String, JobRecord>>,
    changed: Condvar,
    store: Arc<Store>,
    clock: SharedClock,
}

impl JobRegistry {
    /// Loads persisted jobs. Registration jobs that were still in flight
    /// cannot be resumed and are marked failed; image builds are left for
    /// the build queue to pick up again.
    pub fn open(store: Arc<Store>, clock: SharedClock) -> Result<Self> {
        let mut jobs = HashMap::new();
        for (_, mut job) in store.scan::<JobRecord>(JOBS)? {
            if job.kind == JobKind::Register && !job.status.is_terminal() {
                job.status = JobStatus::Failed;
                job.error = Some(JobFailure {
                    code: "Interrupted".into(),
                    message: "service restarted while the job was running".into(),
                });
                store.put(JOBS, &job.id, &job)?;
            }
            jobs.insert(job.id.clone(), job);
        }
        Ok(Self {
            jobs: Mutex::new(jobs),
            changed: Condvar::new(),
            store,
            clock,
        })
    }

    pub fn in_memory(clock: SharedClock) -> Self {
        Self::open(Arc::new(Store::in_memory()), clock).expect("empty store")
    }

    fn save(&self, job: &JobRecord) -> Result<()> {
        self.store.put(JOBS, &job.id, job)?;
        self.changed.notify_all();
        Ok(())
    }

    pub fn create(&self, kind: JobKind, owner: Option<String>) -> Result<JobRecord> {
        let job = JobRecord {
            id: uuid::Uuid::new_v4().simple().to_string(),
            kind,
            status: JobStatus::Queued,
            progress: 0,
            events: Vec::new(),
            result: None,
            error: None,
            owner,
            created: self.clock.now(),
        };
        let mut jobs = self.jobs.lock();
        self.save(&job)?;
        jobs.insert(job.id.clone(), job.clone());
        Ok(job)
    }

    pub fn get(&self, id: &str) -> Result<JobRecord> {
        self.jobs
            .lock()
            .get(id)
            .cloned()
            .ok_or_else(|| JobError::UnknownJob(id.to_string()))
    }

    pub fn list(&self) -> Vec<JobRecord> {
        let mut all: Vec<_> = self.jobs.lock().values().cloned().collect();
        all.sort_by(|a, b| a.created.cmp(&b.created).then_with(|| a.id.cmp(&b.id)));
        all
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut JobRecord, DateTime<Utc>) -> Result<()>) -> Result<JobRecord> {
        let mut jobs = self.jobs.lock();
        let job = jobs.get_mut(id).ok_or_else(|| JobError::UnknownJob(id.to_string()))?;
        if job.status.is_terminal() {
            return Err(JobError::JobTerminal(id.to_string()));
        }
        let mut next = job.clone();
        f(&mut next, self.clock.now())?;
        self.save(&next)?;
        *job = next.clone();
        Ok(next)
    }

    fn push_event(job: &mut JobRecord, at: DateTime<Utc>, message: &str) {
        let seq = job.events.len() as u64 + 1;
        job.events.push(JobEvent {
            seq,
            at,
            status: job.status,
            progress: job.progress,
            message: message.to_string(),
        });
    }

    /// Appends a progress event. `progress` of `None` keeps the current value.
    pub fn notify(&self, id: &str, message: &str, progress: Option<u8>) -> Result<JobEvent> {
        let job = self.update(id, |job, now| {
            if let Some(p) = progress {
                let p = p.min(100);
                if p < job.progress {
                    return Err(JobError::ProgressRegression {
                        current: job.progress,
                        requested: p,
                    });
                }
                job.progress = p;
            }
            if job.status == JobStatus::Queued {
                job.status = JobStatus::Running;
            }
            Self::push_event(job, now, message);
            Ok(())
        })?;
        Ok(job.events.last().cloned().expect("event just pushed"))
    }

    pub fn start(&self, id: &str, message: &str) -> Result<JobRecord> {
        self.update(id, |job, now| {
            job.status = JobStatus::Running;
            Self::push_event(job, now, message);
            Ok(())
        })
    }

    pub fn complete(&self, id: &str, result: serde_json::Value) -> Result<JobRecord> {
        self.update(id, |job, now| {
            job.status = JobStatus::Done;
            job.progress = 100;
            job.result = Some(result);
            Self::push_event(job, now, "done");
            Ok(())
        })
    }

    pub fn fail(&self, id: &str, code: &str, message: &str) -> Result<JobRecord> {
        self.update(id, |job, now| {
            job.status = JobStatus::Failed;
            job.error = Some(JobFailure {
                code: code.to_string(),
                message: message.to_string(),
            });
            Self::push_event(job, now, message);
            Ok(())
        })
    }

    /// Events with `seq > after`, waiting up to `timeout` for at least one
    /// to appear. Also returns the job's status at that moment.
    pub fn wait_events(&self, id: &str, after: u64, timeout: Duration) -> Result<(Vec<JobEvent>, JobStatus)> {
        let deadline = Instant::now() + timeout;
        let mut jobs = self.jobs.lock();
        loop {
            let job = jobs.get(id).ok_or_else(|| JobError::UnknownJob(id.to_string()))?;
            let fresh: Vec<JobEvent> = job.events.iter().filter(|e| e.seq > after).cloned().collect();
            if !fresh.is_empty() || job.status.is_terminal() {
                return Ok((fresh, job.status));
            }
            if self.changed.wait_until(&mut jobs, deadline).timed_out() {
                let status = jobs.get(id).map(|j| j.status).unwrap_or(JobStatus::Failed);
                return Ok((Vec::new(), status));
            }
        }
    }

    /// Blocks until the job is terminal or `timeout` passes.
    pub fn wait_terminal(&self, id: &str, timeout: Duration) -> Result<JobRecord> {
        let deadline = Instant::now() + timeout;
        let mut jobs = self.jobs.lock();
        loop {
            let job = jobs.get(id).ok_or_else(|| JobError::UnknownJob(id.to_string()))?;
            if job.status.is_terminal() {
                return Ok(job.clone());
            }
            if self.changed.wait_until(&mut jobs, deadline).timed_out() {
                return Ok(jobs.get(id).cloned().expect("job exists"));
            }
        }
    }
}
