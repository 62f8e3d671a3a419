use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::Mode;
use crate::dsl::LabelType;
use crate::registry::ArtifactKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Submitted,
    Validated,
    Fetching,
    Running,
    Archiving,
    Completed,
    Failed,
}

impl JobState {
    pub const ALL: [JobState; 7] = [
        JobState::Submitted,
        JobState::Validated,
        JobState::Fetching,
        JobState::Running,
        JobState::Archiving,
        JobState::Completed,
        JobState::Failed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Submitted => "submitted",
            JobState::Validated => "validated",
            JobState::Fetching => "fetching",
            JobState::Running => "running",
            JobState::Archiving => "archiving",
            JobState::Completed => "completed",
            JobState::Failed => "failed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        JobState::ALL.into_iter().find(|j| j.as_str() == s)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Completed | JobState::Failed)
    }

    /// Allowed edges of the lifecycle.
    pub fn can_move_to(self, next: JobState) -> bool {
        use JobState::*;
        match (self, next) {
            (Submitted, Validated)
            | (Validated, Fetching)
            | (Fetching, Running)
            | (Running, Archiving) => true,
            (Archiving, Completed) => true,
            (from, Failed) => !from.is_terminal(),
            _ => false,
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Pending,
    Running,
    Succeeded,
    /// Served from the step cache or a forked job without running a sandbox.
    Reused,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStatus {
    pub state: TaskState,
    pub attempts: u32,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub persistent_id: String,
    pub kind: ArtifactKind,
    pub digest: String,
    pub task_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub user: Option<String>,
    pub mode: Mode,
    pub state: JobState,
    pub created_at: String,
    pub updated_at: String,
    pub label_type: Option<LabelType>,
    pub webhook: Option<String>,
    pub dataset_version: Option<String>,
    pub image_digest: Option<String>,
    pub tasks: BTreeMap<String, TaskStatus>,
    pub artifacts: Vec<ArtifactRef>,
    /// Persistent id of the metric or rule report.
    pub result_id: Option<String>,
    pub failure_reason: Option<String>,
    pub forked_from: Option<String>,
    /// Jobs that forked this job's features.
    pub forked_by: Vec<String>,
    /// Sandbox invocations per stage (`probe`, `extract`, `train`, `test`).
    pub sandbox_runs: BTreeMap<String, u32>,
    pub cache_hits: u32,
}

impl JobRecord {
    pub fn artifact(&self, task_id: &str, kind: ArtifactKind) -> Option<&ArtifactRef> {
        self.artifacts
            .iter()
            .find(|a| a.kind == kind && a.task_id.as_deref() == Some(task_id))
    }

    pub fn sandbox_runs_for(&self, stage: &str) -> u32 {
        self.sandbox_runs.get(stage).copied().unwrap_or(0)
    }
}

/// A state-machine violation.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("job {job_id}: illegal transition {from} -> {to}")]
pub struct TransitionError {
    pub job_id: String,
    pub from: JobState,
    pub to: JobState,
}
