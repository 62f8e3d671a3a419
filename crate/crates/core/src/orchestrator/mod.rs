//! Job lifecycle: submission, validation, task scheduling, step caching,
//! feature forking, archiving and notifications.

mod cache;
mod config;
mod engine;
mod job;
mod notify;
mod scheduler;
mod store;

pub use cache::{params_digest, CacheEntry, StepCache, StepCacheKey};
pub use config::{ConfigError, ExperimentConfig, Mode};
pub use engine::{
    parse_rule_file, CourseSummary, JobResults, Orchestrator, OrchestratorError,
    OrchestratorOptions, RuleResult, Submission, SubmitError,
};
pub use job::{ArtifactRef, JobRecord, JobState, TaskState, TaskStatus, TransitionError};
pub use notify::{Delivery, WebhookNotifier};
pub use scheduler::{graph_deps, schedule, ExecutionTrace, TaskOutcome, TraceEvent, TraceKind};
pub use store::{audit_events, JobEvent, JobStore, StoreError};
