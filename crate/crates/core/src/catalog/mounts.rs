use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::Catalog;
use crate::dsl::{LabelType, Stage, Task, TaskGraph, TaskScope};

/// Root of the data tree inside a sandbox.
pub const CONTAINER_ROOT: &str = "/morf-data";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Extract,
    Train,
    Test,
    Probe,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Extract => "extract",
            RunMode::Train => "train",
            RunMode::Test => "test",
            RunMode::Probe => "probe",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A read-only input: host file or directory → absolute container path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mount {
    pub source: PathBuf,
    pub target: String,
}

/// Arguments passed to the image entrypoint. Spanning scopes use `all`
/// for course/session and tasks without a label type pass `none`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationArgs {
    pub mode: RunMode,
    pub course: String,
    pub session: String,
    pub label_type: String,
}

impl InvocationArgs {
    pub fn probe() -> Self {
        InvocationArgs {
            mode: RunMode::Probe,
            course: "all".into(),
            session: "all".into(),
            label_type: "none".into(),
        }
    }

    pub fn to_args(&self) -> Vec<String> {
        if self.mode == RunMode::Probe {
            return vec!["--mode".into(), "probe".into()];
        }
        vec![
            "--mode".into(),
            self.mode.to_string(),
            "--course".into(),
            self.course.clone(),
            "--session".into(),
            self.session.clone(),
            "--label-type".into(),
            self.label_type.clone(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MountSpec {
    pub mode: RunMode,
    pub read_only_mounts: Vec<Mount>,
    pub writable_output: String,
    pub args: InvocationArgs,
}

impl MountSpec {
    pub fn probe() -> Self {
        MountSpec {
            mode: RunMode::Probe,
            read_only_mounts: Vec::new(),
            writable_output: format!("{CONTAINER_ROOT}/output/"),
            args: InvocationArgs::probe(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MountError {
    #[error("task {0} does not run in a sandbox")]
    NotSandboxed(String),
    #[error("upstream artifact of task {0} is not available")]
    MissingUpstream(String),
    #[error("labels for {0}/{1} are not available")]
    MissingLabels(String, String),
    #[error("{0}/{1} is not in the catalog")]
    UnknownSession(String, String),
    #[error("refusing to expose labels at {0} to a {1} container")]
    LabelLeak(String, RunMode),
}

/// Host paths of artifacts produced earlier in the job.
pub trait UpstreamArtifacts {
    /// Output of a completed task: `features.csv` for extract tasks, the
    /// model directory for train tasks.
    fn task_output(&self, task_id: &str) -> Option<PathBuf>;
    /// `labels.csv` for a training session.
    fn labels(&self, course: &str, session: &str) -> Option<PathBuf>;
}

fn raw_target(course: &str, session: &str) -> String {
    format!("{CONTAINER_ROOT}/raw/{course}/{session}/")
}

/// Container path of a features file produced by a task with `scope`.
pub fn features_target(scope: &TaskScope) -> String {
    match scope {
        TaskScope::Session { course, session } => {
            format!("{CONTAINER_ROOT}/features/{course}/{session}/features.csv")
        }
        TaskScope::Course { course } => format!("{CONTAINER_ROOT}/features/{course}/features.csv"),
        TaskScope::All => format!("{CONTAINER_ROOT}/features/features.csv"),
    }
}

fn labels_target(course: &str, session: &str) -> String {
    format!("{CONTAINER_ROOT}/labels/{course}/{session}/labels.csv")
}

/// Fails if a non-train spec would expose any label path.
pub fn check_label_isolation(spec: &MountSpec) -> Result<(), MountError> {
    if spec.mode == RunMode::Train {
        return Ok(());
    }
    match spec
        .read_only_mounts
        .iter()
        .find(|m| m.target.starts_with(&format!("{CONTAINER_ROOT}/labels")))
    {
        Some(m) => Err(MountError::LabelLeak(m.target.clone(), spec.mode)),
        None => Ok(()),
    }
}

/// Builds the mount layout for a sandboxed task.
///
/// Extract tasks see raw bundles, train tasks see features plus labels of
/// training sessions, test tasks see holdout features plus the model.
pub fn resolve_mounts(
    task: &Task,
    graph: &TaskGraph,
    catalog: &Catalog,
    upstream: &dyn UpstreamArtifacts,
) -> Result<MountSpec, MountError> {
    if !task.is_sandboxed() {
        return Err(MountError::NotSandboxed(task.task_id.clone()));
    }
    let label_type = graph
        .plan
        .steps
        .iter()
        .find_map(|s| s.label_type())
        .map(LabelType::as_str)
        .unwrap_or("none")
        .to_string();

    let holdout_stage = task.stage == Stage::ExtractHoldout;
    let mut mounts = Vec::new();
    let mode = match task.stage {
        Stage::Extract | Stage::ExtractHoldout => {
            for (course, session) in catalog
                .eligible_courses()
                .flat_map(|c| c.sessions.iter().map(move |s| (c, s)))
            {
                if session.is_holdout == holdout_stage
                    && task.scope.covers(&course.course_id, &session.session_id)
                {
                    mounts.push(Mount {
                        source: session.bundle.dir().to_path_buf(),
                        target: raw_target(&course.course_id, &session.session_id),
                    });
                }
            }
            RunMode::Extract
        }
        Stage::Train => {
            for dep_id in &task.depends_on {
                let dep = graph
                    .task(dep_id)
                    .ok_or_else(|| MountError::MissingUpstream(dep_id.clone()))?;
                let source = upstream
                    .task_output(dep_id)
                    .ok_or_else(|| MountError::MissingUpstream(dep_id.clone()))?;
                mounts.push(Mount {
                    source,
                    target: features_target(&dep.scope),
                });
            }
            for course in catalog.eligible_courses() {
                for session in course.sessions.iter() {
                    if !task.scope.covers(&course.course_id, &session.session_id) {
                        continue;
                    }
                    if session.is_holdout {
                        continue;
                    }
                    let source = upstream
                        .labels(&course.course_id, &session.session_id)
                        .ok_or_else(|| {
                            MountError::MissingLabels(
                                course.course_id.clone(),
                                session.session_id.clone(),
                            )
                        })?;
                    mounts.push(Mount {
                        source,
                        target: labels_target(&course.course_id, &session.session_id),
                    });
                }
            }
            RunMode::Train
        }
        Stage::Test => {
            for dep_id in &task.depends_on {
                let dep = graph
                    .task(dep_id)
                    .ok_or_else(|| MountError::MissingUpstream(dep_id.clone()))?;
                let source = upstream
                    .task_output(dep_id)
                    .ok_or_else(|| MountError::MissingUpstream(dep_id.clone()))?;
                let target = if dep.stage == Stage::Train {
                    format!("{CONTAINER_ROOT}/model/")
                } else {
                    features_target(&dep.scope)
                };
                mounts.push(Mount { source, target });
            }
            RunMode::Test
        }
        Stage::Evaluate | Stage::ForkFeatures => {
            return Err(MountError::NotSandboxed(task.task_id.clone()))
        }
    };

    if let (Some(c), Some(s)) = (task.course_id(), task.session_id()) {
        if catalog.session(c, s).is_none() {
            return Err(MountError::UnknownSession(c.into(), s.into()));
        }
    }

    let spec = MountSpec {
        mode,
        read_only_mounts: mounts,
        writable_output: format!("{CONTAINER_ROOT}/output/"),
        args: InvocationArgs {
            mode,
            course: task.course_id().unwrap_or("all").to_string(),
            session: task.session_id().unwrap_or("all").to_string(),
            label_type: if mode == RunMode::Extract {
                "none".to_string()
            } else {
                label_type
            },
        },
    };
    check_label_isolation(&spec)?;
    Ok(spec)
}
