use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::{info, warn};

use super::cache::{params_digest, StepCache, StepCacheKey};
use super::config::{ConfigError, ExperimentConfig, Mode};
use super::job::{ArtifactRef, JobRecord, JobState, TaskState, TaskStatus};
use super::notify::{Delivery, WebhookNotifier};
use super::scheduler::{graph_deps, schedule, ExecutionTrace};
use super::store::{now, JobEvent, JobStore, StoreError};
use crate::catalog::{
    extract_labels, resolve_mounts, Catalog, LabelTable, RunMode, UpstreamArtifacts,
};
use crate::dsl::{
    expand_tasks, parse_script, validate_plan, ForkBinding, LabelType, Stage, Task, TaskGraph,
    ValidatedPlan,
};
use crate::eval::{
    classification_report, compare_jobs, parse_predictions, regression_report, MetricReport,
    MetricRow, MetricSet, TestResult,
};
use crate::registry::{Access, ArtifactKind, ArtifactRecord, Provenance, Registry, RegistryError};
use crate::rules::{
    aggregate_results, parse_rule, tabulate, test_rule, AggregateReport, ProductionRule,
    RuleTestResult,
};
use crate::sandbox::{
    backend_by_name, check_image, fetch_image, prepare_image, run_sandboxed, Backend,
    PreparedImage, ResourceLimits, RunResult, DEFAULT_MAX_IMAGE_BYTES,
};

const CONFIG_FILE: &str = "config.ini";
const SCRIPT_FILE: &str = "script.txt";
const IMAGE_FILE: &str = "image.tar";

#[derive(Debug, Clone)]
pub struct OrchestratorOptions {
    /// State directory: job log, registry, step cache and work areas.
    pub root: PathBuf,
    pub workers: usize,
    /// Sandbox backend name (`namespace` or `bundle`).
    pub backend: String,
    pub limits: ResourceLimits,
    pub job_timeout: Duration,
    pub max_image_bytes: u64,
    pub webhook_backoff: Duration,
    /// Run validated jobs on a background thread as they are submitted.
    pub autorun: bool,
}

impl OrchestratorOptions {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        OrchestratorOptions {
            root: root.into(),
            workers: 4,
            backend: "namespace".into(),
            limits: ResourceLimits::default(),
            job_timeout: Duration::from_secs(6 * 3600),
            max_image_bytes: DEFAULT_MAX_IMAGE_BYTES,
            webhook_backoff: Duration::from_millis(250),
            autorun: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("unknown sandbox backend `{0}`")]
    UnknownBackend(String),
    #[error("job {0} not found")]
    UnknownJob(String),
    #[error("job {job_id} is {state}, not {expected}")]
    WrongState {
        job_id: String,
        state: JobState,
        expected: &'static str,
    },
    #[error("job {job_id} has no results: {reason}")]
    NoResults { job_id: String, reason: String },
    #[error("cannot compare jobs: {0}")]
    Compare(String),
}

#[derive(Debug, thiserror::Error)]
pub enum SubmitError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot read {what} `{reference}`: {detail}")]
    Reference {
        what: &'static str,
        reference: String,
        detail: String,
    },
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

impl From<StoreError> for SubmitError {
    fn from(e: StoreError) -> Self {
        SubmitError::Orchestrator(e.into())
    }
}

/// A job submission: config text plus optional inline script and image.
#[derive(Debug, Clone, Default)]
pub struct Submission {
    pub config: String,
    /// Controller script or rule file; read from the config reference when
    /// absent.
    pub script: Option<String>,
    /// Image archive bytes; take precedence over the config's `image`.
    pub image: Option<Vec<u8>>,
    /// Authenticated submitter; overrides the config's `user`.
    pub user: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleResult {
    pub rule: String,
    #[serde(flatten)]
    pub report: AggregateReport,
}

/// Summary results of a completed job; the only result data users see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum JobResults {
    Predict {
        job_id: String,
        report: MetricReport,
    },
    Rules {
        job_id: String,
        rules: Vec<RuleResult>,
    },
}

impl JobResults {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize")
    }

    /// Long-format CSV: per-course metrics, or per-session rule tables.
    pub fn to_csv(&self) -> String {
        match self {
            JobResults::Predict { report, .. } => report.to_csv(),
            JobResults::Rules { rules, .. } => {
                let mut out =
                    String::from("rule,course_id,session_id,a,b,c,d,statistic,p_value,direction\n");
                for r in rules {
                    for s in &r.report.sessions {
                        let t = &s.table;
                        out.push_str(&format!(
                            "\"{}\",{},{},{},{},{},{},{},{},{}\n",
                            r.rule.replace('"', "\"\""),
                            t.course_id,
                            t.session_id,
                            t.a,
                            t.b,
                            t.c,
                            t.d,
                            s.statistic,
                            s.p_value,
                            s.direction
                        ));
                    }
                }
                out
            }
        }
    }

    pub fn metric_report(&self) -> Option<&MetricReport> {
        match self {
            JobResults::Predict { report, .. } => Some(report),
            JobResults::Rules { .. } => None,
        }
    }
}

/// Course listing without learner data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CourseSummary {
    pub course_id: String,
    pub sessions: Vec<String>,
    pub holdout: Option<String>,
    pub eligible: bool,
}

/// Drives jobs from submission to a terminal state.
pub struct Orchestrator {
    opts: OrchestratorOptions,
    catalog: Catalog,
    registry: Registry,
    store: Arc<JobStore>,
    cache: StepCache,
    backend: Box<dyn Backend>,
    queue: Mutex<Option<Sender<String>>>,
    notifier: WebhookNotifier,
    traces: Mutex<HashMap<String, ExecutionTrace>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// File-system-safe name for a task's work directory.
fn work_name(index: usize, task_id: &str) -> String {
    let clean: String = task_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:03}-{clean}")
}

fn read_reference(what: &'static str, reference: &str) -> Result<String, SubmitError> {
    let fail = |detail: String| SubmitError::Reference {
        what,
        reference: reference.to_string(),
        detail,
    };
    if reference.starts_with("http://") || reference.starts_with("https://") {
        let resp = reqwest::blocking::get(reference).map_err(|e| fail(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(fail(format!("HTTP {}", resp.status())));
        }
        resp.text().map_err(|e| fail(e.to_string()))
    } else {
        let path = reference.strip_prefix("file://").unwrap_or(reference);
        fs::read_to_string(path).map_err(|e| fail(e.to_string()))
    }
}

/// Rules of a rule file: one per line, `#` comments and blank lines ignored.
pub fn parse_rule_file(text: &str) -> Result<Vec<ProductionRule>, String> {
    let mut rules = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        rules.push(parse_rule(line).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    if rules.is_empty() {
        return Err("rule file contains no rules".into());
    }
    Ok(rules)
}

/// Validated form of a job's script.
enum Plan {
    Predict {
        plan: Box<ValidatedPlan>,
        graph: TaskGraph,
    },
    Rules(Vec<ProductionRule>),
}

#[derive(Clone)]
struct Output {
    path: PathBuf,
    digest: String,
}

struct Upstream<'a> {
    outputs: HashMap<String, Output>,
    labels_dir: &'a Path,
}

impl UpstreamArtifacts for Upstream<'_> {
    fn task_output(&self, task_id: &str) -> Option<PathBuf> {
        self.outputs.get(task_id).map(|o| o.path.clone())
    }

    fn labels(&self, course: &str, session: &str) -> Option<PathBuf> {
        let p = self
            .labels_dir
            .join(course)
            .join(session)
            .join("labels.csv");
        p.is_file().then_some(p)
    }
}

/// Shared state of one predict run.
struct RunCtx<'a> {
    job_id: &'a str,
    owner: Option<String>,
    cache_enabled: bool,
    graph: &'a TaskGraph,
    image: &'a PreparedImage,
    label_type: LabelType,
    work: PathBuf,
    labels_dir: PathBuf,
    holdout_labels: HashMap<(String, String), LabelTable>,
    outputs: Mutex<HashMap<String, Output>>,
    metrics: Mutex<BTreeMap<String, MetricSet>>,
    deadline: Instant,
}

impl RunCtx<'_> {
    fn provenance(&self) -> Provenance {
        Provenance::job(self.job_id).owned_by(self.owner.as_deref())
    }
}

fn output_kind(stage: Stage) -> ArtifactKind {
    match stage {
        Stage::Train => ArtifactKind::Model,
        Stage::Test => ArtifactKind::Predictions,
        _ => ArtifactKind::Features,
    }
}

fn output_file(stage: Stage) -> &'static str {
    match stage {
        Stage::Train => "model",
        Stage::Test => "predictions.csv",
        _ => "features.csv",
    }
}

fn describe_failure(run: &RunResult) -> String {
    let mut msg = match &run.failure {
        Some(f) => f.to_string(),
        None => "succeeded".into(),
    };
    if !run.violations.is_empty() {
        let v: Vec<_> = run
            .violations
            .iter()
            .map(|v| format!("{}: {}", v.kind, v.detail))
            .collect();
        msg.push_str(&format!(" ({})", v.join("; ")));
    }
    msg
}

impl Orchestrator {
    /// Opens the state directory, recovering the job log. Jobs interrupted
    /// mid-run are failed; validated jobs are queued again when `autorun`
    /// is set.
    pub fn open(
        opts: OrchestratorOptions,
        catalog: Catalog,
    ) -> Result<Arc<Self>, OrchestratorError> {
        fs::create_dir_all(&opts.root).map_err(io_err(&opts.root))?;
        let backend = backend_by_name(&opts.backend)
            .ok_or_else(|| OrchestratorError::UnknownBackend(opts.backend.clone()))?;
        let registry = Registry::open(opts.root.join("registry"))?;
        let (store, resumable) = JobStore::open(&opts.root.join("jobs"))?;
        let store = Arc::new(store);
        let cache_path = opts.root.join("cache.ndjson");
        let cache = StepCache::open(&cache_path).map_err(io_err(&cache_path))?;
        let notifier = WebhookNotifier::start(store.clone(), opts.webhook_backoff);
        let orch = Arc::new(Orchestrator {
            catalog,
            registry,
            store,
            cache,
            backend,
            queue: Mutex::new(None),
            notifier,
            traces: Mutex::new(HashMap::new()),
            opts,
        });
        if orch.opts.autorun {
            orch.start_runner();
            for job in resumable {
                orch.enqueue(&job);
            }
        }
        Ok(orch)
    }

    fn start_runner(self: &Arc<Self>) {
        let (tx, rx) = channel::<String>();
        *self.queue.lock().expect("queue lock") = Some(tx);
        let weak = Arc::downgrade(self);
        std::thread::Builder::new()
            .name("morf-runner".into())
            .spawn(move || {
                for job_id in rx {
                    let Some(orch) = weak.upgrade() else { break };
                    if let Err(e) = orch.run_job(&job_id) {
                        warn!(job = %job_id, error = %e, "job run aborted");
                    }
                }
            })
            .expect("spawn runner thread");
    }

    fn enqueue(&self, job_id: &str) {
        if let Some(tx) = self.queue.lock().expect("queue lock").as_ref() {
            let _ = tx.send(job_id.to_string());
        }
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn store(&self) -> &JobStore {
        &self.store
    }

    pub fn cache(&self) -> &StepCache {
        &self.cache
    }

    pub fn options(&self) -> &OrchestratorOptions {
        &self.opts
    }

    pub fn job(&self, job_id: &str) -> Result<JobRecord, OrchestratorError> {
        self.store
            .get(job_id)
            .ok_or_else(|| OrchestratorError::UnknownJob(job_id.to_string()))
    }

    pub fn jobs(&self) -> Vec<JobRecord> {
        self.store.list()
    }

    pub fn events(&self, job_id: &str) -> Result<Vec<JobEvent>, OrchestratorError> {
        self.job(job_id)?;
        Ok(self.store.events(job_id))
    }

    pub fn deliveries(&self) -> Vec<Delivery> {
        self.notifier.deliveries()
    }

    /// Scheduler trace of the job's most recent run in this process.
    pub fn trace(&self, job_id: &str) -> Option<ExecutionTrace> {
        self.traces.lock().expect("trace lock").get(job_id).cloned()
    }

    pub fn courses(&self) -> Vec<CourseSummary> {
        self.catalog
            .courses
            .iter()
            .map(|c| CourseSummary {
                course_id: c.course_id.clone(),
                sessions: c.sessions.iter().map(|s| s.session_id.clone()).collect(),
                holdout: c.holdout().map(|s| s.session_id.clone()),
                eligible: c.eligible,
            })
            .collect()
    }

    fn job_dir(&self, job_id: &str) -> PathBuf {
        self.opts.root.join("work").join(job_id)
    }

    /// Blocks until the job is terminal or `timeout` passes.
    pub fn wait(&self, job_id: &str, timeout: Duration) -> Result<JobRecord, OrchestratorError> {
        let start = Instant::now();
        loop {
            let rec = self.job(job_id)?;
            if rec.state.is_terminal() || start.elapsed() >= timeout {
                return Ok(rec);
            }
            std::thread::sleep(Duration::from_millis(50));
        }
    }

    /// Persists a job and validates it. A job that fails validation is
    /// returned in the failed state with the reason recorded.
    pub fn submit_job(&self, sub: Submission) -> Result<JobRecord, SubmitError> {
        let cfg = ExperimentConfig::parse(&sub.config)?;
        let script = match sub.script {
            Some(s) => s,
            None => match cfg.mode {
                Mode::Predict => read_reference(
                    "controller script",
                    cfg.controller.as_deref().unwrap_or_default(),
                )?,
                Mode::Rules => {
                    read_reference("rule file", cfg.rules.as_deref().unwrap_or_default())?
                }
            },
        };
        let user = sub.user.or_else(|| cfg.user.clone());
        let created = now();
        let rec = self.store.create(|job_id| JobRecord {
            job_id,
            user: user.clone(),
            mode: cfg.mode,
            state: JobState::Submitted,
            created_at: created.clone(),
            updated_at: created.clone(),
            label_type: cfg.label_type,
            webhook: cfg.webhook.clone(),
            dataset_version: None,
            image_digest: None,
            tasks: BTreeMap::new(),
            artifacts: Vec::new(),
            result_id: None,
            failure_reason: None,
            forked_from: None,
            forked_by: Vec::new(),
            sandbox_runs: BTreeMap::new(),
            cache_hits: 0,
        })?;
        let job_id = rec.job_id.clone();
        let dir = self.job_dir(&job_id);
        let write = |name: &str, bytes: &[u8]| -> Result<(), OrchestratorError> {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(io_err(&p))
        };
        write(CONFIG_FILE, sub.config.as_bytes())?;
        write(SCRIPT_FILE, script.as_bytes())?;
        if let Some(image) = &sub.image {
            write(IMAGE_FILE, image)?;
        }

        match self.plan(&cfg, &script) {
            Ok(plan) => {
                let (tasks, label_type, forked_from) = match &plan {
                    Plan::Predict { plan, graph } => (
                        graph
                            .tasks
                            .iter()
                            .map(|t| {
                                (
                                    t.task_id.clone(),
                                    TaskStatus {
                                        state: TaskState::Pending,
                                        attempts: 0,
                                        failure: None,
                                    },
                                )
                            })
                            .collect(),
                        plan.label_type.or(Some(LabelType::Dropout)),
                        plan.plan.fork_source().map(str::to_string),
                    ),
                    Plan::Rules(_) => (BTreeMap::new(), Some(LabelType::Dropout), None),
                };
                let dataset_version = self.catalog.dataset_version.clone();
                self.store.update(&job_id, None, |r| {
                    r.tasks = tasks;
                    r.label_type = label_type;
                    r.dataset_version = Some(dataset_version);
                    r.forked_from = forked_from.clone();
                })?;
                if let Some(src) = &forked_from {
                    let child = job_id.clone();
                    self.store.update(src, None, |r| {
                        if !r.forked_by.contains(&child) {
                            r.forked_by.push(child);
                        }
                    })?;
                }
                let n = self.job(&job_id)?.tasks.len();
                let rec =
                    self.store
                        .transition(&job_id, JobState::Validated, json!({ "tasks": n }))?;
                self.enqueue(&job_id);
                Ok(rec)
            }
            Err(reason) => {
                info!(job = %job_id, %reason, "job failed validation");
                Ok(self
                    .store
                    .transition(&job_id, JobState::Failed, json!({ "reason": reason }))?)
            }
        }
    }

    /// Parses and validates a script against the catalog.
    fn plan(&self, cfg: &ExperimentConfig, script: &str) -> Result<Plan, String> {
        match cfg.mode {
            Mode::Predict => {
                let parsed = parse_script(script).map_err(|e| format!("controller script: {e}"))?;
                let mut validated = validate_plan(parsed, cfg.label_type)
                    .map_err(|e| format!("controller script: {e}"))?;
                if let Some(src) = validated.plan.fork_source().map(str::to_string) {
                    validated = validated.bind_fork(self.fork_binding(&src)?);
                }
                let graph = expand_tasks(&validated, &self.catalog).map_err(|e| e.to_string())?;
                Ok(Plan::Predict {
                    plan: Box::new(validated),
                    graph,
                })
            }
            Mode::Rules => {
                let rules = parse_rule_file(script).map_err(|e| format!("rule file: {e}"))?;
                if self.catalog.courses.is_empty() {
                    return Err("catalog has no sessions".into());
                }
                for rule in &rules {
                    for (c, s) in self.catalog.all_sessions() {
                        if rule.operator.week > s.weeks {
                            return Err(format!(
                                "rule `{}` refers to week {} but {}/{} has {} weeks",
                                rule.source_text,
                                rule.operator.week,
                                c.course_id,
                                s.session_id,
                                s.weeks
                            ));
                        }
                    }
                }
                Ok(Plan::Rules(rules))
            }
        }
    }

    /// Extract granularities of a completed source job.
    fn fork_binding(&self, source: &str) -> Result<ForkBinding, String> {
        let rec = self
            .store
            .get(source)
            .ok_or_else(|| format!("fork source job {source} not found"))?;
        if rec.state != JobState::Completed {
            return Err(format!(
                "fork source job {source} is {}, not completed",
                rec.state
            ));
        }
        if rec.dataset_version.as_deref() != Some(self.catalog.dataset_version.as_str()) {
            return Err(format!(
                "fork source job {source} ran on dataset version {}, current catalog is {}",
                rec.dataset_version.as_deref().unwrap_or("unknown"),
                self.catalog.dataset_version
            ));
        }
        if !rec
            .artifacts
            .iter()
            .any(|a| a.kind == ArtifactKind::Features)
        {
            return Err(format!("fork source job {source} produced no features"));
        }
        let script_path = self.job_dir(source).join(SCRIPT_FILE);
        let script =
            fs::read_to_string(&script_path).map_err(|e| format!("fork source script: {e}"))?;
        let plan = parse_script(&script).map_err(|e| format!("fork source script: {e}"))?;
        if let Some(upstream) = plan.fork_source() {
            return self.fork_binding(upstream);
        }
        let last = |stage: Stage| {
            plan.steps
                .iter()
                .rev()
                .find(|s| s.stage == stage)
                .and_then(|s| s.granularity)
        };
        Ok(ForkBinding {
            extract: last(Stage::Extract),
            extract_holdout: last(Stage::ExtractHoldout),
        })
    }

    /// Runs a validated job to a terminal state.
    pub fn run_job(&self, job_id: &str) -> Result<JobRecord, OrchestratorError> {
        let rec = self.job(job_id)?;
        if rec.state != JobState::Validated {
            return Err(OrchestratorError::WrongState {
                job_id: job_id.to_string(),
                state: rec.state,
                expected: "validated",
            });
        }
        let started = Instant::now();
        if let Err(reason) = self.execute(&rec, started) {
            warn!(job = %job_id, %reason, "job failed");
            if !self.job(job_id)?.state.is_terminal() {
                self.store
                    .transition(job_id, JobState::Failed, json!({ "reason": reason }))?;
            }
        }
        self.job(job_id)
    }

    fn stage_completed(&self, job_id: &str, stage: JobState) -> Result<(), String> {
        self.store
            .update(
                job_id,
                Some(("stage_completed", json!({ "stage": stage.as_str() }))),
                |_| {},
            )
            .map(|_| ())
            .map_err(|e| e.to_string())
    }

    fn add_artifact(&self, job_id: &str, record: &ArtifactRecord) -> Result<(), String> {
        let r = ArtifactRef {
            persistent_id: record.persistent_id.clone(),
            kind: record.kind,
            digest: record.digest.clone(),
            task_id: record.provenance.task_id.clone(),
        };
        self.store
            .update(job_id, None, |j| {
                if !j.artifacts.contains(&r) {
                    j.artifacts.push(r);
                }
            })
            .map(|_| ())
            .map_err(|e| e.to_string())
    }

    fn count_run(&self, job_id: &str, mode: RunMode) -> Result<(), String> {
        self.store
            .update(job_id, None, |j| {
                *j.sandbox_runs.entry(mode.to_string()).or_insert(0) += 1
            })
            .map(|_| ())
            .map_err(|e| e.to_string())
    }

    fn execute(&self, rec: &JobRecord, started: Instant) -> Result<(), String> {
        let job_id = rec.job_id.as_str();
        let dir = self.job_dir(job_id);
        let read = |name: &str| {
            fs::read_to_string(dir.join(name)).map_err(|e| format!("reading {name}: {e}"))
        };
        let cfg = ExperimentConfig::parse(&read(CONFIG_FILE)?).map_err(|e| e.to_string())?;
        let script = read(SCRIPT_FILE)?;
        let prov = || Provenance::job(job_id).owned_by(rec.user.as_deref());
        let st = |e: StoreError| e.to_string();

        self.store
            .transition(job_id, JobState::Fetching, json!({}))
            .map_err(st)?;
        let config_rec = self
            .registry
            .put_artifact(ArtifactKind::Config, cfg.render().as_bytes(), prov())
            .map_err(|e| e.to_string())?;
        self.add_artifact(job_id, &config_rec)?;
        let script_kind = match cfg.mode {
            Mode::Predict => ArtifactKind::Script,
            Mode::Rules => ArtifactKind::Rulefile,
        };
        let script_rec = self
            .registry
            .put_artifact(script_kind, script.as_bytes(), prov())
            .map_err(|e| e.to_string())?;
        self.add_artifact(job_id, &script_rec)?;

        let uploaded = dir.join(IMAGE_FILE);
        let reference = if uploaded.is_file() {
            uploaded.to_string_lossy().into_owned()
        } else {
            cfg.image.clone()
        };
        let fetch = || {
            fetch_image(
                &reference,
                cfg.image_digest.as_deref(),
                self.opts.max_image_bytes,
                &self.registry,
                prov(),
            )
        };
        let image = match fetch() {
            Err(e) if e.is_infrastructure() => {
                warn!(job = %job_id, error = %e, "retrying image fetch");
                fetch()
            }
            other => other,
        }
        .map_err(|e| format!("image fetch failed: {e}"))?;
        let image_rec = self
            .registry
            .record(&image.persistent_id)
            .ok_or("image record missing after fetch")?;
        self.add_artifact(job_id, &image_rec)?;
        self.store
            .update(job_id, None, |j| {
                j.image_digest = Some(image.digest.clone())
            })
            .map_err(st)?;
        let prepared = prepare_image(&image, &self.registry)
            .map_err(|e| format!("image unpack failed: {e}"))?;
        if cfg.mode == Mode::Predict {
            self.count_run(job_id, RunMode::Probe)?;
            check_image(
                &prepared,
                self.backend.as_ref(),
                &self.opts.root.join("scratch"),
            )
            .map_err(|e| e.to_string())?;
        }
        self.stage_completed(job_id, JobState::Fetching)?;

        self.store
            .transition(job_id, JobState::Running, json!({}))
            .map_err(st)?;
        let results = match self.plan(&cfg, &script)? {
            Plan::Predict { plan, graph } => {
                let label_type = plan.label_type.unwrap_or(LabelType::Dropout);
                let report = self.run_predict(rec, &cfg, &graph, &prepared, label_type, started)?;
                JobResults::Predict {
                    job_id: job_id.to_string(),
                    report,
                }
            }
            Plan::Rules(rules) => JobResults::Rules {
                job_id: job_id.to_string(),
                rules: self.run_rules(&rules)?,
            },
        };
        self.stage_completed(job_id, JobState::Running)?;

        self.store
            .transition(job_id, JobState::Archiving, json!({}))
            .map_err(st)?;
        let metrics = self
            .registry
            .put_artifact(ArtifactKind::Metrics, results.to_json().as_bytes(), prov())
            .map_err(|e| e.to_string())?;
        self.add_artifact(job_id, &metrics)?;
        self.store
            .update(job_id, None, |j| {
                j.result_id = Some(metrics.persistent_id.clone())
            })
            .map_err(st)?;
        self.stage_completed(job_id, JobState::Archiving)?;
        self.store
            .transition(
                job_id,
                JobState::Completed,
                json!({ "result_id": metrics.persistent_id }),
            )
            .map_err(st)?;
        info!(job = %job_id, elapsed_ms = started.elapsed().as_millis() as u64, "job completed");
        Ok(())
    }

    fn run_rules(&self, rules: &[ProductionRule]) -> Result<Vec<RuleResult>, String> {
        let sessions: Vec<_> = self.catalog.all_sessions().collect();
        let per_session: Vec<Vec<RuleTestResult>> = sessions
            .par_iter()
            .map(|(c, s)| {
                let labels = extract_labels(s, LabelType::Dropout)
                    .map_err(|e| format!("{}/{}: {e}", c.course_id, s.session_id))?;
                let activity = s
                    .bundle
                    .activity()
                    .map_err(|e| format!("{}/{}: {e}", c.course_id, s.session_id))?;
                rules
                    .iter()
                    .map(|r| {
                        tabulate(r, &activity, &labels)
                            .map(|t| test_rule(&t))
                            .map_err(|e| format!("{}/{}: {e}", c.course_id, s.session_id))
                    })
                    .collect()
            })
            .collect::<Result<_, String>>()?;
        Ok(rules
            .iter()
            .enumerate()
            .map(|(i, r)| RuleResult {
                rule: r.to_string(),
                report: aggregate_results(per_session.iter().map(|v| v[i].clone()).collect()),
            })
            .collect())
    }

    fn run_predict(
        &self,
        rec: &JobRecord,
        cfg: &ExperimentConfig,
        graph: &TaskGraph,
        image: &PreparedImage,
        label_type: LabelType,
        started: Instant,
    ) -> Result<MetricReport, String> {
        let job_id = rec.job_id.as_str();
        let dir = self.job_dir(job_id);
        let labels_dir = dir.join("labels");
        let mut holdout_labels = HashMap::new();
        for course in self.catalog.eligible_courses() {
            for session in &course.sessions {
                let table = extract_labels(session, label_type).map_err(|e| {
                    format!(
                        "labels for {}/{}: {e}",
                        course.course_id, session.session_id
                    )
                })?;
                let path = labels_dir.join(&course.course_id).join(&session.session_id);
                fs::create_dir_all(&path).map_err(|e| e.to_string())?;
                fs::write(path.join("labels.csv"), table.to_csv(label_type))
                    .map_err(|e| e.to_string())?;
                if session.is_holdout {
                    holdout_labels.insert(
                        (course.course_id.clone(), session.session_id.clone()),
                        table,
                    );
                }
            }
        }
        let work = dir.join("tasks");
        if work.exists() {
            fs::remove_dir_all(&work).map_err(|e| e.to_string())?;
        }
        let ctx = RunCtx {
            job_id,
            owner: rec.user.clone(),
            cache_enabled: cfg.cache,
            graph,
            image,
            label_type,
            work,
            labels_dir,
            holdout_labels,
            outputs: Mutex::new(HashMap::new()),
            metrics: Mutex::new(BTreeMap::new()),
            deadline: started + self.opts.job_timeout,
        };

        let deps = graph_deps(graph);
        let trace = schedule(&deps, self.opts.workers, |i| {
            let task = &graph.tasks[i];
            let set = |state: TaskState, failure: Option<String>, attempt: bool| {
                let _ = self.store.update(job_id, None, |j| {
                    let s = j.tasks.entry(task.task_id.clone()).or_insert(TaskStatus {
                        state,
                        attempts: 0,
                        failure: None,
                    });
                    s.state = state;
                    s.failure = failure;
                    if attempt {
                        s.attempts += 1;
                    }
                });
            };
            set(TaskState::Running, None, false);
            match self.run_task(&ctx, i, task, &|| set(TaskState::Running, None, true)) {
                Ok(state) => {
                    set(state, None, false);
                    Ok(())
                }
                Err(reason) => {
                    set(TaskState::Failed, Some(reason.clone()), false);
                    Err(format!("{}: {reason}", task.task_id))
                }
            }
        });
        for (t, outcome) in trace.outcomes.iter().enumerate() {
            if let super::scheduler::TaskOutcome::Skipped { .. } = outcome {
                let id = graph.tasks[t].task_id.clone();
                let _ = self.store.update(job_id, None, |j| {
                    if let Some(s) = j.tasks.get_mut(&id) {
                        s.state = TaskState::Skipped;
                    }
                });
            }
        }
        let failure = trace.outcomes.iter().find_map(|o| match o {
            super::scheduler::TaskOutcome::Failed { reason } => Some(reason.clone()),
            _ => None,
        });
        self.traces
            .lock()
            .expect("trace lock")
            .insert(job_id.to_string(), trace);
        if let Some(reason) = failure {
            return Err(format!("task {reason}"));
        }

        let metrics = ctx.metrics.into_inner().expect("metrics lock");
        if metrics.is_empty() {
            return Err("workflow produced no evaluated courses".into());
        }
        Ok(MetricReport {
            job_id: job_id.to_string(),
            label_type,
            rows: metrics
                .into_iter()
                .map(|(course_id, metrics)| MetricRow { course_id, metrics })
                .collect(),
        })
    }

    fn run_task(
        &self,
        ctx: &RunCtx,
        index: usize,
        task: &Task,
        attempt: &dyn Fn(),
    ) -> Result<TaskState, String> {
        if Instant::now() >= ctx.deadline {
            return Err("job timeout exceeded".into());
        }
        if task.stage == Stage::Evaluate {
            return self.evaluate(ctx, task).map(|_| TaskState::Succeeded);
        }
        let task_dir = ctx.work.join(work_name(index, &task.task_id));
        if let Some(source) = &task.forked_from {
            return self
                .fork_task(ctx, task, source, &task_dir)
                .map(|_| TaskState::Reused);
        }

        let upstream: Vec<(String, String)> = {
            let outputs = ctx.outputs.lock().expect("outputs lock");
            let mut v = Vec::new();
            for d in &task.depends_on {
                let dep = ctx
                    .graph
                    .task(d)
                    .ok_or_else(|| format!("unknown dependency {d}"))?;
                let out = outputs
                    .get(d)
                    .ok_or_else(|| format!("dependency {d} has no output"))?;
                v.push((
                    format!("{}@{}", output_kind(dep.stage), dep.scope),
                    out.digest.clone(),
                ));
            }
            v
        };
        let refs: Vec<(&str, &str)> = upstream
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        let label = (task.stage != Stage::Extract && task.stage != Stage::ExtractHoldout)
            .then_some(ctx.label_type.as_str());
        let key = StepCacheKey {
            stage: task.stage,
            granularity: task.granularity,
            scope: task.scope.clone(),
            image_digest: ctx.image.digest.clone(),
            dataset_version: self.catalog.dataset_version.clone(),
            params_digest: params_digest(label, &refs),
        };
        let kind = output_kind(task.stage);

        if ctx.cache_enabled {
            if let Some(entry) = self.cache.lookup(&key) {
                match self.reuse(ctx, task, &entry.persistent_id, kind, &task_dir) {
                    Ok(()) => {
                        let _ = self.store.update(ctx.job_id, None, |j| j.cache_hits += 1);
                        return Ok(TaskState::Reused);
                    }
                    Err(e) => {
                        warn!(task = %task.task_id, error = %e, "cached artifact unusable; re-running")
                    }
                }
            }
        }

        let spec = {
            let upstream = Upstream {
                outputs: ctx.outputs.lock().expect("outputs lock").clone(),
                labels_dir: &ctx.labels_dir,
            };
            resolve_mounts(task, ctx.graph, &self.catalog, &upstream).map_err(|e| e.to_string())?
        };
        let mut attempt_no = 0;
        let (run, output_dir) = loop {
            attempt_no += 1;
            let remaining = ctx.deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Err("job timeout exceeded".into());
            }
            let limits = ResourceLimits {
                wall_clock: self.opts.limits.wall_clock.min(remaining),
                ..self.opts.limits
            };
            let output_dir = task_dir.join(format!("attempt-{attempt_no}"));
            attempt();
            self.count_run(ctx.job_id, spec.mode)?;
            match run_sandboxed(
                &task.task_id,
                ctx.image,
                &spec,
                limits,
                self.backend.as_ref(),
                &self.opts.root.join("scratch"),
                &output_dir,
            ) {
                Ok(run) => break (run, output_dir),
                Err(e) if e.is_infrastructure() && attempt_no == 1 => {
                    warn!(task = %task.task_id, error = %e, "sandbox infrastructure error; retrying");
                }
                Err(e) => return Err(e.to_string()),
            }
        };
        let log_dir = task_dir.join("logs");
        if fs::create_dir_all(&log_dir).is_ok() {
            let _ = fs::write(log_dir.join("stdout"), &run.stdout);
            let _ = fs::write(log_dir.join("stderr"), &run.stderr);
        }
        if !run.success() {
            return Err(describe_failure(&run));
        }

        let path = output_dir.join(output_file(task.stage));
        let prov = ctx.provenance().task(&task.task_id);
        let record = if kind == ArtifactKind::Model {
            self.registry.put_dir(kind, &path, prov)
        } else {
            fs::read(&path)
                .map_err(|e| RegistryError::Storage {
                    path: path.clone(),
                    source: e,
                })
                .and_then(|bytes| self.registry.put_artifact(kind, &bytes, prov))
        }
        .map_err(|e| e.to_string())?;
        self.add_artifact(ctx.job_id, &record)?;
        self.cache
            .insert(key, kind, &record.persistent_id, &record.digest)
            .map_err(|e| format!("step cache: {e}"))?;
        ctx.outputs.lock().expect("outputs lock").insert(
            task.task_id.clone(),
            Output {
                path,
                digest: record.digest,
            },
        );
        Ok(TaskState::Succeeded)
    }

    /// Serves a task from an archived artifact, archiving it under this job.
    fn reuse(
        &self,
        ctx: &RunCtx,
        task: &Task,
        persistent_id: &str,
        kind: ArtifactKind,
        task_dir: &Path,
    ) -> Result<(), String> {
        let s = |e: RegistryError| e.to_string();
        let (_, bytes) = self
            .registry
            .get_artifact(persistent_id, &Access::trusted())
            .map_err(s)?;
        let record = self
            .registry
            .put_artifact(kind, &bytes, ctx.provenance().task(&task.task_id))
            .map_err(s)?;
        let path = if kind == ArtifactKind::Model {
            self.registry
                .materialize_dir(&record.persistent_id)
                .map_err(s)?
        } else {
            let p = task_dir.join("reused").join(output_file(task.stage));
            self.registry
                .materialize_file(&record.persistent_id, &p)
                .map_err(s)?;
            p
        };
        self.add_artifact(ctx.job_id, &record)?;
        ctx.outputs.lock().expect("outputs lock").insert(
            task.task_id.clone(),
            Output {
                path,
                digest: record.digest,
            },
        );
        Ok(())
    }

    fn fork_task(
        &self,
        ctx: &RunCtx,
        task: &Task,
        source: &str,
        task_dir: &Path,
    ) -> Result<(), String> {
        let src = self.job(source).map_err(|e| e.to_string())?;
        let plain = task.fork_source_task_id().expect("forked task");
        let nested = format!(
            "fork_features[{}_{}]@{}",
            task.stage, task.granularity, task.scope
        );
        let artifact = src
            .artifact(&plain, ArtifactKind::Features)
            .or_else(|| src.artifact(&nested, ArtifactKind::Features))
            .ok_or_else(|| format!("fork source {source} has no features for {}", task.scope))?;
        self.reuse(
            ctx,
            task,
            &artifact.persistent_id,
            ArtifactKind::Features,
            task_dir,
        )
    }

    fn evaluate(&self, ctx: &RunCtx, task: &Task) -> Result<(), String> {
        let (course, session) = match (task.course_id(), task.session_id()) {
            (Some(c), Some(s)) => (c.to_string(), s.to_string()),
            _ => return Err("evaluate task is not bound to a holdout session".into()),
        };
        let test = task
            .depends_on
            .first()
            .ok_or("evaluate task has no test dependency")?;
        let path = ctx
            .outputs
            .lock()
            .expect("outputs lock")
            .get(test)
            .map(|o| o.path.clone())
            .ok_or_else(|| format!("predictions of {test} missing"))?;
        let text = fs::read_to_string(&path).map_err(|e| format!("reading predictions: {e}"))?;
        let predictions = parse_predictions(&text).map_err(|e| format!("predictions: {e}"))?;
        let labels = ctx
            .holdout_labels
            .get(&(course.clone(), session))
            .ok_or("holdout labels missing")?;
        let set = match ctx.label_type {
            LabelType::Dropout => classification_report(&predictions, labels),
            LabelType::DropoutWeek => regression_report(&predictions, labels),
        }
        .map_err(|e| format!("evaluation: {e}"))?;
        ctx.metrics
            .lock()
            .expect("metrics lock")
            .insert(course, set);
        Ok(())
    }

    /// Summary results of a completed job.
    pub fn results(&self, job_id: &str) -> Result<JobResults, OrchestratorError> {
        let rec = self.job(job_id)?;
        if !rec.state.is_terminal() {
            return Err(OrchestratorError::WrongState {
                job_id: job_id.to_string(),
                state: rec.state,
                expected: "completed or failed",
            });
        }
        let id = rec.result_id.ok_or_else(|| OrchestratorError::NoResults {
            job_id: job_id.to_string(),
            reason: rec
                .failure_reason
                .unwrap_or_else(|| "no result artifact".into()),
        })?;
        let (_, bytes) = self.registry.get_artifact(&id, &Access::trusted())?;
        serde_json::from_slice(&bytes).map_err(|e| OrchestratorError::NoResults {
            job_id: job_id.to_string(),
            reason: format!("result artifact unreadable: {e}"),
        })
    }

    /// Wilcoxon signed-rank comparison of two predict jobs on `metric`.
    pub fn compare(&self, a: &str, b: &str, metric: &str) -> Result<TestResult, OrchestratorError> {
        let ra = self.results(a)?;
        let rb = self.results(b)?;
        let (Some(ma), Some(mb)) = (ra.metric_report(), rb.metric_report()) else {
            return Err(OrchestratorError::Compare(
                "both jobs must be predict jobs".into(),
            ));
        };
        compare_jobs(ma, mb, metric).map_err(|e| OrchestratorError::Compare(e.to_string()))
    }
}
