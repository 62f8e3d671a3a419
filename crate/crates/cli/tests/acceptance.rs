//! Platform acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Context};
use common::*;
use morf_client::Client;
use morf_core::catalog::{
    designate_holdouts, extract_labels, resolve_mounts, Catalog, Course, LabelRow, LabelTable,
    MountSpec, RunMode, Session, UpstreamArtifacts,
};
use morf_core::dsl::{
    expand_tasks, parse_script, render_plan, validate_plan, DslErrorKind, Granularity, LabelType,
    PlanErrorKind, Stage, TaskGraph, WorkflowStep,
};
use morf_core::eval::{
    auc, classification_report, cohens_kappa, Confusion, Metric, MetricReport, PredictionRow,
};
use morf_core::orchestrator::{
    schedule, JobRecord, JobState, Orchestrator, OrchestratorOptions, TaskOutcome,
};
use morf_core::registry::{Access, ArtifactKind, Provenance, Registry, RegistryError};
use morf_core::rules::{aggregate_results, evaluate_rule, parse_rule, test_rule, ContingencyTable};
use morf_core::synth::{write_course, CourseSpec};
use morf_server::{AppState, Auth};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Check = anyhow::Result<String>;

const USER_TOKEN: &str = "tok-researcher";
const ADMIN_TOKEN: &str = "tok-admin";
const EMPTY_SHA256: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";
const TOL: f64 = 1e-12;

fn main() {
    let started = Instant::now();
    let golden = Golden::run().map_err(|e| format!("{e:#}"));
    let criteria: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("golden run", Box::new(|| golden_run(&golden))),
        ("metric oracles", Box::new(metric_oracles)),
        ("execute-against privacy", Box::new(|| privacy(&golden))),
        (
            "caching and forking",
            Box::new(|| caching_and_forking(&golden)),
        ),
        ("scheduler", Box::new(scheduler)),
        ("workflow dsl", Box::new(dsl)),
        ("production rules", Box::new(production_rules)),
        (
            "registry integrity",
            Box::new(|| registry_integrity(&golden)),
        ),
        ("holdout discipline", Box::new(holdout_discipline)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(anyhow!("panicked: {}", panic_message(&p))));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} {name} ({secs:.1}s): {detail}", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL {} {name} ({secs:.1}s): {e:#}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

fn golden(g: &Result<Golden, String>) -> anyhow::Result<&Golden> {
    g.as_ref()
        .map_err(|e| anyhow!("golden run setup failed: {e}"))
}

/// Equal, both NA, or within `TOL`.
fn close(a: Metric, b: Option<f64>) -> bool {
    match (a.get(), b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= TOL,
        _ => false,
    }
}

// ---------------------------------------------------------------------------
// Golden run: a gateway over the 2×3 catalog driven through the `morf` CLI.

struct Golden {
    dir: tempfile::TempDir,
    rt: tokio::runtime::Runtime,
    orch: Arc<Orchestrator>,
    catalog: Catalog,
    cli: CliRunner,
    first: JobRecord,
    elapsed: Duration,
    forced: JobRecord,
    cached: JobRecord,
    forked: JobRecord,
}

impl Golden {
    fn run() -> anyhow::Result<Golden> {
        let dir = tempfile::tempdir()?;
        let catalog = golden_catalog(&dir.path().join("catalog"), SENTINEL);
        let mut opts = OrchestratorOptions::new(dir.path().join("state"));
        opts.workers = 4;
        opts.backend = "namespace".into();
        let orch = Orchestrator::open(opts, catalog.clone())?;

        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
        let url = format!("http://{}", listener.local_addr()?);
        let auth = Auth::open()
            .with_token(USER_TOKEN, "researcher", false)
            .with_token(ADMIN_TOKEN, "admin", true);
        rt.spawn(morf_server::serve(
            listener,
            AppState {
                orch: orch.clone(),
                auth: Arc::new(auth),
            },
        ));

        let files = dir.path().join("files");
        fs::create_dir_all(&files)?;
        let write = |name: &str, bytes: &[u8]| -> anyhow::Result<PathBuf> {
            let p = files.join(name);
            fs::write(&p, bytes)?;
            Ok(p)
        };
        let cfg = write("golden.ini", config("").as_bytes())?;
        let forced_cfg = write("forced.ini", config("cache = false\n").as_bytes())?;
        let listing = write("listing.txt", LISTING.as_bytes())?;
        let tail = write("fork_tail.txt", FORK_TAIL.as_bytes())?;
        let image = write("reference.tar", &reference(None))?;

        let cli = CliRunner {
            url,
            log: Mutex::new(Vec::new()),
        };
        let submit_args = |config: &Path, script: &Path| -> Vec<PathBuf> {
            [
                "--config".into(),
                config.into(),
                "--script".into(),
                script.into(),
                "--image".into(),
                image.clone(),
            ]
            .into_iter()
            .chain(["--wait".into(), "--timeout".into(), "600".into()])
            .collect()
        };

        let submit = |args: Vec<PathBuf>| -> anyhow::Result<JobRecord> {
            let job = cli.submit(&args)?;
            Ok(orch.job(&job)?)
        };
        let t = Instant::now();
        let first = submit([vec![PathBuf::from("submit")], submit_args(&cfg, &listing)].concat())?;
        let elapsed = t.elapsed();
        let forced = submit(
            [
                vec![PathBuf::from("submit")],
                submit_args(&forced_cfg, &listing),
            ]
            .concat(),
        )?;
        let cached = submit([vec![PathBuf::from("submit")], submit_args(&cfg, &listing)].concat())?;
        let fork_cmd = vec![PathBuf::from("fork"), PathBuf::from(&first.job_id)];
        let forked = submit([fork_cmd, submit_args(&cfg, &tail)].concat())?;
        let g = Golden {
            dir,
            rt,
            orch,
            catalog,
            cli,
            first,
            elapsed,
            forced,
            cached,
            forked,
        };
        let (first, forced) = (g.first.job_id.clone(), g.forced.job_id.clone());

        // Read-only commands a researcher would use after the run.
        let restricted = g
            .orch
            .registry()
            .records_for_job(&first)
            .into_iter()
            .find(|r| r.kind.is_restricted())
            .context("golden job has no restricted artifact")?;
        let metrics_id = g
            .first
            .result_id
            .clone()
            .context("golden job has no result")?;
        for args in [
            vec!["status", &first],
            vec!["events", &first],
            vec!["results", &first],
            vec!["results", &first, "--csv"],
            vec!["artifacts", "ls", &first],
            vec!["artifacts", "get", &metrics_id],
            vec!["artifacts", "get", &restricted.persistent_id],
            vec!["artifacts", "fsck"],
            vec!["data", "ls"],
            vec!["compare", &first, &forced],
        ] {
            g.cli.morf(USER_TOKEN, &args);
        }
        Ok(g)
    }

    fn client(&self, token: Option<&str>) -> Client {
        Client::new(&self.cli.url, token.map(str::to_string))
    }

    fn report(&self, job: &JobRecord) -> anyhow::Result<MetricReport> {
        self.orch
            .results(&job.job_id)?
            .metric_report()
            .cloned()
            .context("not a predict job")
    }
}

/// Runs the `morf` CLI against the gateway and keeps every output.
struct CliRunner {
    url: String,
    /// Every invocation as (command line, stdout + stderr).
    log: Mutex<Vec<(String, String)>>,
}

impl CliRunner {
    /// Runs the CLI and records its combined output.
    fn morf<S: AsRef<OsStr>>(&self, token: &str, args: &[S]) -> (bool, String) {
        let out = Command::new(morf_binary())
            .args(args)
            .env("MORF_URL", &self.url)
            .env("MORF_TOKEN", token)
            .env("RUST_LOG", "info")
            .output()
            .expect("running morf");
        let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
        let text = format!("{stdout}{}", String::from_utf8_lossy(&out.stderr));
        let line = args
            .iter()
            .map(|a| a.as_ref().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join(" ");
        self.log.lock().unwrap().push((line, text));
        (out.status.success(), stdout)
    }

    /// Submits through the CLI and returns the job id.
    fn submit(&self, args: &[PathBuf]) -> anyhow::Result<String> {
        let (ok, stdout) = self.morf(USER_TOKEN, args);
        let first: Value = serde_json::Deserializer::from_str(&stdout)
            .into_iter::<Value>()
            .next()
            .context("no submit response")??;
        let job = first["job_id"].as_str().context("no job id")?.to_string();
        ensure!(ok, "morf {args:?} failed for job {job}: {stdout}");
        Ok(job)
    }
}

fn golden_run(g: &Result<Golden, String>) -> Check {
    let g = golden(g)?;
    ensure!(
        g.first.state == JobState::Completed,
        "golden job {:?}",
        g.first.failure_reason
    );
    let report = g.report(&g.first)?;
    ensure!(report.rows.len() == 2, "{} course rows", report.rows.len());
    let names = report.metric_names();
    ensure!(names.len() == 8, "{} metrics", names.len());
    let mut aucs = Vec::new();
    for row in &report.rows {
        for name in names {
            let m = row.metrics.get(name).context("metric missing")?;
            ensure!(!m.is_na(), "{}: {name} is NA", row.course_id);
        }
        let a = row.metrics.classification.auc.get().unwrap_or(f64::NAN);
        ensure!(a >= 0.70, "{}: AUC {a:.4} < 0.70", row.course_id);
        aucs.push(format!("{}={a:.4}", row.course_id));
    }
    ensure!(
        g.elapsed < Duration::from_secs(300),
        "run took {:?}",
        g.elapsed
    );
    ensure!(g.orch.options().workers == 4);

    // Forced re-execution: every sandbox runs again, outputs must not move.
    ensure!(
        g.forced.state == JobState::Completed,
        "re-run {:?}",
        g.forced.failure_reason
    );
    ensure!(
        g.forced.cache_hits == 0 && g.forced.sandbox_runs_for("extract") == 6,
        "re-run reused steps"
    );
    let again = g.report(&g.forced)?;
    ensure!(
        g.orch.results(&g.first.job_id)?.to_csv() == g.orch.results(&g.forced.job_id)?.to_csv(),
        "results CSV differs"
    );
    for (a, b) in report.rows.iter().zip(&again.rows) {
        ensure!(a.course_id == b.course_id);
        for name in names {
            ensure!(
                close(
                    a.metrics.get(name).unwrap(),
                    b.metrics.get(name).unwrap().get()
                ),
                "{}: {name} differs",
                a.course_id
            );
        }
    }
    let mut compared = 0;
    for r in &g.first.artifacts {
        if let Some(task) = &r.task_id {
            let other = g
                .forced
                .artifact(task, r.kind)
                .context("re-run artifact missing")?;
            ensure!(other.digest == r.digest, "{task} {} digest differs", r.kind);
            compared += 1;
        }
    }
    Ok(format!(
        "2 rows x 8 metrics, AUC {}, {:.1}s on 4 workers, re-run identical ({compared} artifacts, metrics to 1e-12)",
        aucs.join(" "),
        g.elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// Metric oracles.

fn brute_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0u64);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Kappa from individual (actual, predicted) pairs.
fn brute_kappa(pairs: &[(u8, u8)]) -> Option<f64> {
    let n = pairs.len() as f64;
    let agree = pairs.iter().filter(|(a, p)| a == p).count() as f64 / n;
    let mut chance = 0.0;
    for class in [0u8, 1] {
        let a = pairs.iter().filter(|(x, _)| *x == class).count() as f64 / n;
        let p = pairs.iter().filter(|(_, x)| *x == class).count() as f64 / n;
        chance += a * p;
    }
    (chance != 1.0).then(|| (agree - chance) / (1.0 - chance))
}

fn brute_ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let score = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.5) {
            rng.random_range(0..5) as f64 / 4.0
        } else {
            rng.random::<f64>()
        }
    };
    for trial in 0..1000 {
        // auc
        let n = rng.random_range(1..40);
        let scores: Vec<f64> = (0..n).map(|_| score(&mut rng)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        ensure!(
            close(auc(&scores, &labels)?, brute_auc(&scores, &labels)),
            "auc trial {trial}"
        );

        // cohens_kappa
        let m: [[i64; 2]; 2] = [
            [rng.random_range(0..40), rng.random_range(0..40)],
            [rng.random_range(0..40), rng.random_range(0..40)],
        ];
        let mut pairs = Vec::new();
        for (count, pair) in [
            (m[0][0], (1, 1)),
            (m[0][1], (1, 0)),
            (m[1][0], (0, 1)),
            (m[1][1], (0, 0)),
        ] {
            pairs.extend(std::iter::repeat_n(pair, count as usize));
        }
        if !pairs.is_empty() {
            let k = cohens_kappa(&Confusion::from_matrix(m)?)?;
            ensure!(close(k, brute_kappa(&pairs)), "kappa trial {trial}: {m:?}");
        }

        // classification_report
        let users = rng.random_range(1..40);
        let rows: Vec<LabelRow> = (0..users)
            .map(|i| LabelRow {
                user_id: format!("u{i:03}"),
                dropout: rng.random_range(0..2),
                dropout_week: rng.random_range(1..7),
            })
            .collect();
        let labels = LabelTable { weeks: 6, rows };
        let mut preds: Vec<PredictionRow> = Vec::new();
        for i in 0..users + 5 {
            for _ in 0..rng.random_range(0..3) {
                preds.push(PredictionRow {
                    user_id: format!("u{i:03}"),
                    score: score(&mut rng),
                    predicted_label: rng.random_range(0..2) as f64,
                });
            }
        }
        preds.shuffle(&mut rng);
        check_report(&preds, &labels).with_context(|| format!("report trial {trial}"))?;
    }

    let worked_auc = auc(&[0.8, 0.6, 0.55, 0.3], &[1, 0, 1, 0])?;
    ensure!(
        worked_auc == Metric::value(0.75),
        "worked AUC {worked_auc:?}"
    );
    let worked_kappa = cohens_kappa(&Confusion::from_matrix([[40, 10], [20, 30]])?)?;
    ensure!(
        worked_kappa == Metric::value(0.4),
        "worked kappa {worked_kappa:?}"
    );
    let chi = test_rule(&ContingencyTable::new(30, 10, 10, 30));
    ensure!(
        chi.statistic == Metric::value(20.0),
        "worked chi-square {:?}",
        chi.statistic
    );
    ensure!(chi.p_value.get().is_some_and(|p| p < 1e-4) && chi.direction == 1);
    Ok("1000 randomized inputs each for auc, kappa and the report within 1e-12; AUC 0.75, kappa 0.4, chi2 20 exact".into())
}

fn check_report(preds: &[PredictionRow], labels: &LabelTable) -> anyhow::Result<()> {
    let label_of: HashMap<&str, u8> = labels
        .rows
        .iter()
        .map(|r| (r.user_id.as_str(), r.dropout))
        .collect();
    let mut seen = HashSet::new();
    let joined: Vec<(f64, u8, u8)> = preds
        .iter()
        .filter(|p| label_of.contains_key(p.user_id.as_str()) && seen.insert(p.user_id.clone()))
        .map(|p| {
            (
                p.score,
                label_of[p.user_id.as_str()],
                p.predicted_label as u8,
            )
        })
        .collect();
    let got = classification_report(preds, labels);
    if joined.is_empty() {
        ensure!(got.is_err(), "empty join accepted");
        return Ok(());
    }
    let m = got?;
    ensure!(m.n == joined.len() && m.missing_predictions == labels.rows.len() - joined.len());
    let count = |f: &dyn Fn(&(f64, u8, u8)) -> bool| joined.iter().filter(|x| f(x)).count();
    let tp = count(&|x| x.1 == 1 && x.2 == 1);
    let tn = count(&|x| x.1 == 0 && x.2 == 0);
    let fp = count(&|x| x.1 == 0 && x.2 == 1);
    let fn_ = count(&|x| x.1 == 1 && x.2 == 0);
    let scores: Vec<f64> = joined.iter().map(|x| x.0).collect();
    let actual: Vec<u8> = joined.iter().map(|x| x.1).collect();
    let pairs: Vec<(u8, u8)> = joined.iter().map(|x| (x.1, x.2)).collect();
    let eps = 1e-15;
    let log_loss = joined
        .iter()
        .map(|&(s, y, _)| {
            let p = s.max(eps).min(1.0 - eps);
            -(y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / joined.len() as f64;
    let c = &m.classification;
    let expect = [
        ("accuracy", c.accuracy, brute_ratio(tp + tn, joined.len())),
        ("precision", c.precision, brute_ratio(tp, tp + fp)),
        ("recall", c.recall, brute_ratio(tp, tp + fn_)),
        ("specificity", c.specificity, brute_ratio(tn, tn + fp)),
        ("f1", c.f1, brute_ratio(2 * tp, 2 * tp + fp + fn_)),
        ("auc", c.auc, brute_auc(&scores, &actual)),
        ("cohens_kappa", c.cohens_kappa, brute_kappa(&pairs)),
        ("log_loss", c.log_loss, Some(log_loss)),
    ];
    for (name, got, want) in expect {
        ensure!(close(got, want), "{name}: {got:?} vs {want:?}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Privacy.

fn privacy(g: &Result<Golden, String>) -> Check {
    let g = golden(g)?;
    // The grep must be able to fail: sentinel ids are in the raw data and in
    // intermediates a trusted user can fetch.
    let raw = fs::read_to_string(g.dir.path().join("catalog/course01/001/clickstream.jsonl"))?;
    ensure!(raw.contains(SENTINEL), "sentinel not planted");
    let features = g
        .first
        .artifacts
        .iter()
        .find(|a| a.kind == ArtifactKind::Features)
        .context("no features artifact")?;
    let (status, body) = g.rt.block_on(
        g.client(Some(ADMIN_TOKEN))
            .get_raw(&format!("/artifacts/{}", features.persistent_id)),
    )?;
    ensure!(
        status.as_u16() == 200 && body.contains(SENTINEL),
        "trusted control read failed"
    );

    let mut responses = 0;
    let mut leaks = Vec::new();
    for token in [Some(USER_TOKEN), None] {
        let client = g.client(token);
        let mut paths: Vec<String> = ["/health", "/jobs", "/courses", "/registry/fsck"]
            .into_iter()
            .map(String::from)
            .collect();
        paths.push(format!(
            "/compare?a={}&b={}&metric=auc",
            g.first.job_id, g.forced.job_id
        ));
        for job in [&g.first, &g.forced, &g.cached, &g.forked] {
            let id = &job.job_id;
            paths.extend([
                format!("/jobs/{id}"),
                format!("/jobs/{id}/events"),
                format!("/jobs/{id}/results"),
                format!("/jobs/{id}/results?format=csv"),
                format!("/jobs/{id}/artifacts"),
            ]);
            for rec in g.orch.registry().records_for_job(id) {
                paths.push(format!("/artifacts/{}", rec.persistent_id));
            }
        }
        for path in paths {
            let (status, body) = g.rt.block_on(client.get_raw(&path))?;
            responses += 1;
            if body.contains(SENTINEL) {
                leaks.push(format!("{path} ({status})"));
            }
            if token.is_none() && path != "/health" {
                ensure!(status.as_u16() == 401, "anonymous {path} answered {status}");
            }
        }
    }
    let log = g.cli.log.lock().unwrap();
    for (line, text) in log.iter() {
        if text.contains(SENTINEL) {
            leaks.push(format!("morf {line}"));
        }
    }
    ensure!(leaks.is_empty(), "sentinel leaked in: {}", leaks.join(", "));

    let test_mounts = test_mode_mounts(&g.catalog)?;

    let mut violations = Vec::new();
    for backend in ["namespace", "bundle"] {
        for (behavior, kind) in [
            ("egress", "network:"),
            ("readonly-write", "readonly-write:"),
        ] {
            let p = platform(backend);
            let rec = p.run(&config(""), LISTING, reference(Some(behavior)));
            ensure!(
                rec.state == JobState::Failed,
                "{backend}/{behavior}: job {:?}",
                rec.state
            );
            let recorded = rec
                .tasks
                .values()
                .filter_map(|t| t.failure.as_deref())
                .any(|f| f.contains(kind));
            ensure!(
                recorded,
                "{backend}/{behavior}: no {kind} violation in {:?}",
                rec.tasks
            );
            violations.push(format!("{backend}/{behavior}"));
        }
    }
    Ok(format!(
        "{responses} API responses and {} CLI runs free of the sentinel; {test_mounts} test mounts without labels; violations recorded for {}",
        log.len(),
        violations.join(", ")
    ))
}

struct FakeUpstream;

impl UpstreamArtifacts for FakeUpstream {
    fn task_output(&self, task_id: &str) -> Option<PathBuf> {
        Some(Path::new("/upstream").join(task_id))
    }
    fn labels(&self, course: &str, session: &str) -> Option<PathBuf> {
        Some(PathBuf::from(format!(
            "/labels/{course}/{session}/labels.csv"
        )))
    }
}

fn graph_for(script: &str, catalog: &Catalog) -> anyhow::Result<TaskGraph> {
    let plan = validate_plan(parse_script(script)?, None)?;
    Ok(expand_tasks(&plan, catalog)?)
}

/// Resolves every test task of the golden workflow and counts them.
fn test_mode_mounts(catalog: &Catalog) -> anyhow::Result<usize> {
    let graph = graph_for(LISTING, catalog)?;
    let mut n = 0;
    for task in graph.tasks.iter().filter(|t| t.stage == Stage::Test) {
        let spec = resolve_mounts(task, &graph, catalog, &FakeUpstream)?;
        ensure!(spec.mode == RunMode::Test);
        for m in &spec.read_only_mounts {
            ensure!(
                !m.target.contains("/labels") && !m.source.starts_with("/labels"),
                "{} mounts labels: {m:?}",
                task.task_id
            );
        }
        n += 1;
    }
    ensure!(n == 2, "{n} test tasks");
    Ok(n)
}

// ---------------------------------------------------------------------------
// Caching and forking.

fn caching_and_forking(g: &Result<Golden, String>) -> Check {
    let g = golden(g)?;
    let c = &g.cached;
    ensure!(
        c.state == JobState::Completed,
        "cached re-run {:?}",
        c.failure_reason
    );
    let (extract, train) = (c.sandbox_runs_for("extract"), c.sandbox_runs_for("train"));
    ensure!(
        extract == 0 && train == 0,
        "re-run ran {extract} extract and {train} train sandboxes"
    );

    let f = &g.forked;
    ensure!(
        f.state == JobState::Completed,
        "fork {:?}",
        f.failure_reason
    );
    ensure!(
        f.forked_from.as_deref() == Some(g.first.job_id.as_str()),
        "fork source {:?}",
        f.forked_from
    );
    ensure!(f.sandbox_runs_for("extract") == 0, "fork re-extracted");
    let (a, b) = (g.report(&g.first)?, g.report(f)?);
    ensure!(
        a.label_type == b.label_type && a.rows == b.rows,
        "forked report differs"
    );
    Ok(format!(
        "re-run: 0 extract/train sandboxes, {} cache hits; fork of {} reproduces the MetricReport",
        c.cache_hits, g.first.job_id
    ))
}

// ---------------------------------------------------------------------------
// Scheduler.

fn scheduler() -> Check {
    const UNIT: Duration = Duration::from_millis(200);
    let deps = vec![Vec::new(); 10];
    let trace = schedule(&deps, 5, |_| {
        std::thread::sleep(UNIT);
        Ok(())
    });
    trace.check(&deps).map_err(|e| anyhow!(e))?;
    let units = trace.makespan.as_secs_f64() / UNIT.as_secs_f64();
    ensure!(
        (units - 2.0).abs() <= 1.0,
        "10 tasks on 5 workers took {units:.2} units"
    );
    ensure!(
        trace.max_concurrency() == 5,
        "peak concurrency {}",
        trace.max_concurrency()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut failed, mut skipped) = (0, 0);
    for trial in 0..200 {
        let n = rng.random_range(1..30);
        let deps: Vec<Vec<usize>> = (0..n)
            .map(|t| (0..t).filter(|_| rng.random_bool(0.15)).collect())
            .collect();
        let failing: HashSet<usize> = (0..n).filter(|_| rng.random_bool(0.15)).collect();
        let workers = rng.random_range(1..7);
        let trace = schedule(&deps, workers, |t| {
            std::thread::sleep(Duration::from_micros(200 * (t as u64 % 4)));
            if failing.contains(&t) {
                Err(format!("injected failure in {t}"))
            } else {
                Ok(())
            }
        });
        trace
            .check(&deps)
            .map_err(|e| anyhow!("trial {trial}: {e}"))?;
        ensure!(
            trace.max_concurrency() <= workers,
            "trial {trial}: worker bound exceeded"
        );
        // Independent expectation: a task runs iff all dependencies succeeded.
        let mut expected: Vec<u8> = Vec::with_capacity(n);
        for t in 0..n {
            let blocked = deps[t].iter().any(|&d| expected[d] != 0);
            expected.push(if blocked {
                2
            } else if failing.contains(&t) {
                1
            } else {
                0
            });
        }
        for (t, outcome) in trace.outcomes.iter().enumerate() {
            let got = match outcome {
                TaskOutcome::Succeeded => 0,
                TaskOutcome::Failed { .. } => 1,
                TaskOutcome::Skipped { blocked_by } => {
                    ensure!(
                        matches!(trace.outcomes[*blocked_by], TaskOutcome::Failed { .. }),
                        "trial {trial}: task {t} blocked by non-failed {blocked_by}"
                    );
                    2
                }
            };
            ensure!(
                got == expected[t],
                "trial {trial}: task {t} outcome {outcome:?}"
            );
        }
        failed += expected.iter().filter(|&&e| e == 1).count();
        skipped += expected.iter().filter(|&&e| e == 2).count();
    }
    Ok(format!(
        "10 unit tasks on 5 workers in {units:.2} units; 200 injection trials ({failed} failures, {skipped} skips) match the dependency oracle within the worker bound"
    ))
}

// ---------------------------------------------------------------------------
// DSL.

#[derive(Debug, PartialEq)]
enum Expected {
    Dsl(DslErrorKind),
    Plan(PlanErrorKind),
}

fn invalid_corpus() -> Vec<(&'static str, Expected)> {
    use DslErrorKind as D;
    use Expected::{Dsl, Plan};
    use PlanErrorKind as P;
    vec![
        ("extract_session()\n$", Dsl(D::Lexical)),
        ("extract_session();", Dsl(D::Lexical)),
        ("train_course(label_type = 'dropout)", Dsl(D::Lexical)),
        ("extract_session()\n@train", Dsl(D::Lexical)),
        ("extract_session(1)", Dsl(D::Lexical)),
        ("extract_session(", Dsl(D::Syntax)),
        ("extract_session)", Dsl(D::Syntax)),
        ("extract_session", Dsl(D::Syntax)),
        ("train_course(label_type 'dropout')", Dsl(D::Syntax)),
        ("train_course(label_type = dropout)", Dsl(D::Syntax)),
        ("train_course(label_type = 'dropout',)", Dsl(D::Syntax)),
        ("= extract_session()", Dsl(D::Syntax)),
        ("extract_week()", Dsl(D::UnknownStatement)),
        ("train_student(label_type = 'dropout')", Dsl(D::UnknownStatement)),
        ("evaluate_session(label_type = 'dropout')", Dsl(D::UnknownStatement)),
        ("extract_session(label_type = 'dropout')", Dsl(D::UnknownParameter)),
        ("train_course(model = 'forest')", Dsl(D::UnknownParameter)),
        ("fork_features()", Dsl(D::MissingParameter)),
        ("train_course(label_type = 'grades')", Dsl(D::InvalidValue)),
        ("fork_features(job = '')", Dsl(D::InvalidValue)),
        ("extract_session()\nextract_session()", Dsl(D::DuplicateStatement)),
        ("train_course(label_type = 'dropout', label_type = 'dropout')", Dsl(D::DuplicateParameter)),
        ("", Dsl(D::EmptyPlan)),
        ("# comments only\n", Dsl(D::EmptyPlan)),
        ("train_course(label_type = 'dropout')", Plan(P::Ordering)),
        ("extract_session()\ntest_course(label_type = 'dropout')", Plan(P::Ordering)),
        (
            "extract_session()\nextract_holdout_session()\ntrain_course(label_type = 'dropout')\nevaluate_course(label_type = 'dropout')",
            Plan(P::Ordering),
        ),
        (
            "extract_session()\nextract_holdout_session()\ntrain_session(label_type = 'dropout')\ntest_course(label_type = 'dropout')",
            Plan(P::GranularityMismatch),
        ),
        (
            "extract_session()\nextract_holdout_session()\ntrain_course()\ntest_course(label_type = 'dropout')",
            Plan(P::MissingLabelType),
        ),
        ("fork_features(job = 'j-0001')\nextract_session()", Plan(P::ForkWithExtract)),
    ]
}

fn classify(script: &str) -> Option<Expected> {
    match parse_script(script) {
        Err(e) => Some(Expected::Dsl(e.kind)),
        Ok(plan) => validate_plan(plan, None)
            .err()
            .map(|e| Expected::Plan(e.kind)),
    }
}

/// A syntactically valid script with random surface layout, and its steps.
fn random_script(rng: &mut ChaCha8Rng) -> (String, Vec<WorkflowStep>) {
    let mut statements = morf_core::dsl::recognized_statements();
    statements.shuffle(rng);
    let take = rng.random_range(1..=statements.len().min(8));
    let mut text = String::new();
    let mut steps = Vec::new();
    for (name, stage, granularity) in statements.into_iter().take(take) {
        let mut step = WorkflowStep::new(stage, granularity);
        let mut args = Vec::new();
        if matches!(stage, Stage::Train | Stage::Test | Stage::Evaluate) && rng.random_bool(0.8) {
            let lt = if rng.random_bool(0.5) {
                LabelType::Dropout
            } else {
                LabelType::DropoutWeek
            };
            step = step.with_label_type(lt);
            args.push(("label_type", lt.as_str().to_string()));
        }
        if stage == Stage::ForkFeatures {
            let job = format!("j-{:04}", rng.random_range(0..10000));
            step.fork_source = Some(job.clone());
            args.push(("job", job));
        }
        if rng.random_bool(0.2) {
            text.push_str("# step\n");
        }
        let pad = |rng: &mut ChaCha8Rng| " ".repeat(rng.random_range(0..3));
        text.push_str(&name);
        text.push_str(&pad(rng));
        text.push('(');
        let rendered: Vec<String> = args
            .iter()
            .map(|(k, v)| {
                let q = ["'", "\""][rng.random_range(0..2)];
                format!("{}{k}{}={}{q}{v}{q}", pad(rng), pad(rng), pad(rng))
            })
            .collect();
        text.push_str(&rendered.join(","));
        text.push_str(")\n");
        if rng.random_bool(0.3) {
            text.push('\n');
        }
        steps.push(step);
    }
    (text, steps)
}

fn dsl() -> Check {
    let plan = parse_script(LISTING)?;
    let shape: Vec<(Stage, Option<Granularity>, Option<LabelType>)> = plan
        .steps
        .iter()
        .map(|s| (s.stage, s.granularity, s.label_type()))
        .collect();
    let d = Some(LabelType::Dropout);
    ensure!(
        shape
            == [
                (Stage::Extract, Some(Granularity::Session), None),
                (Stage::ExtractHoldout, Some(Granularity::Session), None),
                (Stage::Train, Some(Granularity::Course), d),
                (Stage::Test, Some(Granularity::Course), d),
                (Stage::Evaluate, Some(Granularity::Course), d),
            ],
        "listing plan {shape:?}"
    );
    validate_plan(plan, None)?;

    let corpus = invalid_corpus();
    ensure!(corpus.len() == 30);
    for (script, expected) in &corpus {
        let got = classify(script);
        ensure!(
            got.as_ref() == Some(expected),
            "{script:?}: expected {expected:?}, got {got:?}"
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..500 {
        let (text, steps) = random_script(&mut rng);
        let parsed = parse_script(&text).with_context(|| format!("trial {trial}: {text:?}"))?;
        ensure!(parsed.steps == steps, "trial {trial}: parse of {text:?}");
        let rendered = render_plan(&steps);
        let reparsed = parse_script(&rendered)?;
        ensure!(
            reparsed.steps == steps,
            "trial {trial}: parse(render) of {rendered:?}"
        );
        ensure!(
            reparsed.render() == rendered,
            "trial {trial}: render not canonical"
        );
    }
    Ok("listing gives the 5-step plan; 30 invalid scripts give their error classes; 500 parse/render round-trips".into())
}

// ---------------------------------------------------------------------------
// Production rules.

fn rule_results(
    spec: &CourseSpec,
    rule: &str,
) -> anyhow::Result<Vec<morf_core::rules::RuleTestResult>> {
    let dir = tempfile::tempdir()?;
    let bundles = write_course(spec, dir.path())?;
    let rule = parse_rule(rule)?;
    let mut out = Vec::new();
    for (bundle, session_id) in bundles.into_iter().zip(spec.session_ids()) {
        let session = Session {
            session_id,
            weeks: spec.weeks,
            bundle,
            is_holdout: false,
        };
        let labels = extract_labels(&session, LabelType::Dropout)?;
        out.push(test_rule(&evaluate_rule(&rule, &session, &labels)?));
    }
    Ok(out)
}

fn production_rules() -> Check {
    const PLANTED: &str = "if a student does active(week=1) then completion";
    let mut spec = CourseSpec::new("planted", 42);
    spec.n_sessions = 10;
    let planted = aggregate_results(rule_results(&spec, PLANTED)?);
    ensure!(
        planted.n_significant_same_direction >= 8,
        "planted rule significant in {} of {}",
        planted.n_significant_same_direction,
        planted.n_sessions
    );

    let mut null_sessions = 0;
    let mut significant = 0;
    for i in 0..20u64 {
        let mut spec = CourseSpec::new(format!("null{i:02}"), 1000 + i);
        spec.n_sessions = 10;
        spec.signal_strength = 0.0;
        for r in rule_results(&spec, PLANTED)? {
            null_sessions += 1;
            significant += usize::from(r.is_significant());
        }
    }
    let rate = significant as f64 / null_sessions as f64;
    ensure!(null_sessions == 200);
    ensure!((rate - 0.05).abs() <= 0.03, "null rejection rate {rate:.3}");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..1000 {
        let [a, b, c, d]: [u64; 4] = std::array::from_fn(|_| rng.random_range(0..60));
        let base = test_rule(&ContingencyTable::new(a, b, c, d));
        let transposed = test_rule(&ContingencyTable::new(a, c, b, d));
        let swapped = test_rule(&ContingencyTable::new(b, a, d, c));
        for (name, other, direction) in [
            ("transpose", &transposed, base.direction),
            ("swap", &swapped, -base.direction),
        ] {
            ensure!(
                other.statistic == base.statistic
                    && other.p_value == base.p_value
                    && other.direction == direction,
                "trial {trial} {name}: {a} {b} {c} {d}"
            );
        }
        if let Some(s) = base.statistic.get() {
            let n = (a + b + c + d) as f64;
            let det = a as f64 * d as f64 - b as f64 * c as f64;
            let want =
                n * det * det / ((a + b) as f64 * (c + d) as f64 * (a + c) as f64 * (b + d) as f64);
            ensure!(
                (s - want).abs() <= TOL * want.max(1.0),
                "trial {trial}: chi2 {s} vs {want}"
            );
        }
    }
    Ok(format!(
        "planted rule significant in {}/10 sessions; null rejection rate {rate:.3} over 200 sessions; 1000 tables invariant",
        planted.n_significant_same_direction
    ))
}

// ---------------------------------------------------------------------------
// Registry.

fn registry_integrity(g: &Result<Golden, String>) -> Check {
    let g = golden(g)?;
    let report = g.orch.registry().fsck();
    ensure!(report.ok(), "fsck: {:?}", report.problems);
    let (ok, _) = g.cli.morf(USER_TOKEN, &["artifacts", "fsck"]);
    ensure!(ok, "morf artifacts fsck failed");

    let kinds: BTreeSet<&str> = g
        .orch
        .registry()
        .records_for_job(&g.first.job_id)
        .iter()
        .map(|r| r.kind.as_str())
        .collect();
    for kind in [
        ArtifactKind::Config,
        ArtifactKind::Script,
        ArtifactKind::Image,
        ArtifactKind::Features,
        ArtifactKind::Model,
        ArtifactKind::Predictions,
        ArtifactKind::Metrics,
    ] {
        ensure!(
            kinds.contains(kind.as_str()),
            "completed job lacks a {kind} artifact"
        );
    }

    ensure!(
        morf_core::digest::sha256_hex(b"") == EMPTY_SHA256,
        "empty digest"
    );

    let dir = tempfile::tempdir()?;
    let reg = Registry::open(dir.path())?;
    let rec = reg.put_artifact(
        ArtifactKind::Metrics,
        b"{\"auc\": 0.8}",
        Provenance::job("j-0001"),
    )?;
    let blob = reg.blob_path(&rec.digest);
    let mut bytes = fs::read(&blob)?;
    bytes[0] ^= 0x20;
    fs::write(&blob, bytes)?;
    match reg.get_artifact(&rec.persistent_id, &Access::trusted()) {
        Err(RegistryError::Integrity { .. }) => {}
        other => bail!("tampered read returned {:?}", other.map(|(r, _)| r)),
    }
    ensure!(!reg.fsck().ok(), "fsck missed the tampered blob");
    Ok(format!(
        "fsck clean ({} records); job artifacts {:?}; empty digest e3b0c442...b855; tampering detected on read",
        g.orch.registry().records().len(),
        kinds
    ))
}

// ---------------------------------------------------------------------------
// Holdout discipline.

fn random_catalog(rng: &mut ChaCha8Rng) -> Catalog {
    let n_courses = rng.random_range(1..6);
    let courses = (0..n_courses)
        .map(|c| {
            let course_id = format!("c{c}");
            let mut ordinals: Vec<u32> = (1..20).collect();
            ordinals.shuffle(rng);
            ordinals.truncate(rng.random_range(1..6));
            ordinals.sort_unstable();
            let sessions = ordinals
                .into_iter()
                .map(|o| Session {
                    session_id: format!("{o:03}"),
                    weeks: 6,
                    bundle: morf_core::bundle::ExportBundle::new(format!(
                        "/raw/{course_id}/{o:03}"
                    )),
                    is_holdout: rng.random_bool(0.3),
                })
                .collect();
            Course {
                course_id,
                sessions,
                eligible: rng.random_bool(0.5),
            }
        })
        .collect();
    designate_holdouts(Catalog {
        courses,
        dataset_version: "random".into(),
    })
}

/// Every session whose raw data or labels reach `task`, following
/// upstream task outputs transitively.
fn reached_sessions(
    task_id: &str,
    graph: &TaskGraph,
    catalog: &Catalog,
    out: &mut BTreeSet<(String, String)>,
) -> anyhow::Result<()> {
    let task = graph.task(task_id).context("unknown task")?;
    let spec: MountSpec = resolve_mounts(task, graph, catalog, &FakeUpstream)?;
    for m in &spec.read_only_mounts {
        let src = m.source.to_string_lossy();
        if let Some(upstream) = src.strip_prefix("/upstream/") {
            reached_sessions(upstream, graph, catalog, out)?;
        } else if let Some(rest) = src
            .strip_prefix("/raw/")
            .or_else(|| src.strip_prefix("/labels/"))
        {
            let mut parts = rest.split('/');
            let (c, s) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
            out.insert((c.to_string(), s.to_string()));
        } else {
            bail!("unexpected mount source {src}");
        }
    }
    Ok(())
}

fn holdout_discipline() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut train_tasks = 0;
    let mut graphs = 0;
    for trial in 0..100 {
        let catalog = random_catalog(&mut rng);
        for course in &catalog.courses {
            let holdouts: Vec<&Session> = course.sessions.iter().filter(|s| s.is_holdout).collect();
            if course.sessions.len() >= 2 {
                ensure!(
                    holdouts.len() == 1,
                    "trial {trial}: {} has {} holdouts",
                    course.course_id,
                    holdouts.len()
                );
                let last = course.sessions.iter().map(|s| &s.session_id).max().unwrap();
                ensure!(
                    &holdouts[0].session_id == last,
                    "trial {trial}: holdout is not the latest session"
                );
            } else {
                ensure!(
                    holdouts.is_empty() && !course.eligible,
                    "trial {trial}: single-session course in use"
                );
            }
        }
        let holdout: HashSet<(String, String)> = catalog
            .all_sessions()
            .filter(|(_, s)| s.is_holdout)
            .map(|(c, s)| (c.course_id.clone(), s.session_id.clone()))
            .collect();

        for (extract, train) in [
            ("session", "session"),
            ("session", "course"),
            ("session", "all"),
            ("course", "course"),
            ("course", "all"),
            ("all", "all"),
        ] {
            let test = if train == "all" { "course" } else { train };
            let script = format!(
                "extract_{extract}()\nextract_holdout_{extract}()\ntrain_{train}(label_type = 'dropout')\n\
                 test_{test}(label_type = 'dropout')\nevaluate_course(label_type = 'dropout')\n"
            );
            let graph = match graph_for(&script, &catalog) {
                Ok(g) => g,
                Err(_) if catalog.eligible_courses().next().is_none() => continue,
                Err(e) => return Err(e.context(format!("trial {trial}: {script}"))),
            };
            graphs += 1;
            for task in graph.tasks.iter().filter(|t| t.stage == Stage::Train) {
                let mut reached = BTreeSet::new();
                reached_sessions(&task.task_id, &graph, &catalog, &mut reached)?;
                ensure!(
                    !reached.is_empty(),
                    "trial {trial}: {} sees no data",
                    task.task_id
                );
                if let Some(leak) = reached.iter().find(|k| holdout.contains(*k)) {
                    bail!("trial {trial}: {} reaches holdout {leak:?}", task.task_id);
                }
                train_tasks += 1;
            }
        }
    }
    Ok(format!(
        "100 random catalogs, {graphs} task graphs, {train_tasks} train tasks traced; no holdout reached, one holdout per multi-session course"
    ))
}
