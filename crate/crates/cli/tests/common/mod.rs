//! Fixtures shared by the end-to-end tests: the golden synthetic catalog,
//! the reference image and an orchestrator over them.

#![allow(dead_code)]

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use morf_core::catalog::{designate_holdouts, load_manifest, Catalog};
use morf_core::orchestrator::{JobRecord, Orchestrator, OrchestratorOptions, Submission};
use morf_core::synth::{write_course, CourseSpec};

pub const LISTING: &str = "extract_session()
extract_holdout_session()
train_course(label_type = 'dropout')
test_course(label_type = 'dropout')
evaluate_course(label_type = 'dropout')
";

pub const FORK_TAIL: &str = "train_course(label_type = 'dropout')
test_course(label_type = 'dropout')
evaluate_course(label_type = 'dropout')
";

pub const SENTINEL: &str = "SENTINELX";

pub fn reference_binary() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_morf-reference-image"))
}

pub fn morf_binary() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_morf"))
}

/// Reference image archive bytes, built once per behavior.
pub fn reference(behavior: Option<&str>) -> Vec<u8> {
    static CACHE: OnceLock<Mutex<HashMap<Option<String>, Vec<u8>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut map = cache.lock().unwrap();
    map.entry(behavior.map(str::to_string))
        .or_insert_with(|| morf_cli::reference_image(&reference_binary(), behavior).unwrap())
        .clone()
}

/// Two courses of three sessions: seed 42, signal 0.8, 100 users each.
pub fn write_golden_catalog(out: &Path, user_prefix: &str) -> PathBuf {
    for i in 0..2u64 {
        let mut spec = CourseSpec::new(format!("course{:02}", i + 1), 42 + i);
        spec.users_per_session = 100;
        spec.signal_strength = 0.8;
        spec.user_prefix = user_prefix.to_string();
        write_course(&spec, out).unwrap();
    }
    out.join("manifest.csv")
}

pub fn golden_catalog(out: &Path, user_prefix: &str) -> Catalog {
    designate_holdouts(load_manifest(&write_golden_catalog(out, user_prefix)).unwrap())
}

pub fn config(extra: &str) -> String {
    format!("[morf]\nmode = predict\nimage = uploaded.tar\ncontroller = uploaded.txt\nlabel_type = dropout\n{extra}")
}

pub struct Platform {
    pub dir: tempfile::TempDir,
    pub orch: Arc<Orchestrator>,
}

pub fn platform(backend: &str) -> Platform {
    platform_with(backend, |_| {})
}

pub fn platform_with(backend: &str, tweak: impl FnOnce(&mut OrchestratorOptions)) -> Platform {
    let dir = tempfile::tempdir().unwrap();
    let catalog = golden_catalog(&dir.path().join("catalog"), SENTINEL);
    let mut opts = OrchestratorOptions::new(dir.path().join("state"));
    opts.workers = 4;
    opts.backend = backend.to_string();
    tweak(&mut opts);
    let orch = Orchestrator::open(opts, catalog).unwrap();
    Platform { dir, orch }
}

impl Platform {
    pub fn run(&self, config: &str, script: &str, image: Vec<u8>) -> JobRecord {
        let rec = self
            .orch
            .submit_job(Submission {
                config: config.to_string(),
                script: Some(script.to_string()),
                image: Some(image),
                user: Some("researcher".into()),
            })
            .unwrap();
        assert!(
            rec.failure_reason.is_none(),
            "rejected: {:?}",
            rec.failure_reason
        );
        self.orch
            .wait(&rec.job_id, Duration::from_secs(600))
            .unwrap()
    }

    pub fn catalog_dir(&self) -> PathBuf {
        self.dir.path().join("catalog")
    }
}

/// Reads every file below `dir` as bytes.
pub fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
