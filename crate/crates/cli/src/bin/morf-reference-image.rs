//! Reference experiment run inside the sandbox: a week-1 activity
//! threshold classifier (or a linear dropout-week regressor).
//!
//! The platform invokes it as
//! `--mode <extract|train|test|probe> --course C --session S --label-type L`
//! with inputs under `$MORF_DATA` and outputs written to `$MORF_DATA/output`.
//! A leading `--behavior <name>` makes it misbehave for sandbox tests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use morf_core::bundle::ExportBundle;
use serde::{Deserialize, Serialize};

#[derive(Debug, Default)]
struct Args {
    mode: String,
    label_type: String,
    behavior: Option<String>,
}

fn parse_args() -> Result<Args> {
    let mut args = Args::default();
    let mut it = std::env::args().skip(1);
    while let Some(flag) = it.next() {
        let mut value = || it.next().with_context(|| format!("{flag} needs a value"));
        match flag.as_str() {
            "--mode" => args.mode = value()?,
            "--label-type" => args.label_type = value()?,
            "--behavior" => args.behavior = Some(value()?),
            "--course" | "--session" => {
                value()?;
            }
            other => bail!("unknown argument {other}"),
        }
    }
    Ok(args)
}

fn data_root() -> PathBuf {
    std::env::var_os("MORF_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("/morf-data"))
}

/// Every file named `name` below `root`, sorted.
fn find_files(root: &Path, name: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = fs::read_dir(&dir) else {
            continue;
        };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == name) {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureRow {
    course_id: String,
    session_id: String,
    user_id: String,
    week1_events: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Model {
    Threshold { threshold: u32 },
    Linear { intercept: f64, slope: f64 },
}

fn extract(root: &Path, out: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for meta in find_files(&root.join("raw"), "course_metadata.txt") {
        let bundle = ExportBundle::new(meta.parent().expect("file has a parent"));
        let activity = bundle.activity().context("reading bundle")?;
        for (user_id, act) in &activity.users {
            rows.push(FeatureRow {
                course_id: activity.metadata.course_id.clone(),
                session_id: activity.metadata.session_id.clone(),
                user_id: user_id.clone(),
                week1_events: act.events_per_week.first().copied().unwrap_or(0),
            });
        }
    }
    if rows.is_empty() {
        bail!("no raw bundles mounted");
    }
    let mut w = csv::Writer::from_path(out.join("features.csv"))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_features(root: &Path) -> Result<Vec<FeatureRow>> {
    let mut rows = Vec::new();
    for f in find_files(&root.join("features"), "features.csv") {
        let mut r = csv::Reader::from_path(&f)?;
        for row in r.deserialize() {
            rows.push(row?);
        }
    }
    Ok(rows)
}

/// Labels keyed by (course, session, user); course and session come from
/// the mount path `labels/<course>/<session>/labels.csv`.
fn read_labels(root: &Path) -> Result<BTreeMap<(String, String, String), f64>> {
    #[derive(Deserialize)]
    struct Row {
        user_id: String,
        label: f64,
    }
    let mut out = BTreeMap::new();
    for f in find_files(&root.join("labels"), "labels.csv") {
        let session_dir = f.parent().context("labels path")?;
        let session = session_dir
            .file_name()
            .context("labels path")?
            .to_string_lossy()
            .into_owned();
        let course = session_dir
            .parent()
            .and_then(Path::file_name)
            .context("labels path")?
            .to_string_lossy()
            .into_owned();
        let mut r = csv::Reader::from_path(&f)?;
        for row in r.deserialize::<Row>() {
            let row = row?;
            out.insert((course.clone(), session.clone(), row.user_id), row.label);
        }
    }
    Ok(out)
}

fn train(root: &Path, out: &Path, label_type: &str) -> Result<()> {
    let features = read_features(root)?;
    let labels = read_labels(root)?;
    let pairs: Vec<(f64, f64)> = features
        .iter()
        .filter_map(|f| {
            labels
                .get(&(f.course_id.clone(), f.session_id.clone(), f.user_id.clone()))
                .map(|&y| (f.week1_events as f64, y))
        })
        .collect();
    if pairs.is_empty() {
        bail!("no labeled training rows");
    }
    let model = if label_type == "dropout_week" {
        let n = pairs.len() as f64;
        let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
        Model::Linear {
            intercept: my - slope * mx,
            slope,
        }
    } else {
        // Predict dropout below the threshold that maximizes training accuracy.
        let max = pairs.iter().map(|p| p.0 as u32).max().unwrap_or(0);
        let mut best = (0usize, 0u32);
        for t in 0..=max + 1 {
            let correct = pairs
                .iter()
                .filter(|(x, y)| ((*x as u32) < t) == (*y == 1.0))
                .count();
            if correct > best.0 {
                best = (correct, t);
            }
        }
        Model::Threshold { threshold: best.1 }
    };
    let dir = out.join("model");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("model.json"), serde_json::to_vec_pretty(&model)?)?;
    Ok(())
}

fn test(root: &Path, out: &Path) -> Result<()> {
    let model: Model = serde_json::from_slice(&fs::read(root.join("model").join("model.json"))?)?;
    let features = read_features(root)?;
    let mut w = csv::Writer::from_path(out.join("predictions.csv"))?;
    w.write_record(["user_id", "score", "predicted_label"])?;
    for f in features {
        let x = f.week1_events as f64;
        let (score, label) = match model {
            Model::Threshold { threshold } => {
                let t = threshold as f64;
                let score = if t + x == 0.0 { 0.5 } else { t / (t + x) };
                (score, if f.week1_events < threshold { 1.0 } else { 0.0 })
            }
            Model::Linear { intercept, slope } => (0.5, intercept + slope * x),
        };
        w.write_record([f.user_id, score.to_string(), label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Tries to create or append to files everywhere below `dir`.
fn tamper(dir: &Path) {
    let _ = fs::write(dir.join("tampered.txt"), b"x");
    let Ok(entries) = fs::read_dir(dir) else {
        return;
    };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_dir() {
            tamper(&path);
        } else if let Ok(mut f) = fs::OpenOptions::new().append(true).open(&path) {
            use std::io::Write;
            let _ = f.write_all(b"x");
        }
    }
}

fn misbehave(behavior: &str, mode: &str, root: &Path) -> Result<Option<ExitCode>> {
    match behavior {
        "egress" if mode != "probe" => {
            let _ = std::net::TcpStream::connect_timeout(
                &"93.184.216.34:80".parse().expect("literal address"),
                std::time::Duration::from_secs(2),
            );
        }
        "readonly-write" if mode != "probe" => {
            for dir in ["raw", "features", "model", "labels"] {
                tamper(&root.join(dir));
            }
        }
        "sleep" if mode != "probe" => std::thread::sleep(std::time::Duration::from_secs(3600)),
        "hang-probe" if mode == "probe" => std::thread::sleep(std::time::Duration::from_secs(3600)),
        "fail" if mode != "probe" => {
            eprintln!("reference image: failing on request");
            return Ok(Some(ExitCode::from(3)));
        }
        "no-output" if mode != "probe" => return Ok(Some(ExitCode::SUCCESS)),
        "egress" | "readonly-write" | "sleep" | "hang-probe" | "fail" | "no-output" | "none" => {}
        other => bail!("unknown behavior {other}"),
    }
    Ok(None)
}

fn run() -> Result<ExitCode> {
    let args = parse_args()?;
    let root = data_root();
    let out = root.join("output");
    if let Some(b) = &args.behavior {
        if let Some(code) = misbehave(b, &args.mode, &root)? {
            return Ok(code);
        }
    }
    match args.mode.as_str() {
        "probe" => {}
        "extract" => extract(&root, &out)?,
        "train" => train(&root, &out, &args.label_type)?,
        "test" => test(&root, &out)?,
        other => bail!("unknown mode `{other}`"),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("reference image: {e:#}");
            ExitCode::FAILURE
        }
    }
}
