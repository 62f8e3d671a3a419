//! The seven-file raw export bundle for one course session.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest;

pub const CLICKSTREAM: &str = "clickstream.jsonl";
pub const FORUM_POSTS: &str = "forum_posts.csv";
pub const FORUM_COMMENTS: &str = "forum_comments.csv";
pub const ASSIGNMENT_SUBMISSIONS: &str = "assignment_submissions.csv";
pub const GRADES: &str = "grades.csv";
pub const DEMOGRAPHIC_SURVEY: &str = "demographic_survey.csv";
pub const COURSE_METADATA: &str = "course_metadata.txt";

pub const BUNDLE_FILES: [&str; 7] = [
    CLICKSTREAM,
    FORUM_POSTS,
    FORUM_COMMENTS,
    ASSIGNMENT_SUBMISSIONS,
    GRADES,
    DEMOGRAPHIC_SURVEY,
    COURSE_METADATA,
];

/// CSV tables and their exact header rows.
pub const TABLE_HEADERS: [(&str, &str); 5] = [
    (FORUM_POSTS, "post_id,thread_id,user_id,timestamp"),
    (FORUM_COMMENTS, "comment_id,post_id,user_id,timestamp"),
    (
        ASSIGNMENT_SUBMISSIONS,
        "submission_id,user_id,assignment_id,timestamp",
    ),
    (GRADES, "user_id,assignment_id,score"),
    (DEMOGRAPHIC_SURVEY, "user_id,age_band,country,education"),
];

pub const SECONDS_PER_WEEK: i64 = 7 * 24 * 3600;

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BundleError + '_ {
    move |source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// An on-disk export bundle directory.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExportBundle {
    dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CourseMetadata {
    pub course_id: String,
    pub session_id: String,
    pub weeks: u32,
    pub start_timestamp: i64,
}

impl CourseMetadata {
    /// 1-based course week containing `ts`, or `None` outside the course span.
    pub fn week_of(&self, ts: i64) -> Option<u32> {
        if ts < self.start_timestamp {
            return None;
        }
        let week = (ts - self.start_timestamp) / SECONDS_PER_WEEK + 1;
        (week <= self.weeks as i64).then_some(week as u32)
    }

    pub fn render(&self) -> String {
        format!(
            "course_id: {}\nsession_id: {}\nweeks: {}\nstart_timestamp: {}\n",
            self.course_id, self.session_id, self.weeks, self.start_timestamp
        )
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut fields = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| format!("malformed metadata line `{line}`"))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| format!("metadata is missing `{k}`"))
        };
        Ok(CourseMetadata {
            course_id: get("course_id")?,
            session_id: get("session_id")?,
            weeks: get("weeks")?
                .parse()
                .ok()
                .filter(|w| *w > 0)
                .ok_or("metadata `weeks` must be a positive integer")?,
            start_timestamp: get("start_timestamp")?
                .parse()
                .map_err(|_| "metadata `start_timestamp` must be an integer")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub timestamp: i64,
    pub user_id: String,
    pub url: String,
    pub action: String,
}

/// Per-user weekly behavior derived from a bundle.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserActivity {
    /// Clickstream events per week, index 0 = week 1.
    pub events_per_week: Vec<u32>,
    pub posts_per_week: Vec<u32>,
    pub submissions_per_week: Vec<u32>,
}

impl UserActivity {
    fn new(weeks: u32) -> Self {
        let w = weeks as usize;
        UserActivity {
            events_per_week: vec![0; w],
            posts_per_week: vec![0; w],
            submissions_per_week: vec![0; w],
        }
    }

    /// 1-based week of the first and last clickstream event.
    pub fn first_active_week(&self) -> Option<u32> {
        self.events_per_week
            .iter()
            .position(|&n| n > 0)
            .map(|i| i as u32 + 1)
    }

    pub fn last_active_week(&self) -> Option<u32> {
        self.events_per_week
            .iter()
            .rposition(|&n| n > 0)
            .map(|i| i as u32 + 1)
    }
}

/// Activity of every user seen in the clickstream, keyed by user id.
#[derive(Debug, Clone)]
pub struct SessionActivity {
    pub metadata: CourseMetadata,
    pub users: BTreeMap<String, UserActivity>,
}

impl ExportBundle {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ExportBundle { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Digest over the seven files (names and contents).
    pub fn digest(&self) -> Result<String, BundleError> {
        let mut parts = String::new();
        for name in BUNDLE_FILES {
            let path = self.file(name);
            let d = digest::file_sha256(&path).map_err(io_err(&path))?;
            parts.push_str(&format!("{name}:{d}\n"));
        }
        Ok(digest::sha256_hex(parts.as_bytes()))
    }

    pub fn metadata(&self) -> Result<CourseMetadata, BundleError> {
        let path = self.file(COURSE_METADATA);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        CourseMetadata::parse(&text).map_err(|message| BundleError::Format { path, message })
    }

    pub fn clickstream(&self) -> Result<Vec<ClickEvent>, BundleError> {
        let path = self.file(CLICKSTREAM);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| {
                serde_json::from_str(line).map_err(|e| BundleError::Format {
                    path: path.clone(),
                    message: format!("line {}: {e}", i + 1),
                })
            })
            .collect()
    }

    /// Rows of a CSV table as header-keyed maps.
    pub fn table(&self, name: &str) -> Result<Vec<BTreeMap<String, String>>, BundleError> {
        let path = self.file(name);
        let mut reader = csv::Reader::from_path(&path).map_err(|e| BundleError::Format {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let headers = reader
            .headers()
            .map_err(|e| BundleError::Format {
                path: path.clone(),
                message: e.to_string(),
            })?
            .clone();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| BundleError::Format {
                path: path.clone(),
                message: e.to_string(),
            })?;
            rows.push(
                headers
                    .iter()
                    .zip(rec.iter())
                    .map(|(h, v)| (h.to_string(), v.to_string()))
                    .collect(),
            );
        }
        Ok(rows)
    }

    /// Weekly activity per clickstream user. Events, posts and submissions
    /// outside the course span are ignored.
    pub fn activity(&self) -> Result<SessionActivity, BundleError> {
        let metadata = self.metadata()?;
        let mut users: BTreeMap<String, UserActivity> = BTreeMap::new();
        for ev in self.clickstream()? {
            if let Some(week) = metadata.week_of(ev.timestamp) {
                users
                    .entry(ev.user_id)
                    .or_insert_with(|| UserActivity::new(metadata.weeks))
                    .events_per_week[week as usize - 1] += 1;
            }
        }
        for (table, posts) in [(FORUM_POSTS, true), (ASSIGNMENT_SUBMISSIONS, false)] {
            let path = self.file(table);
            for row in self.table(table)? {
                let ts: i64 = row
                    .get("timestamp")
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| BundleError::Format {
                        path: path.clone(),
                        message: "bad timestamp".into(),
                    })?;
                let (Some(week), Some(user)) = (metadata.week_of(ts), row.get("user_id")) else {
                    continue;
                };
                if let Some(act) = users.get_mut(user) {
                    let slot = if posts {
                        &mut act.posts_per_week
                    } else {
                        &mut act.submissions_per_week
                    };
                    slot[week as usize - 1] += 1;
                }
            }
        }
        Ok(SessionActivity { metadata, users })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaCheck {
    pub file: String,
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

/// Per-file schema conformance results for one bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaReport {
    pub checks: Vec<SchemaCheck>,
}

impl SchemaReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SchemaCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for SchemaReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let mark = if c.passed { "ok  " } else { "FAIL" };
            write!(f, "{mark} {:<28} {}", c.file, c.check)?;
            if !c.detail.is_empty() {
                write!(f, ": {}", c.detail)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Checks completeness, headers, clickstream record shape and referential
/// integrity. Problems are reported as failed checks, never as errors.
pub fn validate_bundle(bundle: &ExportBundle) -> SchemaReport {
    let mut checks = Vec::new();
    let mut push = |file: &str, check: &str, result: Result<(), String>| {
        checks.push(SchemaCheck {
            file: file.to_string(),
            check: check.to_string(),
            passed: result.is_ok(),
            detail: result.err().unwrap_or_default(),
        })
    };

    let present: BTreeSet<String> = fs::read_dir(bundle.dir())
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| e.path().is_file())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect()
        })
        .unwrap_or_default();
    for name in BUNDLE_FILES {
        push(
            name,
            "present",
            if present.contains(name) {
                Ok(())
            } else {
                Err("file missing".into())
            },
        );
    }
    let extra: Vec<_> = present
        .iter()
        .filter(|p| !BUNDLE_FILES.contains(&p.as_str()))
        .cloned()
        .collect();
    push(
        "<bundle>",
        "exactly seven files",
        if extra.is_empty() {
            Ok(())
        } else {
            Err(format!("unexpected files: {}", extra.join(", ")))
        },
    );

    let metadata = if present.contains(COURSE_METADATA) {
        let m = bundle.metadata();
        push(
            COURSE_METADATA,
            "fields",
            m.as_ref().map(|_| ()).map_err(|e| e.to_string()),
        );
        m.ok()
    } else {
        None
    };

    let mut roster: BTreeSet<String> = BTreeSet::new();
    if present.contains(CLICKSTREAM) {
        match bundle.clickstream() {
            Ok(events) => {
                push(CLICKSTREAM, "record fields", Ok(()));
                if let Some(meta) = &metadata {
                    let outside = events
                        .iter()
                        .filter(|e| meta.week_of(e.timestamp).is_none())
                        .count();
                    push(
                        CLICKSTREAM,
                        "timestamps within course weeks",
                        if outside == 0 {
                            Ok(())
                        } else {
                            Err(format!("{outside} events outside the course span"))
                        },
                    );
                }
                roster.extend(events.into_iter().map(|e| e.user_id));
            }
            Err(e) => push(CLICKSTREAM, "record fields", Err(e.to_string())),
        }
    }

    let mut tables = BTreeMap::new();
    for (name, header) in TABLE_HEADERS {
        if !present.contains(name) {
            continue;
        }
        let first = fs::read_to_string(bundle.file(name))
            .map(|t| t.lines().next().unwrap_or_default().trim_end().to_string());
        match first {
            Ok(found) if found == header => {
                push(name, "header", Ok(()));
                match bundle.table(name) {
                    Ok(rows) => {
                        tables.insert(name, rows);
                    }
                    Err(e) => push(name, "rows", Err(e.to_string())),
                }
            }
            Ok(found) => push(
                name,
                "header",
                Err(format!("expected `{header}`, found `{found}`")),
            ),
            Err(e) => push(name, "header", Err(e.to_string())),
        }
    }
    if let Some(rows) = tables.get(DEMOGRAPHIC_SURVEY) {
        roster.extend(rows.iter().filter_map(|r| r.get("user_id").cloned()));
    }
    for (name, rows) in &tables {
        let unknown: BTreeSet<_> = rows
            .iter()
            .filter_map(|r| r.get("user_id"))
            .filter(|u| !roster.contains(*u))
            .collect();
        push(
            name,
            "referential integrity",
            if unknown.is_empty() {
                Ok(())
            } else {
                Err(format!("{} user ids not in roster", unknown.len()))
            },
        );
    }
    if let (Some(posts), Some(comments)) = (tables.get(FORUM_POSTS), tables.get(FORUM_COMMENTS)) {
        let ids: BTreeSet<_> = posts.iter().filter_map(|r| r.get("post_id")).collect();
        let dangling = comments
            .iter()
            .filter_map(|r| r.get("post_id"))
            .filter(|p| !ids.contains(p))
            .count();
        push(
            FORUM_COMMENTS,
            "post references",
            if dangling == 0 {
                Ok(())
            } else {
                Err(format!("{dangling} comments reference unknown posts"))
            },
        );
    }

    SchemaReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn week_boundaries() {
        let m = CourseMetadata {
            course_id: "c".into(),
            session_id: "001".into(),
            weeks: 2,
            start_timestamp: 1000,
        };
        assert_eq!(m.week_of(999), None);
        assert_eq!(m.week_of(1000), Some(1));
        assert_eq!(m.week_of(1000 + SECONDS_PER_WEEK - 1), Some(1));
        assert_eq!(m.week_of(1000 + SECONDS_PER_WEEK), Some(2));
        assert_eq!(m.week_of(1000 + 2 * SECONDS_PER_WEEK), None);
        assert_eq!(CourseMetadata::parse(&m.render()).unwrap(), m);
    }

    fn generated() -> (tempfile::TempDir, ExportBundle) {
        let dir = tempfile::tempdir().unwrap();
        let spec = crate::synth::CourseSpec::new("c", 5);
        let bundle = crate::synth::generate_session_by_ordinal(&spec, 1)
            .unwrap()
            .write_to(dir.path())
            .unwrap();
        (dir, bundle)
    }

    fn failed(report: &SchemaReport) -> Vec<(String, String)> {
        report
            .failures()
            .map(|c| (c.file.clone(), c.check.clone()))
            .collect()
    }

    #[test]
    fn unknown_forum_user_breaks_integrity() {
        let (_dir, bundle) = generated();
        let path = bundle.file(FORUM_POSTS);
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("p-x,t-x,nobody,1388534500\n");
        fs::write(&path, text).unwrap();
        assert_eq!(
            failed(&validate_bundle(&bundle)),
            [(FORUM_POSTS.to_string(), "referential integrity".to_string())]
        );
    }

    #[test]
    fn missing_and_extra_files() {
        let (_dir, bundle) = generated();
        fs::remove_file(bundle.file(GRADES)).unwrap();
        assert_eq!(
            failed(&validate_bundle(&bundle)),
            [(GRADES.to_string(), "present".to_string())]
        );
        fs::write(bundle.file("notes.txt"), "x").unwrap();
        let report = validate_bundle(&bundle);
        assert!(
            failed(&report).contains(&("<bundle>".to_string(), "exactly seven files".to_string()))
        );
        assert!(report.to_string().contains("FAIL"));
    }

    #[test]
    fn bad_header_and_clickstream() {
        let (_dir, bundle) = generated();
        fs::write(bundle.file(GRADES), "user,score\n").unwrap();
        fs::write(bundle.file(CLICKSTREAM), "{\"user_id\":\"u\"}\n").unwrap();
        let f = failed(&validate_bundle(&bundle));
        assert!(f.contains(&(GRADES.to_string(), "header".to_string())));
        assert!(f.contains(&(CLICKSTREAM.to_string(), "record fields".to_string())));
    }
}
