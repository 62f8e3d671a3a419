//! Registered courses and sessions, holdout designation, labels and mounts.

mod labels;
mod mounts;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::bundle::{validate_bundle, ExportBundle};
use crate::digest;

pub use labels::{extract_labels, LabelError, LabelRow, LabelTable};
pub use mounts::{
    check_label_isolation, resolve_mounts, InvocationArgs, Mount, MountError, MountSpec, RunMode,
    UpstreamArtifacts, CONTAINER_ROOT,
};

pub const MANIFEST_HEADER: &str = "course_id,session_id,weeks,bundle_path";

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("bundle for {course}/{session} not found at {path}")]
    MissingBundle {
        course: String,
        session: String,
        path: PathBuf,
    },
    #[error("bundle for {course}/{session} failed schema checks: {failures}")]
    InvalidBundle {
        course: String,
        session: String,
        failures: String,
    },
    #[error("duplicate session {course}/{session} in manifest")]
    DuplicateSession { course: String, session: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub weeks: u32,
    pub bundle: ExportBundle,
    pub is_holdout: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Course {
    pub course_id: String,
    /// Sorted by session ordinal.
    pub sessions: Vec<Session>,
    /// Set by [`designate_holdouts`]; single-session courses stay ineligible.
    pub eligible: bool,
}

impl Course {
    pub fn holdout(&self) -> Option<&Session> {
        self.sessions.iter().find(|s| s.is_holdout)
    }

    pub fn training_sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.iter().filter(|s| !s.is_holdout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogSummary {
    pub sessions: usize,
    pub courses: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Catalog {
    pub courses: Vec<Course>,
    pub dataset_version: String,
}

impl Catalog {
    pub fn summary(&self) -> CatalogSummary {
        CatalogSummary {
            sessions: self.courses.iter().map(|c| c.sessions.len()).sum(),
            courses: self.courses.len(),
        }
    }

    pub fn course(&self, id: &str) -> Option<&Course> {
        self.courses.iter().find(|c| c.course_id == id)
    }

    pub fn session(&self, course: &str, session: &str) -> Option<&Session> {
        self.course(course)?
            .sessions
            .iter()
            .find(|s| s.session_id == session)
    }

    pub fn eligible_courses(&self) -> impl Iterator<Item = &Course> {
        self.courses.iter().filter(|c| c.eligible)
    }

    /// Every (course, session) pair in catalog order.
    pub fn all_sessions(&self) -> impl Iterator<Item = (&Course, &Session)> {
        self.courses
            .iter()
            .flat_map(|c| c.sessions.iter().map(move |s| (c, s)))
    }
}

struct ManifestRow {
    course: String,
    session: String,
    weeks: u32,
    bundle: PathBuf,
}

fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestRow>, CatalogError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| CatalogError::Format {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != MANIFEST_HEADER {
        return Err(CatalogError::Format {
            line: 1,
            message: format!("expected header `{MANIFEST_HEADER}`, found `{header}`"),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| CatalogError::Format {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != 4 {
            return Err(CatalogError::Format {
                line,
                message: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let weeks = rec[2]
            .parse::<u32>()
            .ok()
            .filter(|w| *w > 0)
            .ok_or_else(|| CatalogError::Format {
                line,
                message: format!("weeks `{}` is not a positive integer", &rec[2]),
            })?;
        let path = Path::new(&rec[3]);
        rows.push(ManifestRow {
            course: rec[0].to_string(),
            session: rec[1].to_string(),
            weeks,
            bundle: if path.is_absolute() {
                path.to_path_buf()
            } else {
                base.join(path)
            },
        });
    }
    Ok(rows)
}

/// Loads and validates every bundle named by a manifest.
///
/// `dataset_version` hashes the sorted `(course, session, weeks, bundle
/// digest)` rows, so it follows bundle contents rather than file locations.
pub fn load_manifest(path: &Path) -> Result<Catalog, CatalogError> {
    let text = fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let rows = parse_manifest(&text, base)?;

    let mut by_course: BTreeMap<String, BTreeMap<String, Session>> = BTreeMap::new();
    let mut canonical = Vec::new();
    for row in rows {
        if !row.bundle.is_dir() {
            return Err(CatalogError::MissingBundle {
                course: row.course,
                session: row.session,
                path: row.bundle,
            });
        }
        let bundle = ExportBundle::new(row.bundle);
        let report = validate_bundle(&bundle);
        if !report.passed() {
            let failures: Vec<_> = report
                .failures()
                .map(|c| format!("{} {}: {}", c.file, c.check, c.detail))
                .collect();
            return Err(CatalogError::InvalidBundle {
                course: row.course,
                session: row.session,
                failures: failures.join("; "),
            });
        }
        let meta = bundle.metadata().map_err(|e| CatalogError::InvalidBundle {
            course: row.course.clone(),
            session: row.session.clone(),
            failures: e.to_string(),
        })?;
        if meta.weeks != row.weeks || meta.course_id != row.course || meta.session_id != row.session
        {
            return Err(CatalogError::InvalidBundle {
                course: row.course,
                session: row.session,
                failures: format!(
                    "course_metadata says {}/{} with {} weeks",
                    meta.course_id, meta.session_id, meta.weeks
                ),
            });
        }
        let digest = bundle.digest().map_err(|e| CatalogError::InvalidBundle {
            course: row.course.clone(),
            session: row.session.clone(),
            failures: e.to_string(),
        })?;
        canonical.push(format!(
            "{},{},{},{}",
            row.course, row.session, row.weeks, digest
        ));
        let sessions = by_course.entry(row.course.clone()).or_default();
        if sessions.contains_key(&row.session) {
            return Err(CatalogError::DuplicateSession {
                course: row.course,
                session: row.session,
            });
        }
        sessions.insert(
            row.session.clone(),
            Session {
                session_id: row.session,
                weeks: row.weeks,
                bundle,
                is_holdout: false,
            },
        );
    }
    canonical.sort();
    let mut manifest_bytes = String::from(MANIFEST_HEADER);
    manifest_bytes.push('\n');
    for line in &canonical {
        manifest_bytes.push_str(line);
        manifest_bytes.push('\n');
    }

    Ok(Catalog {
        courses: by_course
            .into_iter()
            .map(|(course_id, sessions)| Course {
                course_id,
                sessions: sessions.into_values().collect(),
                eligible: false,
            })
            .collect(),
        dataset_version: digest::sha256_hex(manifest_bytes.as_bytes()),
    })
}

/// Marks the highest-ordinal session of every multi-session course as its
/// holdout. Single-session courses are left ineligible for prediction.
pub fn designate_holdouts(mut catalog: Catalog) -> Catalog {
    for course in &mut catalog.courses {
        for s in &mut course.sessions {
            s.is_holdout = false;
        }
        course.eligible = course.sessions.len() >= 2;
        if course.eligible {
            if let Some(last) = course
                .sessions
                .iter_mut()
                .max_by(|a, b| a.session_id.cmp(&b.session_id))
            {
                last.is_holdout = true;
            }
        } else {
            warn!(course = %course.course_id, "single-session course excluded from predictive experiments");
        }
    }
    catalog
}
