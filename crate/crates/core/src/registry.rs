//! Content-addressed artifact store with persistent identifiers.
//!
//! Blobs live at `blobs/<2 hex>/<digest>` and are written through a
//! temporary file and a rename, so a blob is either absent or complete.
//! Records are appended to `records.ndjson` and never rewritten.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::{archive, digest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Image,
    Config,
    Script,
    Rulefile,
    Features,
    Model,
    Predictions,
    Metrics,
    Labels,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 9] = [
        ArtifactKind::Image,
        ArtifactKind::Config,
        ArtifactKind::Script,
        ArtifactKind::Rulefile,
        ArtifactKind::Features,
        ArtifactKind::Model,
        ArtifactKind::Predictions,
        ArtifactKind::Metrics,
        ArtifactKind::Labels,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Image => "image",
            ArtifactKind::Config => "config",
            ArtifactKind::Script => "script",
            ArtifactKind::Rulefile => "rulefile",
            ArtifactKind::Features => "features",
            ArtifactKind::Model => "model",
            ArtifactKind::Predictions => "predictions",
            ArtifactKind::Metrics => "metrics",
            ArtifactKind::Labels => "labels",
        }
    }

    /// Intermediates readable only by trusted users.
    pub fn is_restricted(self) -> bool {
        matches!(
            self,
            ArtifactKind::Features
                | ArtifactKind::Model
                | ArtifactKind::Predictions
                | ArtifactKind::Labels
        )
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArtifactKind {
    type Err = RegistryError;
    fn from_str(s: &str) -> Result<Self, RegistryError> {
        ArtifactKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| RegistryError::BadId(format!("unknown kind {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub job_id: String,
    pub task_id: Option<String>,
    /// User that submitted the producing job.
    pub owner: Option<String>,
}

impl Provenance {
    pub fn job(job_id: &str) -> Self {
        Provenance {
            job_id: job_id.to_string(),
            task_id: None,
            owner: None,
        }
    }

    pub fn task(mut self, task_id: &str) -> Self {
        self.task_id = Some(task_id.to_string());
        self
    }

    pub fn owned_by(mut self, owner: Option<&str>) -> Self {
        self.owner = owner.map(str::to_string);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub persistent_id: String,
    pub kind: ArtifactKind,
    pub digest: String,
    pub size: u64,
    pub created_at: String,
    pub provenance: Provenance,
}

/// Who is reading an artifact.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Access {
    pub user: Option<String>,
    pub trusted: bool,
}

impl Access {
    pub fn trusted() -> Self {
        Access {
            user: None,
            trusted: true,
        }
    }

    pub fn user(name: &str, trusted: bool) -> Self {
        Access {
            user: Some(name.to_string()),
            trusted,
        }
    }

    pub fn may_read(&self, record: &ArtifactRecord) -> bool {
        !record.kind.is_restricted() || self.trusted
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("registry storage failure at {path}: {source}")]
    Storage { path: PathBuf, source: io::Error },
    #[error("artifact {0} not found")]
    NotFound(String),
    #[error("artifact {id} is corrupt: expected digest {expected}, found {actual}")]
    Integrity {
        id: String,
        expected: String,
        actual: String,
    },
    #[error("artifact {0} is restricted to trusted users")]
    Forbidden(String),
    #[error("malformed persistent id: {0}")]
    BadId(String),
    #[error("persistent id {0} already names a different blob")]
    Collision(String),
}

fn storage(path: &Path) -> impl FnOnce(io::Error) -> RegistryError + '_ {
    move |source| RegistryError::Storage {
        path: path.to_path_buf(),
        source,
    }
}

pub fn persistent_id(job_id: &str, kind: ArtifactKind, digest: &str) -> String {
    format!("morf:{job_id}:{kind}:{}", &digest[..8])
}

/// Splits a persistent id into `(job_id, kind, digest prefix)`.
pub fn parse_persistent_id(id: &str) -> Result<(String, ArtifactKind, String), RegistryError> {
    let parts: Vec<&str> = id.split(':').collect();
    match parts.as_slice() {
        ["morf", job, kind, prefix]
            if !job.is_empty()
                && prefix.len() == 8
                && prefix.chars().all(|c| matches!(c, '0'..='9' | 'a'..='f')) =>
        {
            Ok((job.to_string(), kind.parse()?, prefix.to_string()))
        }
        _ => Err(RegistryError::BadId(id.to_string())),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsckReport {
    pub blobs_checked: usize,
    pub records_checked: usize,
    /// `(persistent_id, problem)` for every record whose blob is missing or
    /// does not hash to its digest.
    pub problems: Vec<(String, String)>,
}

impl FsckReport {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

struct Index {
    records: Vec<ArtifactRecord>,
    by_id: HashMap<String, usize>,
}

pub struct Registry {
    root: PathBuf,
    index: RwLock<Index>,
    log: Mutex<File>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("root", &self.root)
            .finish()
    }
}

const RECORDS_FILE: &str = "records.ndjson";

impl Registry {
    /// Opens (creating if needed) a registry rooted at `root`. A partially
    /// written trailing record from an interrupted append is ignored.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, RegistryError> {
        let root = root.into();
        for sub in ["blobs", "tmp", "materialized"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(storage(&p))?;
        }
        let log_path = root.join(RECORDS_FILE);
        let mut index = Index {
            records: Vec::new(),
            by_id: HashMap::new(),
        };
        if log_path.exists() {
            let f = File::open(&log_path).map_err(storage(&log_path))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(storage(&log_path))?;
                if let Ok(rec) = serde_json::from_str::<ArtifactRecord>(&line) {
                    let slot = index.records.len();
                    index.by_id.insert(rec.persistent_id.clone(), slot);
                    index.records.push(rec);
                }
            }
        }
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(storage(&log_path))?;
        // Terminate any torn line so the next record starts cleanly.
        let len = log.metadata().map_err(storage(&log_path))?.len();
        if len > 0 && fs::read(&log_path).map_err(storage(&log_path))?.last() != Some(&b'\n') {
            log.write_all(b"\n").map_err(storage(&log_path))?;
        }
        Ok(Registry {
            root,
            index: RwLock::new(index),
            log: Mutex::new(log),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn blob_path(&self, digest: &str) -> PathBuf {
        self.root.join("blobs").join(&digest[..2]).join(digest)
    }

    fn write_blob(&self, digest: &str, bytes: &[u8]) -> Result<(), RegistryError> {
        let dest = self.blob_path(digest);
        if dest.exists() {
            return Ok(());
        }
        let dir = dest.parent().expect("blob has parent");
        fs::create_dir_all(dir).map_err(storage(dir))?;
        let tmp_dir = self.root.join("tmp");
        let mut tmp = tempfile::NamedTempFile::new_in(&tmp_dir).map_err(storage(&tmp_dir))?;
        tmp.write_all(bytes).map_err(storage(&tmp_dir))?;
        tmp.as_file().sync_all().map_err(storage(&tmp_dir))?;
        tmp.persist(&dest).map_err(|e| RegistryError::Storage {
            path: dest.clone(),
            source: e.error,
        })?;
        Ok(())
    }

    /// Stores `bytes` and mints a record. Storing the same bytes under the
    /// same job and kind again returns the existing record.
    pub fn put_artifact(
        &self,
        kind: ArtifactKind,
        bytes: &[u8],
        provenance: Provenance,
    ) -> Result<ArtifactRecord, RegistryError> {
        let digest = digest::sha256_hex(bytes);
        let id = persistent_id(&provenance.job_id, kind, &digest);
        if let Some(existing) = self.record(&id) {
            if existing.digest != digest {
                return Err(RegistryError::Collision(id));
            }
            return Ok(existing);
        }
        self.write_blob(&digest, bytes)?;
        let record = ArtifactRecord {
            persistent_id: id.clone(),
            kind,
            digest,
            size: bytes.len() as u64,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            provenance,
        };

        let mut log = self.log.lock().expect("registry log lock");
        let mut index = self.index.write().expect("registry index lock");
        if let Some(&i) = index.by_id.get(&id) {
            return Ok(index.records[i].clone());
        }
        let mut line = serde_json::to_vec(&record).expect("record serializes");
        line.push(b'\n');
        let log_path = self.root.join(RECORDS_FILE);
        log.write_all(&line).map_err(storage(&log_path))?;
        log.sync_data().map_err(storage(&log_path))?;
        let slot = index.records.len();
        index.by_id.insert(id, slot);
        index.records.push(record.clone());
        Ok(record)
    }

    /// Stores a directory as a deterministic tar.
    pub fn put_dir(
        &self,
        kind: ArtifactKind,
        dir: &Path,
        provenance: Provenance,
    ) -> Result<ArtifactRecord, RegistryError> {
        let bytes = archive::pack_dir(dir).map_err(storage(dir))?;
        self.put_artifact(kind, &bytes, provenance)
    }

    pub fn record(&self, id: &str) -> Option<ArtifactRecord> {
        let index = self.index.read().expect("registry index lock");
        index.by_id.get(id).map(|&i| index.records[i].clone())
    }

    pub fn records(&self) -> Vec<ArtifactRecord> {
        self.index
            .read()
            .expect("registry index lock")
            .records
            .clone()
    }

    pub fn records_for_job(&self, job_id: &str) -> Vec<ArtifactRecord> {
        self.index
            .read()
            .expect("registry index lock")
            .records
            .iter()
            .filter(|r| r.provenance.job_id == job_id)
            .cloned()
            .collect()
    }

    fn read_verified(&self, record: &ArtifactRecord) -> Result<Vec<u8>, RegistryError> {
        let path = self.blob_path(&record.digest);
        let bytes = fs::read(&path).map_err(|e| {
            if e.kind() == io::ErrorKind::NotFound {
                RegistryError::Integrity {
                    id: record.persistent_id.clone(),
                    expected: record.digest.clone(),
                    actual: "missing blob".into(),
                }
            } else {
                RegistryError::Storage { path, source: e }
            }
        })?;
        let actual = digest::sha256_hex(&bytes);
        if actual != record.digest {
            return Err(RegistryError::Integrity {
                id: record.persistent_id.clone(),
                expected: record.digest.clone(),
                actual,
            });
        }
        Ok(bytes)
    }

    /// Returns the record and its bytes, verified against the digest.
    pub fn get_artifact(
        &self,
        id: &str,
        access: &Access,
    ) -> Result<(ArtifactRecord, Vec<u8>), RegistryError> {
        parse_persistent_id(id)?;
        let record = self
            .record(id)
            .ok_or_else(|| RegistryError::NotFound(id.to_string()))?;
        if !access.may_read(&record) {
            return Err(RegistryError::Forbidden(id.to_string()));
        }
        let bytes = self.read_verified(&record)?;
        Ok((record, bytes))
    }

    /// Unpacks a directory artifact (stored by [`Registry::put_dir`]) into
    /// `materialized/<digest>` and returns that path. Idempotent.
    pub fn materialize_dir(&self, id: &str) -> Result<PathBuf, RegistryError> {
        let (record, bytes) = self.get_artifact(id, &Access::trusted())?;
        let dest = self.root.join("materialized").join(&record.digest);
        if dest.is_dir() {
            return Ok(dest);
        }
        let tmp_root = self.root.join("tmp");
        let tmp = tempfile::tempdir_in(&tmp_root).map_err(storage(&tmp_root))?;
        archive::unpack(&bytes, tmp.path()).map_err(storage(tmp.path()))?;
        match fs::rename(tmp.keep(), &dest) {
            Ok(()) => Ok(dest),
            Err(_) if dest.is_dir() => Ok(dest),
            Err(e) => Err(RegistryError::Storage {
                path: dest,
                source: e,
            }),
        }
    }

    /// Writes the verified bytes of a file artifact to `dest`.
    pub fn materialize_file(&self, id: &str, dest: &Path) -> Result<(), RegistryError> {
        let (_, bytes) = self.get_artifact(id, &Access::trusted())?;
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(storage(parent))?;
        }
        fs::write(dest, bytes).map_err(storage(dest))
    }

    /// Re-hashes every blob referenced by a record.
    pub fn fsck(&self) -> FsckReport {
        let records = self.records();
        let mut report = FsckReport {
            records_checked: records.len(),
            ..Default::default()
        };
        let mut verdicts: HashMap<String, Option<String>> = HashMap::new();
        for rec in &records {
            let verdict = verdicts
                .entry(rec.digest.clone())
                .or_insert_with(|| match self.read_verified(rec) {
                    Ok(_) => None,
                    Err(RegistryError::Integrity { actual, .. }) => {
                        Some(format!("digest mismatch ({actual})"))
                    }
                    Err(e) => Some(e.to_string()),
                })
                .clone();
            if let Some(problem) = verdict {
                report.problems.push((rec.persistent_id.clone(), problem));
            }
        }
        report.blobs_checked = verdicts.len();
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> (tempfile::TempDir, Registry) {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path().join("reg")).unwrap();
        (dir, reg)
    }

    #[test]
    fn empty_artifact_digest() {
        let (_d, reg) = registry();
        let rec = reg
            .put_artifact(ArtifactKind::Config, b"", Provenance::job("j-0001"))
            .unwrap();
        assert_eq!(
            rec.digest,
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(rec.persistent_id, "morf:j-0001:config:e3b0c442");
        assert_eq!(rec.size, 0);
    }

    #[test]
    fn dedup_across_jobs() {
        let (_d, reg) = registry();
        let a = reg
            .put_artifact(ArtifactKind::Features, b"x,y\n", Provenance::job("j-0001"))
            .unwrap();
        let b = reg
            .put_artifact(ArtifactKind::Features, b"x,y\n", Provenance::job("j-0002"))
            .unwrap();
        assert_ne!(a.persistent_id, b.persistent_id);
        assert_eq!(a.digest, b.digest);
        let blobs: Vec<_> = walk_files(&reg.root().join("blobs"));
        assert_eq!(blobs.len(), 1);
        let again = reg
            .put_artifact(ArtifactKind::Features, b"x,y\n", Provenance::job("j-0001"))
            .unwrap();
        assert_eq!(again, a);
        assert_eq!(reg.records().len(), 2);
    }

    fn walk_files(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk_files(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn round_trip_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let id = {
            let reg = Registry::open(dir.path()).unwrap();
            reg.put_artifact(ArtifactKind::Metrics, b"{}", Provenance::job("j-0003"))
                .unwrap()
                .persistent_id
        };
        let reg = Registry::open(dir.path()).unwrap();
        let (rec, bytes) = reg.get_artifact(&id, &Access::default()).unwrap();
        assert_eq!(bytes, b"{}");
        assert_eq!(rec.kind, ArtifactKind::Metrics);
        assert!(matches!(
            reg.get_artifact("morf:j-9999:metrics:00000000", &Access::default()),
            Err(RegistryError::NotFound(_))
        ));
        assert!(matches!(
            reg.get_artifact("not-an-id", &Access::default()),
            Err(RegistryError::BadId(_))
        ));
    }

    #[test]
    fn torn_record_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        {
            let reg = Registry::open(dir.path()).unwrap();
            reg.put_artifact(ArtifactKind::Config, b"a", Provenance::job("j-1"))
                .unwrap();
        }
        let mut f = OpenOptions::new()
            .append(true)
            .open(dir.path().join(RECORDS_FILE))
            .unwrap();
        f.write_all(b"{\"persistent_id\":\"morf:j-1:conf").unwrap();
        drop(f);
        let reg = Registry::open(dir.path()).unwrap();
        assert_eq!(reg.records().len(), 1);
        reg.put_artifact(ArtifactKind::Config, b"b", Provenance::job("j-1"))
            .unwrap();
        assert_eq!(Registry::open(dir.path()).unwrap().records().len(), 2);
    }

    #[test]
    fn tampering_is_detected() {
        let (_d, reg) = registry();
        let rec = reg
            .put_artifact(ArtifactKind::Metrics, b"golden", Provenance::job("j-1"))
            .unwrap();
        assert!(reg.fsck().ok());
        fs::write(reg.blob_path(&rec.digest), b"tampered").unwrap();
        assert!(matches!(
            reg.get_artifact(&rec.persistent_id, &Access::default()),
            Err(RegistryError::Integrity { .. })
        ));
        let report = reg.fsck();
        assert_eq!(report.problems.len(), 1);
        assert_eq!(report.problems[0].0, rec.persistent_id);
    }

    #[test]
    fn restricted_kinds_need_trust() {
        let (_d, reg) = registry();
        let prov = Provenance::job("j-1")
            .task("train_session@c/001")
            .owned_by(Some("alice"));
        let rec = reg.put_artifact(ArtifactKind::Model, b"m", prov).unwrap();
        let id = &rec.persistent_id;
        assert!(matches!(
            reg.get_artifact(id, &Access::default()),
            Err(RegistryError::Forbidden(_))
        ));
        assert!(matches!(
            reg.get_artifact(id, &Access::user("bob", false)),
            Err(RegistryError::Forbidden(_))
        ));
        assert!(matches!(
            reg.get_artifact(id, &Access::user("alice", false)),
            Err(RegistryError::Forbidden(_))
        ));
        assert!(reg.get_artifact(id, &Access::user("bob", true)).is_ok());
    }

    #[test]
    fn directories_materialize() {
        let (d, reg) = registry();
        let model = d.path().join("model");
        fs::create_dir_all(&model).unwrap();
        fs::write(model.join("threshold.txt"), b"3").unwrap();
        let rec = reg
            .put_dir(ArtifactKind::Model, &model, Provenance::job("j-1"))
            .unwrap();
        let out = reg.materialize_dir(&rec.persistent_id).unwrap();
        assert_eq!(fs::read(out.join("threshold.txt")).unwrap(), b"3");
        assert_eq!(reg.materialize_dir(&rec.persistent_id).unwrap(), out);
    }

    #[test]
    fn persistent_id_grammar() {
        let (job, kind, prefix) = parse_persistent_id("morf:j-0001:model:0123abcd").unwrap();
        assert_eq!(
            (job.as_str(), kind, prefix.as_str()),
            ("j-0001", ArtifactKind::Model, "0123abcd")
        );
        for bad in [
            "morf:j:model:0123ABCD",
            "morf:j:model:0123",
            "morf::model:01234567",
            "doi:j:model:01234567",
            "morf:j:weights:01234567",
        ] {
            assert!(parse_persistent_id(bad).is_err(), "{bad}");
        }
    }
}
