use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::dsl::{Granularity, Stage, TaskScope};
use crate::registry::ArtifactKind;

/// Identity of a step's output. Two tasks with equal keys produce the same
/// artifact from a deterministic image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StepCacheKey {
    pub stage: Stage,
    pub granularity: Granularity,
    pub scope: TaskScope,
    pub image_digest: String,
    pub dataset_version: String,
    pub params_digest: String,
}

impl StepCacheKey {
    /// Canonical serialization: JSON with fields in declaration order.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("cache key serializes")
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }
}

/// Digest of step parameters: the label type and the digests of upstream
/// artifacts, in the order given.
pub fn params_digest(label_type: Option<&str>, upstream: &[(&str, &str)]) -> String {
    #[derive(Serialize)]
    struct Params<'a> {
        label_type: Option<&'a str>,
        upstream: &'a [(&'a str, &'a str)],
    }
    sha256_hex(
        serde_json::to_string(&Params {
            label_type,
            upstream,
        })
        .expect("params serialize")
        .as_bytes(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key_digest: String,
    pub key: StepCacheKey,
    pub kind: ArtifactKind,
    pub persistent_id: String,
    pub artifact_digest: String,
}

/// Step outputs by cache key, persisted as newline-delimited JSON.
pub struct StepCache {
    path: PathBuf,
    entries: Mutex<HashMap<String, CacheEntry>>,
    log: Mutex<File>,
}

impl StepCache {
    pub fn open(path: &Path) -> io::Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                if let Ok(e) = serde_json::from_str::<CacheEntry>(&line?) {
                    entries.insert(e.key_digest.clone(), e);
                }
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(StepCache {
            path: path.to_path_buf(),
            entries: Mutex::new(entries),
            log: Mutex::new(log),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn lookup(&self, key: &StepCacheKey) -> Option<CacheEntry> {
        let entries = self.entries.lock().expect("cache lock");
        entries
            .get(&key.digest())
            .filter(|e| &e.key == key)
            .cloned()
    }

    /// Records an output; a later insert for the same key replaces it.
    pub fn insert(
        &self,
        key: StepCacheKey,
        kind: ArtifactKind,
        persistent_id: &str,
        artifact_digest: &str,
    ) -> io::Result<CacheEntry> {
        let entry = CacheEntry {
            key_digest: key.digest(),
            key,
            kind,
            persistent_id: persistent_id.to_string(),
            artifact_digest: artifact_digest.to_string(),
        };
        let mut line = serde_json::to_vec(&entry).expect("cache entry serializes");
        line.push(b'\n');
        let mut log = self.log.lock().expect("cache log lock");
        log.write_all(&line)?;
        log.sync_data()?;
        self.entries
            .lock()
            .expect("cache lock")
            .insert(entry.key_digest.clone(), entry.clone());
        Ok(entry)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
