use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SandboxError;
use crate::registry::{ArtifactKind, Provenance, Registry};
use crate::{archive, digest};

/// Metadata file at the root of an image archive.
pub const MANIFEST_FILE: &str = "morf-image.json";
/// Directory holding the image filesystem inside the archive.
pub const ROOTFS_DIR: &str = "rootfs";
/// Default cap on fetched image size.
pub const DEFAULT_MAX_IMAGE_BYTES: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageManifest {
    /// Absolute path inside the rootfs followed by fixed leading arguments.
    pub entrypoint: Vec<String>,
}

/// A fetched image, stored in the registry under its digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageArtifact {
    pub reference: String,
    pub digest: String,
    pub size: u64,
    pub fetched_at: String,
    pub persistent_id: String,
}

/// Builds an image archive from a rootfs directory. Packing is
/// deterministic so the same tree always has the same digest.
pub fn pack_image(rootfs: &Path, entrypoint: &[String]) -> Result<Vec<u8>, SandboxError> {
    validate_entrypoint(entrypoint)?;
    let manifest = serde_json::to_vec_pretty(&ImageManifest {
        entrypoint: entrypoint.to_vec(),
    })
    .expect("manifest serializes");
    let io = |e: std::io::Error| SandboxError::Io {
        path: rootfs.to_path_buf(),
        source: e,
    };
    let mut builder = tar::Builder::new(Vec::new());
    archive::append_bytes(&mut builder, Path::new(MANIFEST_FILE), &manifest).map_err(io)?;
    archive::append_tree(&mut builder, rootfs, Path::new(ROOTFS_DIR)).map_err(io)?;
    builder.into_inner().map_err(io)
}

fn validate_entrypoint(entrypoint: &[String]) -> Result<(), SandboxError> {
    match entrypoint.first() {
        Some(p) if p.starts_with('/') && !p.contains("..") => Ok(()),
        _ => Err(SandboxError::InvalidImage(
            "entrypoint must start with an absolute path inside the rootfs".into(),
        )),
    }
}

fn read_reference(reference: &str, max_bytes: u64) -> Result<Vec<u8>, SandboxError> {
    let unreachable = |detail: String| SandboxError::Unreachable {
        reference: reference.to_string(),
        detail,
    };
    let too_large = || SandboxError::TooLarge {
        reference: reference.to_string(),
        max_bytes,
    };
    if reference.starts_with("http://") || reference.starts_with("https://") {
        let resp = reqwest::blocking::get(reference).map_err(|e| unreachable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(unreachable(format!("HTTP {}", resp.status())));
        }
        if resp.content_length().is_some_and(|n| n > max_bytes) {
            return Err(too_large());
        }
        let mut bytes = Vec::new();
        resp.take(max_bytes + 1)
            .read_to_end(&mut bytes)
            .map_err(|e| unreachable(e.to_string()))?;
        if bytes.len() as u64 > max_bytes {
            return Err(too_large());
        }
        Ok(bytes)
    } else {
        let path = reference.strip_prefix("file://").unwrap_or(reference);
        let meta = fs::metadata(path).map_err(|e| unreachable(e.to_string()))?;
        if meta.len() > max_bytes {
            return Err(too_large());
        }
        fs::read(path).map_err(|e| unreachable(e.to_string()))
    }
}

/// Fetches an image from a local path or HTTP(S) URL and stores it in the
/// registry. Fetching the same bytes again stores nothing new.
pub fn fetch_image(
    reference: &str,
    pinned_digest: Option<&str>,
    max_bytes: u64,
    registry: &Registry,
    provenance: Provenance,
) -> Result<ImageArtifact, SandboxError> {
    let bytes = read_reference(reference, max_bytes)?;
    let digest = digest::sha256_hex(&bytes);
    if let Some(pinned) = pinned_digest {
        if !pinned.eq_ignore_ascii_case(&digest) {
            return Err(SandboxError::DigestMismatch {
                expected: pinned.to_string(),
                actual: digest,
            });
        }
    }
    let record = registry.put_artifact(ArtifactKind::Image, &bytes, provenance)?;
    Ok(ImageArtifact {
        reference: reference.to_string(),
        digest,
        size: bytes.len() as u64,
        fetched_at: record.created_at.clone(),
        persistent_id: record.persistent_id,
    })
}

/// An image unpacked on disk and ready to run.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub digest: String,
    pub rootfs: PathBuf,
    pub manifest: ImageManifest,
}

impl PreparedImage {
    /// Host path of the entrypoint executable.
    pub fn entrypoint_host_path(&self) -> PathBuf {
        self.rootfs
            .join(self.manifest.entrypoint[0].trim_start_matches('/'))
    }

    /// Opens an already unpacked image directory.
    pub fn open(dir: &Path, digest: &str) -> Result<Self, SandboxError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read(&manifest_path).map_err(|e| SandboxError::Io {
            path: manifest_path.clone(),
            source: e,
        })?;
        let manifest: ImageManifest = serde_json::from_slice(&text)
            .map_err(|e| SandboxError::InvalidImage(format!("{MANIFEST_FILE}: {e}")))?;
        validate_entrypoint(&manifest.entrypoint)?;
        let rootfs = dir.join(ROOTFS_DIR);
        if !rootfs.is_dir() {
            return Err(SandboxError::InvalidImage(format!(
                "archive has no {ROOTFS_DIR}/ tree"
            )));
        }
        Ok(PreparedImage {
            digest: digest.to_string(),
            rootfs,
            manifest,
        })
    }
}

/// Materializes an image from the registry, re-verifying its digest.
pub fn prepare_image(
    image: &ImageArtifact,
    registry: &Registry,
) -> Result<PreparedImage, SandboxError> {
    let dir = registry.materialize_dir(&image.persistent_id)?;
    PreparedImage::open(&dir, &image.digest)
}
