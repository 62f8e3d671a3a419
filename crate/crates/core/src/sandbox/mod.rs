//! Fetching, checking and running user images in a sandbox with no
//! network, immutable inputs and wall-clock and memory limits.
//!
//! Two backends implement [`Backend`]: [`NamespaceBackend`] (mount and
//! network namespaces, overlay rootfs, chroot) and [`BundleRunner`] (scratch
//! copy of the rootfs, no daemon or privileges needed). Both install the
//! same seccomp filter, which kills the process on any attempt to open an
//! IP or packet socket.

mod bundle_runner;
mod image;
mod namespace;
mod process;
mod seccomp;
mod stage;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::catalog::{MountSpec, RunMode};
use crate::digest::tree_sha256;
use crate::registry::RegistryError;

pub use bundle_runner::BundleRunner;
pub use image::{
    fetch_image, pack_image, prepare_image, ImageArtifact, ImageManifest, PreparedImage,
    DEFAULT_MAX_IMAGE_BYTES, MANIFEST_FILE, ROOTFS_DIR,
};
pub use namespace::NamespaceBackend;
pub use process::{ProcessOutcome, OUTPUT_CAP};

/// Time allowed for the `--mode probe` check.
pub const PROBE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("image reference {reference} is unreachable: {detail}")]
    Unreachable { reference: String, detail: String },
    #[error("image {reference} exceeds the {max_bytes}-byte cap")]
    TooLarge { reference: String, max_bytes: u64 },
    #[error("image digest mismatch: config pins {expected}, archive hashes to {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("image check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("sandbox backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("output directory {0} is not empty")]
    OutputNotEmpty(PathBuf),
}

impl SandboxError {
    /// Failures of the platform rather than of the user's image; these are
    /// worth one retry.
    pub fn is_infrastructure(&self) -> bool {
        matches!(
            self,
            SandboxError::Io { .. }
                | SandboxError::BackendUnavailable(_)
                | SandboxError::Registry(RegistryError::Storage { .. })
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceLimits {
    #[serde(with = "secs")]
    pub wall_clock: Duration,
    pub memory_bytes: u64,
    pub cpus: u32,
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        f64::deserialize(d).map(Duration::from_secs_f64)
    }
}

impl Default for ResourceLimits {
    fn default() -> Self {
        ResourceLimits {
            wall_clock: Duration::from_secs(3600),
            memory_bytes: 2 << 30,
            cpus: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    Network,
    ReadonlyWrite,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::Network => "network",
            ViolationKind::ReadonlyWrite => "readonly-write",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RunFailure {
    Timeout,
    OutOfMemory,
    NonzeroExit { code: i32 },
    Signal { signal: i32 },
    MissingOutput { path: String },
    SandboxViolation,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunFailure::Timeout => f.write_str("wall-clock limit exceeded"),
            RunFailure::OutOfMemory => f.write_str("memory limit exceeded"),
            RunFailure::NonzeroExit { code } => write!(f, "exited with status {code}"),
            RunFailure::Signal { signal } => write!(f, "killed by signal {signal}"),
            RunFailure::MissingOutput { path } => write!(f, "required output {path} missing"),
            RunFailure::SandboxViolation => f.write_str("sandbox violation"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunResult {
    pub task_id: String,
    pub backend: String,
    pub exit_code: Option<i32>,
    pub signal: Option<i32>,
    pub duration_ms: u64,
    pub stdout: String,
    pub stderr: String,
    /// Required outputs found in the output directory.
    pub outputs: Vec<PathBuf>,
    pub violations: Vec<Violation>,
    pub failure: Option<RunFailure>,
}

impl RunResult {
    pub fn success(&self) -> bool {
        self.failure.is_none()
    }
}

/// Input to a backend: everything staged and resolved.
pub struct ExecRequest<'a> {
    pub image: &'a PreparedImage,
    /// Entrypoint (path inside the rootfs) and all arguments.
    pub argv: Vec<String>,
    pub scratch: &'a Path,
    /// Staged copy of the `/morf-data` tree with an empty `output/`.
    pub data_root: &'a Path,
    pub output: &'a Path,
    pub limits: ResourceLimits,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &'static str;
    fn execute(&self, req: &ExecRequest) -> Result<(ProcessOutcome, Vec<Violation>), SandboxError>;
}

/// Backend by name: `namespace` or `bundle`.
pub fn backend_by_name(name: &str) -> Option<Box<dyn Backend>> {
    match name {
        "namespace" => Some(Box::new(NamespaceBackend)),
        "bundle" => Some(Box::new(BundleRunner)),
        _ => None,
    }
}

/// Required output for a run mode, relative to the output directory.
pub fn required_output(mode: RunMode) -> Option<&'static str> {
    match mode {
        RunMode::Extract => Some("features.csv"),
        RunMode::Train => Some("model"),
        RunMode::Test => Some("predictions.csv"),
        RunMode::Probe => None,
    }
}

fn output_present(output: &Path, mode: RunMode) -> Option<PathBuf> {
    let rel = required_output(mode)?;
    let p = output.join(rel);
    let ok = match mode {
        RunMode::Train => fs::read_dir(&p)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false),
        _ => p.is_file(),
    };
    ok.then_some(p)
}

const OOM_MARKERS: [&str; 3] = ["memory allocation of", "out of memory", "MemoryError"];

/// Runs an image once against `mounts`, writing outputs to `output`
/// (created if missing, must be empty). Scratch space is taken from
/// `scratch_root` and removed afterwards.
///
/// Problems caused by the image (exit status, timeouts, violations, missing
/// outputs) are reported in the [`RunResult`]; `Err` means the platform
/// could not carry out the run.
pub fn run_sandboxed(
    task_id: &str,
    image: &PreparedImage,
    mounts: &MountSpec,
    limits: ResourceLimits,
    backend: &dyn Backend,
    scratch_root: &Path,
    output: &Path,
) -> Result<RunResult, SandboxError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SandboxError::Io { path, source }
    };
    fs::create_dir_all(output).map_err(io(output))?;
    if fs::read_dir(output).map_err(io(output))?.next().is_some() {
        return Err(SandboxError::OutputNotEmpty(output.to_path_buf()));
    }
    for m in &mounts.read_only_mounts {
        if !m.source.exists() {
            return Err(SandboxError::Io {
                path: m.source.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "mount source missing"),
            });
        }
    }
    fs::create_dir_all(scratch_root).map_err(io(scratch_root))?;
    let scratch = tempfile::Builder::new()
        .prefix("run-")
        .tempdir_in(scratch_root)
        .map_err(io(scratch_root))?;
    let data_root = scratch.path().join("data");
    stage::stage_inputs(&mounts.read_only_mounts, &data_root).map_err(io(&data_root))?;

    let source_digests = |mounts: &MountSpec| -> Result<Vec<String>, SandboxError> {
        mounts
            .read_only_mounts
            .iter()
            .map(|m| tree_sha256(&m.source).map_err(io(&m.source)))
            .collect()
    };
    let before = source_digests(mounts)?;

    let mut argv = image.manifest.entrypoint.clone();
    argv.extend(mounts.args.to_args());
    let req = ExecRequest {
        image,
        argv,
        scratch: scratch.path(),
        data_root: &data_root,
        output,
        limits,
    };
    let (outcome, mut violations) = backend.execute(&req)?;

    if source_digests(mounts)? != before {
        violations.push(Violation {
            kind: ViolationKind::ReadonlyWrite,
            detail: "host input changed during the run".into(),
        });
    }
    let signal = process::signal_of(&outcome.status);
    if signal == Some(libc::SIGSYS) {
        violations.push(Violation {
            kind: ViolationKind::Network,
            detail: "killed by the sandbox for opening a network socket".into(),
        });
    }

    let found = output_present(output, mounts.mode);
    let exit_code = outcome.status.code();
    let failure = if !violations.is_empty() {
        Some(RunFailure::SandboxViolation)
    } else if outcome.timed_out {
        Some(RunFailure::Timeout)
    } else if OOM_MARKERS.iter().any(|m| outcome.stderr.contains(m)) && !outcome.status.success() {
        Some(RunFailure::OutOfMemory)
    } else if let Some(sig) = signal {
        Some(RunFailure::Signal { signal: sig })
    } else if exit_code != Some(0) {
        Some(RunFailure::NonzeroExit {
            code: exit_code.unwrap_or(-1),
        })
    } else if let (Some(rel), None) = (required_output(mounts.mode), &found) {
        Some(RunFailure::MissingOutput {
            path: rel.to_string(),
        })
    } else {
        None
    };

    Ok(RunResult {
        task_id: task_id.to_string(),
        backend: backend.name().to_string(),
        exit_code,
        signal,
        duration_ms: outcome.duration.as_millis() as u64,
        stdout: outcome.stdout,
        stderr: outcome.stderr,
        outputs: found.into_iter().collect(),
        violations,
        failure,
    })
}

/// The image check: the entrypoint exists and `--mode probe` exits 0
/// within [`PROBE_TIMEOUT`].
pub fn check_image(
    image: &PreparedImage,
    backend: &dyn Backend,
    scratch_root: &Path,
) -> Result<RunResult, SandboxError> {
    let entry = image.entrypoint_host_path();
    match fs::symlink_metadata(&entry) {
        Ok(m) if !m.is_dir() => {}
        _ => {
            return Err(SandboxError::CheckFailed(format!(
                "entrypoint {} not found in image",
                image.manifest.entrypoint[0]
            )))
        }
    }
    let out = tempfile::Builder::new()
        .prefix("probe-")
        .tempdir_in({
            fs::create_dir_all(scratch_root).map_err(|e| SandboxError::Io {
                path: scratch_root.to_path_buf(),
                source: e,
            })?;
            scratch_root
        })
        .map_err(|e| SandboxError::Io {
            path: scratch_root.to_path_buf(),
            source: e,
        })?;
    let limits = ResourceLimits {
        wall_clock: PROBE_TIMEOUT,
        ..ResourceLimits::default()
    };
    let result = run_sandboxed(
        "probe",
        image,
        &MountSpec::probe(),
        limits,
        backend,
        scratch_root,
        out.path(),
    )?;
    if let Some(f) = &result.failure {
        return Err(SandboxError::CheckFailed(format!("probe run failed: {f}")));
    }
    Ok(result)
}
