//! Daemonless backend: runs the entrypoint from a scratch copy of the
//! rootfs against a staged copy of the inputs. Network access is denied by
//! the seccomp filter; writes to inputs are detected by re-hashing them.

use std::fs;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::Command;

use super::process::{self, ProcessOutcome};
use super::stage::copy_tree;
use super::{seccomp, Backend, ExecRequest, SandboxError, Violation, ViolationKind};
use crate::digest::tree_sha256;

#[derive(Debug, Default, Clone, Copy)]
pub struct BundleRunner;

fn input_digests(data_root: &Path) -> std::io::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(data_root)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name != "output" {
            out.push((name, tree_sha256(&entry.path())?));
        }
    }
    out.sort();
    Ok(out)
}

impl Backend for BundleRunner {
    fn name(&self) -> &'static str {
        "bundle"
    }

    fn execute(&self, req: &ExecRequest) -> Result<(ProcessOutcome, Vec<Violation>), SandboxError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SandboxError::Io { path, source }
        };
        let rootfs = req.scratch.join("rootfs");
        copy_tree(&req.image.rootfs, &rootfs).map_err(io(&rootfs))?;
        let tmp = req.scratch.join("tmp");
        fs::create_dir_all(&tmp).map_err(io(&tmp))?;
        let before = input_digests(req.data_root).map_err(io(req.data_root))?;

        let entry = rootfs.join(req.argv[0].trim_start_matches('/'));
        let mut cmd = Command::new(&entry);
        cmd.args(&req.argv[1..])
            .current_dir(req.scratch)
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("MORF_DATA", req.data_root)
            .env("HOME", &tmp)
            .env("TMPDIR", &tmp)
            .env("LANG", "C");
        let filter = seccomp::network_filter();
        let memory = req.limits.memory_bytes;
        // SAFETY: the hook only calls setrlimit and prctl on data moved in.
        unsafe {
            cmd.pre_exec(move || {
                let limit = libc::rlimit {
                    rlim_cur: memory,
                    rlim_max: memory,
                };
                if libc::setrlimit(libc::RLIMIT_AS, &limit) != 0 {
                    return Err(std::io::Error::last_os_error());
                }
                seccomp::install(&filter)
            });
        }
        let outcome = process::run(cmd, req.limits.wall_clock).map_err(|e| {
            SandboxError::BackendUnavailable(format!("cannot start {}: {e}", entry.display()))
        })?;

        let after = input_digests(req.data_root).map_err(io(req.data_root))?;
        let mut violations = Vec::new();
        if before != after {
            let changed: Vec<_> = after
                .iter()
                .filter(|a| !before.contains(a))
                .chain(before.iter().filter(|b| !after.iter().any(|a| a.0 == b.0)))
                .map(|(n, _)| format!("/morf-data/{n}"))
                .collect();
            violations.push(Violation {
                kind: ViolationKind::ReadonlyWrite,
                detail: format!("wrote to read-only inputs: {}", changed.join(", ")),
            });
        }
        let produced = req.data_root.join("output");
        for entry in fs::read_dir(&produced).map_err(io(&produced))? {
            let entry = entry.map_err(io(&produced))?;
            let dst = req.output.join(entry.file_name());
            fs::rename(entry.path(), &dst)
                .or_else(|_| copy_tree(&entry.path(), &dst))
                .map_err(io(&dst))?;
        }
        Ok((outcome, violations))
    }
}
