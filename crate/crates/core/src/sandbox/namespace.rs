//! Container backend: private mount and network namespaces, an overlay of
//! the image rootfs, read-only host system directories and a chroot.

use std::ffi::{CStr, CString};
use std::fs;
use std::io;
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::symlink;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::Command;

use super::process::{self, ProcessOutcome};
use super::{seccomp, Backend, ExecRequest, SandboxError, Violation, ViolationKind};

/// Host directories provided to images that do not ship their own.
const SYSTEM_DIRS: [&str; 8] = [
    "usr",
    "bin",
    "sbin",
    "lib",
    "lib32",
    "lib64",
    "libx32",
    "etc/ld.so.cache",
];
const DEVICES: [&str; 3] = ["null", "zero", "urandom"];

#[derive(Debug, Default, Clone, Copy)]
pub struct NamespaceBackend;

fn cstr(p: &Path) -> CString {
    CString::new(p.as_os_str().as_bytes()).expect("path without NUL")
}

fn check(rc: libc::c_int) -> io::Result<()> {
    if rc == 0 {
        Ok(())
    } else {
        Err(io::Error::last_os_error())
    }
}

struct Bind {
    source: CString,
    target: CString,
    read_only: bool,
}

/// Everything the child needs, allocated before fork.
struct Plan {
    user_maps: Option<[(CString, CString); 3]>,
    root: CString,
    root_opts: CString,
    binds: Vec<Bind>,
    data_target: CString,
    data_opts: CString,
    output: Bind,
    tmp: CString,
    filter: Vec<libc::sock_filter>,
    memory_bytes: u64,
}

const OVERLAY: &CStr = c"overlay";
const TMPFS: &CStr = c"tmpfs";
const TMPFS_OPTS: &CStr = c"size=67108864,mode=1777";
const SLASH: &CStr = c"/";

unsafe fn mount(
    src: *const libc::c_char,
    dst: &CStr,
    fstype: *const libc::c_char,
    flags: libc::c_ulong,
    data: *const libc::c_char,
) -> io::Result<()> {
    check(libc::mount(
        src,
        dst.as_ptr(),
        fstype,
        flags,
        data as *const libc::c_void,
    ))
}

unsafe fn bind(b: &Bind) -> io::Result<()> {
    mount(
        b.source.as_ptr(),
        &b.target,
        std::ptr::null(),
        libc::MS_BIND | libc::MS_REC,
        std::ptr::null(),
    )?;
    if b.read_only {
        let base = libc::MS_BIND | libc::MS_REMOUNT | libc::MS_RDONLY;
        if mount(
            std::ptr::null(),
            &b.target,
            std::ptr::null(),
            base,
            std::ptr::null(),
        )
        .is_err()
        {
            mount(
                std::ptr::null(),
                &b.target,
                std::ptr::null(),
                base | libc::MS_NOSUID | libc::MS_NODEV,
                std::ptr::null(),
            )?;
        }
    }
    Ok(())
}

unsafe fn write_file(path: &CString, contents: &CString) -> io::Result<()> {
    let fd = libc::open(path.as_ptr(), libc::O_WRONLY | libc::O_CLOEXEC);
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    let bytes = contents.as_bytes();
    let n = libc::write(fd, bytes.as_ptr() as *const libc::c_void, bytes.len());
    libc::close(fd);
    if n != bytes.len() as isize {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

impl Plan {
    /// Runs in the forked child before exec.
    unsafe fn enter(&self) -> io::Result<()> {
        let mut flags = libc::CLONE_NEWNS | libc::CLONE_NEWNET;
        if self.user_maps.is_some() {
            flags |= libc::CLONE_NEWUSER;
        }
        check(libc::unshare(flags))?;
        if let Some(maps) = &self.user_maps {
            for (path, contents) in maps {
                write_file(path, contents)?;
            }
        }
        mount(
            std::ptr::null(),
            SLASH,
            std::ptr::null(),
            libc::MS_REC | libc::MS_PRIVATE,
            std::ptr::null(),
        )?;
        let overlay = OVERLAY.as_ptr();
        mount(overlay, &self.root, overlay, 0, self.root_opts.as_ptr())?;
        for b in &self.binds {
            bind(b)?;
        }
        mount(
            overlay,
            &self.data_target,
            overlay,
            0,
            self.data_opts.as_ptr(),
        )?;
        bind(&self.output)?;
        let tmpfs = TMPFS.as_ptr();
        mount(
            tmpfs,
            &self.tmp,
            tmpfs,
            libc::MS_NOSUID | libc::MS_NODEV,
            TMPFS_OPTS.as_ptr(),
        )?;
        check(libc::chroot(self.root.as_ptr()))?;
        check(libc::chdir(SLASH.as_ptr()))?;
        let limit = libc::rlimit {
            rlim_cur: self.memory_bytes,
            rlim_max: self.memory_bytes,
        };
        check(libc::setrlimit(libc::RLIMIT_AS, &limit))?;
        seccomp::install(&self.filter)
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SandboxError + '_ {
    move |source| SandboxError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Creates mountpoints and system links in the rootfs upper layer for
/// everything the image lacks; returns the host directories to bind.
fn prepare_root(image_root: &Path, upper: &Path) -> Result<Vec<(PathBuf, PathBuf)>, SandboxError> {
    let mut binds = Vec::new();
    for rel in SYSTEM_DIRS {
        let host = Path::new("/").join(rel);
        if fs::symlink_metadata(image_root.join(rel)).is_ok() {
            continue;
        }
        let Ok(meta) = fs::symlink_metadata(&host) else {
            continue;
        };
        let dst = upper.join(rel);
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        if meta.file_type().is_symlink() {
            let target = fs::read_link(&host).map_err(io_err(&host))?;
            symlink(&target, &dst).map_err(io_err(&dst))?;
        } else if meta.is_dir() {
            fs::create_dir_all(&dst).map_err(io_err(&dst))?;
            binds.push((host, PathBuf::from(rel)));
        } else {
            fs::write(&dst, b"").map_err(io_err(&dst))?;
            binds.push((host, PathBuf::from(rel)));
        }
    }
    let dev = upper.join("dev");
    fs::create_dir_all(&dev).map_err(io_err(&dev))?;
    for d in DEVICES {
        if image_root.join("dev").join(d).exists() {
            continue;
        }
        fs::write(dev.join(d), b"").map_err(io_err(&dev))?;
        binds.push((Path::new("/dev").join(d), Path::new("dev").join(d)));
    }
    for d in ["tmp", "morf-data"] {
        let p = upper.join(d);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    Ok(binds)
}

fn overlay_opts(lower: &Path, upper: &Path, work: &Path) -> CString {
    let mut s = b"lowerdir=".to_vec();
    s.extend_from_slice(lower.as_os_str().as_bytes());
    s.extend_from_slice(b",upperdir=");
    s.extend_from_slice(upper.as_os_str().as_bytes());
    s.extend_from_slice(b",workdir=");
    s.extend_from_slice(work.as_os_str().as_bytes());
    CString::new(s).expect("no NUL")
}

/// Paths written into the data overlay, i.e. writes to read-only inputs.
fn upper_writes(upper: &Path) -> Vec<String> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<String>) {
        let Ok(entries) = fs::read_dir(dir) else {
            return;
        };
        for e in entries.flatten() {
            let p = e.path();
            let rel = p
                .strip_prefix(root)
                .unwrap_or(&p)
                .to_string_lossy()
                .into_owned();
            // `output` is the mountpoint of the writable bind and always exists.
            if rel == "output"
                && p.is_dir()
                && fs::read_dir(&p)
                    .map(|mut d| d.next().is_none())
                    .unwrap_or(false)
            {
                continue;
            }
            out.push(format!("/morf-data/{rel}"));
            if e.file_type().map(|t| t.is_dir()).unwrap_or(false) {
                walk(&p, root, out);
            }
        }
    }
    let mut out = Vec::new();
    walk(upper, upper, &mut out);
    out.sort();
    out
}

impl Backend for NamespaceBackend {
    fn name(&self) -> &'static str {
        "namespace"
    }

    fn execute(&self, req: &ExecRequest) -> Result<(ProcessOutcome, Vec<Violation>), SandboxError> {
        let s = req.scratch;
        let dirs = ["root", "root-upper", "root-work", "data-upper", "data-work"];
        for d in dirs {
            let p = s.join(d);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let root = s.join("root");
        let image_root = &req.image.rootfs;
        let system = prepare_root(image_root, &s.join("root-upper"))?;

        // SAFETY: geteuid/getuid/getgid cannot fail.
        let (euid, uid, gid) = unsafe { (libc::geteuid(), libc::getuid(), libc::getgid()) };
        let user_maps = (euid != 0).then(|| {
            let c = |x: &str| CString::new(x).expect("no NUL");
            [
                (c("/proc/self/setgroups"), c("deny")),
                (c("/proc/self/uid_map"), c(&format!("0 {uid} 1"))),
                (c("/proc/self/gid_map"), c(&format!("0 {gid} 1"))),
            ]
        });
        let plan = Plan {
            user_maps,
            root: cstr(&root),
            root_opts: overlay_opts(image_root, &s.join("root-upper"), &s.join("root-work")),
            binds: system
                .iter()
                .map(|(host, rel)| Bind {
                    source: cstr(host),
                    target: cstr(&root.join(rel)),
                    read_only: true,
                })
                .collect(),
            data_target: cstr(&root.join("morf-data")),
            data_opts: overlay_opts(req.data_root, &s.join("data-upper"), &s.join("data-work")),
            output: Bind {
                source: cstr(req.output),
                target: cstr(&root.join("morf-data/output")),
                read_only: false,
            },
            tmp: cstr(&root.join("tmp")),
            filter: seccomp::network_filter(),
            memory_bytes: req.limits.memory_bytes,
        };

        let mut cmd = Command::new(&req.argv[0]);
        cmd.args(&req.argv[1..])
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("MORF_DATA", "/morf-data")
            .env("HOME", "/tmp")
            .env("TMPDIR", "/tmp")
            .env("LANG", "C");
        // SAFETY: the hook issues raw syscalls on memory owned by `plan`,
        // which outlives the spawn.
        unsafe {
            let plan = &plan as *const Plan as usize;
            cmd.pre_exec(move || (*(plan as *const Plan)).enter());
        }
        let outcome = process::run(cmd, req.limits.wall_clock).map_err(|e| {
            SandboxError::BackendUnavailable(format!("namespace sandbox setup failed: {e}"))
        })?;
        drop(plan);

        let writes = upper_writes(&s.join("data-upper"));
        let violations = if writes.is_empty() {
            Vec::new()
        } else {
            vec![Violation {
                kind: ViolationKind::ReadonlyWrite,
                detail: format!("wrote to read-only inputs: {}", writes.join(", ")),
            }]
        };
        Ok((outcome, violations))
    }
}
