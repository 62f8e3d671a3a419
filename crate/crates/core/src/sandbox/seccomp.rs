//! Seccomp filter that kills the process on IP or packet socket creation.

use std::io;

const BPF_LD_W_ABS: u16 = 0x20;
const BPF_JEQ_K: u16 = 0x15;
const BPF_JGE_K: u16 = 0x35;
const BPF_RET_K: u16 = 0x06;

const OFFSET_NR: u32 = 0;
const OFFSET_ARCH: u32 = 4;
/// Low 32 bits of the first syscall argument (little-endian).
const OFFSET_ARG0: u32 = 16;

#[cfg(target_arch = "x86_64")]
const AUDIT_ARCH: u32 = 0xC000_003E;
#[cfg(target_arch = "aarch64")]
const AUDIT_ARCH: u32 = 0xC000_00B7;

/// Syscall numbers at or above this are the x32 ABI on x86_64.
const X32_SYSCALL_BIT: u32 = 0x4000_0000;

const BLOCKED_FAMILIES: [u32; 3] = [
    libc::AF_INET as u32,
    libc::AF_INET6 as u32,
    libc::AF_PACKET as u32,
];

fn stmt(code: u16, k: u32) -> libc::sock_filter {
    libc::sock_filter {
        code,
        jt: 0,
        jf: 0,
        k,
    }
}

fn jump(code: u16, k: u32, jt: u8, jf: u8) -> libc::sock_filter {
    libc::sock_filter { code, jt, jf, k }
}

/// Filter program. `io_uring_setup` is killed too since io_uring can open
/// sockets without the `socket` syscall.
pub(crate) fn network_filter() -> Vec<libc::sock_filter> {
    let kill = libc::SECCOMP_RET_KILL_PROCESS;
    let allow = libc::SECCOMP_RET_ALLOW;
    let mut prog = vec![
        stmt(BPF_LD_W_ABS, OFFSET_ARCH),
        jump(BPF_JEQ_K, AUDIT_ARCH, 1, 0),
        stmt(BPF_RET_K, kill),
        stmt(BPF_LD_W_ABS, OFFSET_NR),
        jump(BPF_JGE_K, X32_SYSCALL_BIT, 0, 1),
        stmt(BPF_RET_K, kill),
        jump(BPF_JEQ_K, libc::SYS_io_uring_setup as u32, 0, 1),
        stmt(BPF_RET_K, kill),
        jump(BPF_JEQ_K, libc::SYS_socket as u32, 1, 0),
        stmt(BPF_RET_K, allow),
        stmt(BPF_LD_W_ABS, OFFSET_ARG0),
    ];
    for family in BLOCKED_FAMILIES {
        prog.push(jump(BPF_JEQ_K, family, 0, 1));
        prog.push(stmt(BPF_RET_K, kill));
    }
    prog.push(stmt(BPF_RET_K, allow));
    prog
}

/// Installs `prog` on the calling thread. Meant for a `pre_exec` hook:
/// performs only syscalls on memory prepared before the fork.
pub(crate) fn install(prog: &[libc::sock_filter]) -> io::Result<()> {
    let fprog = libc::sock_fprog {
        len: prog.len() as u16,
        filter: prog.as_ptr() as *mut libc::sock_filter,
    };
    // SAFETY: plain prctl calls; `fprog` points at a live, well-formed program.
    unsafe {
        if libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0 {
            return Err(io::Error::last_os_error());
        }
        if libc::prctl(
            libc::PR_SET_SECCOMP,
            libc::SECCOMP_MODE_FILTER,
            &fprog as *const libc::sock_fprog,
        ) != 0
        {
            return Err(io::Error::last_os_error());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::os::unix::process::{CommandExt, ExitStatusExt};
    use std::process::Command;

    fn run_filtered(script: &str) -> std::process::ExitStatus {
        let prog = network_filter();
        let mut cmd = Command::new("/bin/sh");
        cmd.arg("-c").arg(script);
        // SAFETY: the hook only issues prctl on the pre-built program.
        unsafe {
            cmd.pre_exec(move || install(&prog));
        }
        cmd.status().unwrap()
    }

    #[test]
    fn ordinary_processes_run() {
        assert!(run_filtered("echo ok > /dev/null").success());
    }

    #[test]
    fn inet_socket_kills_process() {
        let python = ["/usr/bin/python3", "/usr/local/bin/python3"]
            .into_iter()
            .find(|p| std::path::Path::new(p).exists());
        let Some(python) = python else { return };
        let status = run_filtered(&format!(
            "exec {python} -c 'import socket; socket.socket(socket.AF_INET, socket.SOCK_STREAM)'"
        ));
        assert_eq!(status.signal(), Some(libc::SIGSYS));
        let unix = run_filtered(&format!(
            "exec {python} -c 'import socket; socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)'"
        ));
        assert!(unix.success());
    }
}
