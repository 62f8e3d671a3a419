use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

/// Cap on each captured stream.
pub const OUTPUT_CAP: usize = 1 << 20;

pub(crate) fn truncation_marker() -> String {
    format!("\n[morf: output truncated at {OUTPUT_CAP} bytes]\n")
}

#[derive(Debug)]
pub struct ProcessOutcome {
    pub status: ExitStatus,
    pub duration: Duration,
    pub timed_out: bool,
    pub stdout: String,
    pub stderr: String,
}

fn capture(mut stream: impl Read + Send + 'static) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        let mut truncated = false;
        loop {
            match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = OUTPUT_CAP.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                    truncated |= n > room;
                }
            }
        }
        let mut text = String::from_utf8_lossy(&kept).into_owned();
        if truncated {
            text.push_str(&truncation_marker());
        }
        text
    })
}

fn kill_group(child: &Child) {
    // SAFETY: signalling our own child's process group.
    unsafe {
        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
    }
}

/// Spawns `cmd` in its own process group, captures both streams and kills
/// the whole group once `timeout` elapses.
pub(crate) fn run(mut cmd: Command, timeout: Duration) -> std::io::Result<ProcessOutcome> {
    cmd.stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    // SAFETY: prctl is async-signal-safe. Children die with the spawning
    // thread so a crashed platform leaves no running sandboxes behind.
    unsafe {
        cmd.pre_exec(|| {
            if libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            Ok(())
        });
    }
    let start = Instant::now();
    let mut child = cmd.spawn()?;
    let out = capture(child.stdout.take().expect("piped stdout"));
    let err = capture(child.stderr.take().expect("piped stderr"));
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if start.elapsed() >= timeout {
            timed_out = true;
            kill_group(&child);
            break child.wait()?;
        }
        thread::sleep(Duration::from_millis(10));
    };
    // Reap stragglers that still hold the pipes.
    kill_group(&child);
    let duration = start.elapsed();
    Ok(ProcessOutcome {
        status,
        duration,
        timed_out,
        stdout: out.join().unwrap_or_default(),
        stderr: err.join().unwrap_or_default(),
    })
}

pub(crate) fn signal_of(status: &ExitStatus) -> Option<i32> {
    status.signal()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn captures_and_caps_output() {
        let mut cmd = Command::new("/bin/sh");
        cmd.arg("-c")
            .arg("head -c 2000000 /dev/zero | tr '\\0' x; echo err >&2");
        let o = run(cmd, Duration::from_secs(20)).unwrap();
        assert!(o.status.success());
        assert_eq!(o.stdout.len(), OUTPUT_CAP + truncation_marker().len());
        assert!(o.stdout.ends_with(&truncation_marker()));
        assert_eq!(o.stderr, "err\n");
    }

    #[test]
    fn kills_on_timeout() {
        let mut cmd = Command::new("/bin/sh");
        cmd.arg("-c").arg("sleep 30 & sleep 30");
        let o = run(cmd, Duration::from_millis(300)).unwrap();
        assert!(o.timed_out);
        assert!(o.duration < Duration::from_secs(5));
    }
}
