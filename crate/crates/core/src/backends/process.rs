//! Process plumbing shared by the process-based backends.

use std::fs::{self, File};
use std::io;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use super::wrapper::{EXIT_CODE_FILE, STDERR_FILE, STDOUT_FILE};
use super::FetchResult;
use crate::error::Result;
use crate::plugins::matching_files;

/// Log target for every externally executed command. Enable it at `info`
/// level to see the commands verbatim.
pub const COMMAND_LOG_TARGET: &str = "jobfront::commands";

fn log_command(cmd: &Command) {
    log::info!(target: COMMAND_LOG_TARGET, "{cmd:?}");
}

/// Starts `sh <wrapper> <workdir>` detached in its own process group.
pub fn spawn_wrapper(wrapper: &Path, workdir: &Path) -> io::Result<Child> {
    fs::create_dir_all(workdir)?;
    let log = File::create(workdir.join("__wrapper__.log"))?;
    let mut cmd = Command::new("/bin/sh");
    cmd.arg(wrapper)
        .arg(workdir)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(log)
        .process_group(0);
    log_command(&cmd);
    cmd.spawn()
}

/// Starts `sh -c <line>` detached in its own process group.
pub fn spawn_shell(line: &str) -> io::Result<Child> {
    let mut cmd = Command::new("/bin/sh");
    cmd.arg("-c")
        .arg(line)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .process_group(0);
    log_command(&cmd);
    cmd.spawn()
}

/// Runs `sh -c <line>` to completion.
pub fn run_shell(line: &str) -> io::Result<Output> {
    let mut cmd = Command::new("/bin/sh");
    cmd.arg("-c").arg(line).stdin(Stdio::null());
    log_command(&cmd);
    cmd.output()
}

/// Kills the whole process group led by `child` and reaps it.
pub fn kill_group(child: &mut Child) {
    let pid = child.id() as libc::pid_t;
    // SAFETY: plain syscall on a process group we created.
    unsafe {
        libc::killpg(pid, libc::SIGKILL);
    }
    let _ = child.wait();
}

pub fn pid_alive(pid: i32) -> bool {
    // SAFETY: signal 0 only checks for existence.
    pid > 0 && unsafe { libc::kill(pid, 0) } == 0
}

pub fn hostname() -> String {
    let mut buf = [0u8; 256];
    // SAFETY: buffer is valid for its length.
    let rc = unsafe { libc::gethostname(buf.as_mut_ptr() as *mut libc::c_char, buf.len()) };
    if rc != 0 {
        return "localhost".into();
    }
    let end = buf.iter().position(|&b| b == 0).unwrap_or(buf.len());
    String::from_utf8_lossy(&buf[..end]).into_owned()
}

/// Copies stdout, stderr, the exit code file and everything matching
/// `patterns` from `src` to `dest`. Missing items are listed, not fatal.
pub fn collect_outputs(src: &Path, patterns: &[String], dest: &Path) -> Result<FetchResult> {
    fs::create_dir_all(dest)?;
    let mut result = FetchResult::default();
    for name in [STDOUT_FILE, STDERR_FILE, EXIT_CODE_FILE] {
        let from = src.join(name);
        if from.is_file() {
            fs::copy(&from, dest.join(name))?;
            result.retrieved.push(name.to_string());
        } else {
            result.missing.push(name.to_string());
        }
    }
    for pattern in patterns {
        let found: Vec<PathBuf> = matching_files(src, pattern);
        if found.is_empty() {
            result.missing.push(pattern.clone());
        }
        for f in found {
            let name = f.file_name().unwrap().to_string_lossy().into_owned();
            if result.retrieved.contains(&name) {
                continue;
            }
            fs::copy(&f, dest.join(&name))?;
            result.retrieved.push(name);
        }
    }
    Ok(result)
}
