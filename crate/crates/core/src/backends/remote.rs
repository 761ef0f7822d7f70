use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Child;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::process::{collect_outputs, kill_group, run_shell, spawn_shell};
use super::wrapper::shell_quote;
use super::{Backend, BackendJobDescription, BackendStats, FetchResult, StatsCell, StatusReport};
use crate::error::{Error, Result};
use crate::job::{BackendHandle, JobEvent};
use crate::plugins::Component;

/// Command templates used to drive a remote machine.
///
/// Placeholders: `{host}`, `{wrapper}`, `{workdir}` and, for `fetch`,
/// `{dest}`. Substituted values are shell-quoted. The defaults run on the
/// local machine, which makes the backend testable without ssh; an ssh setup
/// would use e.g. `ssh {host} sh -s {workdir} < {wrapper}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteShellConfig {
    pub launcher: String,
    /// Prints the job's exit code on stdout once it has finished.
    pub check: String,
    /// Copies the remote workdir contents into `{dest}`.
    pub fetch: String,
    /// Root of the per-job working directories on the remote side.
    pub remote_root: Option<PathBuf>,
}

impl Default for RemoteShellConfig {
    fn default() -> Self {
        RemoteShellConfig {
            launcher: "/bin/sh {wrapper} {workdir}".into(),
            check: "cat {workdir}/__exitcode__".into(),
            fetch: "mkdir -p {dest} && cp -R {workdir}/. {dest}".into(),
            remote_root: None,
        }
    }
}

pub fn render_template(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), &shell_quote(v));
    }
    out
}

struct RemoteJob {
    launcher: Child,
    workdir: PathBuf,
    host: String,
    killed: bool,
}

/// Launches wrappers through configurable shell command templates.
pub struct RemoteShellBackend {
    config: RemoteShellConfig,
    remote_root: PathBuf,
    jobs: Mutex<(u64, HashMap<String, RemoteJob>)>,
    stats: StatsCell,
}

impl RemoteShellBackend {
    pub fn new(config: RemoteShellConfig, scratch: &Path) -> Self {
        let remote_root = config
            .remote_root
            .clone()
            .unwrap_or_else(|| scratch.join("remote"));
        RemoteShellBackend {
            config,
            remote_root,
            jobs: Mutex::new((0, HashMap::new())),
            stats: StatsCell::default(),
        }
    }

    fn check(&self, id: &str, job: &RemoteJob) -> StatusReport {
        let line = render_template(
            &self.config.check,
            &[("host", &job.host), ("workdir", &job.workdir.to_string_lossy())],
        );
        match run_shell(&line) {
            Ok(out) if out.status.success() => {
                match String::from_utf8_lossy(&out.stdout).trim().parse::<i32>() {
                    Ok(code) => StatusReport::new(id, "done", Some(JobEvent::BackendDoneOk)).with_exit(Some(code)),
                    Err(_) => StatusReport::new(id, "failed", Some(JobEvent::BackendDoneErr)),
                }
            }
            _ => StatusReport::new(id, "failed", Some(JobEvent::BackendDoneErr)),
        }
    }
}

impl Backend for RemoteShellBackend {
    fn kind(&self) -> &str {
        "RemoteShell"
    }

    fn submit(&self, backend: &Component, desc: &BackendJobDescription) -> Result<BackendHandle> {
        self.stats.count_submit();
        let host = backend.str_attr("host").filter(|h| !h.is_empty()).unwrap_or("localhost").to_string();
        let mut guard = self.jobs.lock().unwrap();
        let id = format!("rsh-{}", guard.0);
        guard.0 += 1;
        let workdir = self.remote_root.join(&id);
        let line = render_template(
            &self.config.launcher,
            &[
                ("host", &host),
                ("wrapper", &desc.wrapper_path.to_string_lossy()),
                ("workdir", &workdir.to_string_lossy()),
            ],
        );
        let launcher = spawn_shell(&line).map_err(|e| Error::TransportError(format!("{line}: {e}")))?;
        guard.1.insert(
            id.clone(),
            RemoteJob {
                launcher,
                workdir: workdir.clone(),
                host: host.clone(),
                killed: false,
            },
        );
        let mut handle = BackendHandle::new(id, "running");
        handle.actual_host = Some(host);
        handle.workdir = Some(workdir);
        Ok(handle)
    }

    fn kill(&self, handle: &BackendHandle) -> Result<()> {
        self.stats.count_kill();
        let mut guard = self.jobs.lock().unwrap();
        let job = guard
            .1
            .get_mut(&handle.backend_id)
            .ok_or_else(|| Error::UnknownHandle(handle.backend_id.clone()))?;
        if job.killed || !matches!(job.launcher.try_wait(), Ok(None)) {
            return Err(Error::AlreadyFinished(handle.backend_id.clone()));
        }
        kill_group(&mut job.launcher);
        job.killed = true;
        Ok(())
    }

    fn poll(&self, handles: &[BackendHandle]) -> Result<Vec<StatusReport>> {
        let _guard = self.stats.poll_guard();
        let mut guard = self.jobs.lock().unwrap();
        let mut out = Vec::with_capacity(handles.len());
        for h in handles {
            let id = h.backend_id.as_str();
            let report = match guard.1.get_mut(id) {
                None => StatusReport::lost(id),
                Some(job) if job.killed => StatusReport::new(id, "killed", None),
                Some(job) => match job.launcher.try_wait() {
                    Ok(None) => StatusReport::new(id, "running", Some(JobEvent::BackendRunning)),
                    _ => self.check(id, job),
                },
            };
            out.push(report);
        }
        Ok(out)
    }

    fn fetch_output(&self, handle: &BackendHandle, patterns: &[String], dest: &Path) -> Result<FetchResult> {
        let (workdir, host) = {
            let guard = self.jobs.lock().unwrap();
            match guard.1.get(&handle.backend_id) {
                Some(j) => (j.workdir.clone(), j.host.clone()),
                None => (
                    handle
                        .workdir
                        .clone()
                        .ok_or_else(|| Error::UnknownHandle(handle.backend_id.clone()))?,
                    handle.actual_host.clone().unwrap_or_default(),
                ),
            }
        };
        let stage = dest.with_file_name(format!(".stage-{}", handle.backend_id));
        let _ = fs::remove_dir_all(&stage);
        let line = render_template(
            &self.config.fetch,
            &[
                ("host", &host),
                ("workdir", &workdir.to_string_lossy()),
                ("dest", &stage.to_string_lossy()),
            ],
        );
        let out = run_shell(&line).map_err(|e| Error::TransportError(format!("{line}: {e}")))?;
        if !out.status.success() {
            return Err(Error::TransportError(format!(
                "{line}: {}",
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let result = collect_outputs(&stage, patterns, dest);
        let _ = fs::remove_dir_all(&stage);
        result
    }

    fn stats(&self) -> BackendStats {
        self.stats.snapshot()
    }
}
