use std::collections::HashMap;
use std::path::Path;
use std::process::Child;
use std::sync::Mutex;

use super::process::{collect_outputs, hostname, kill_group, pid_alive, spawn_wrapper};
use super::{Backend, BackendJobDescription, BackendStats, FetchResult, StatsCell, StatusReport};
use crate::error::{Error, Result};
use crate::job::{BackendHandle, JobEvent};
use crate::plugins::{read_exit_code, Component};

struct LocalProc {
    child: Child,
    killed: bool,
    exited: bool,
}

/// Runs each job's wrapper as a child process of this host.
pub struct LocalBackend {
    procs: Mutex<HashMap<String, LocalProc>>,
    stats: StatsCell,
    host: String,
}

impl Default for LocalBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl LocalBackend {
    pub fn new() -> Self {
        LocalBackend {
            procs: Mutex::new(HashMap::new()),
            stats: StatsCell::default(),
            host: hostname(),
        }
    }

    fn finished_report(id: &str, workdir: Option<&Path>) -> StatusReport {
        match workdir.and_then(read_exit_code) {
            Some(code) => StatusReport::new(id, "done", Some(JobEvent::BackendDoneOk)).with_exit(Some(code)),
            None => StatusReport::new(id, "failed", Some(JobEvent::BackendDoneErr)),
        }
    }

    fn report(&self, procs: &mut HashMap<String, LocalProc>, handle: &BackendHandle) -> StatusReport {
        let id = handle.backend_id.as_str();
        let workdir = handle.workdir.as_deref();
        match procs.get_mut(id) {
            Some(p) if p.killed => StatusReport::new(id, "killed", None),
            Some(p) => {
                if !p.exited {
                    match p.child.try_wait() {
                        Ok(None) => return StatusReport::new(id, "running", Some(JobEvent::BackendRunning)),
                        Ok(Some(_)) | Err(_) => p.exited = true,
                    }
                }
                Self::finished_report(id, workdir)
            }
            // Started by an earlier session: judge from the workdir and pid.
            None => {
                if workdir.and_then(read_exit_code).is_some() {
                    Self::finished_report(id, workdir)
                } else if workdir.is_some() && id.parse().is_ok_and(pid_alive) {
                    StatusReport::new(id, "running", Some(JobEvent::BackendRunning))
                } else {
                    StatusReport::lost(id)
                }
            }
        }
    }
}

impl Backend for LocalBackend {
    fn kind(&self) -> &str {
        "Local"
    }

    fn submit(&self, _backend: &Component, desc: &BackendJobDescription) -> Result<BackendHandle> {
        self.stats.count_submit();
        let child = spawn_wrapper(&desc.wrapper_path, &desc.workdir)
            .map_err(|e| Error::SubmitFailed(format!("cannot start wrapper: {e}")))?;
        let id = child.id().to_string();
        self.procs.lock().unwrap().insert(
            id.clone(),
            LocalProc {
                child,
                killed: false,
                exited: false,
            },
        );
        let mut handle = BackendHandle::new(id, "running");
        handle.actual_host = Some(self.host.clone());
        handle.workdir = Some(desc.workdir.clone());
        Ok(handle)
    }

    fn kill(&self, handle: &BackendHandle) -> Result<()> {
        self.stats.count_kill();
        let mut procs = self.procs.lock().unwrap();
        let p = procs
            .get_mut(&handle.backend_id)
            .ok_or_else(|| Error::UnknownHandle(handle.backend_id.clone()))?;
        if p.killed || p.exited || !matches!(p.child.try_wait(), Ok(None)) {
            p.exited = !p.killed;
            return Err(Error::AlreadyFinished(handle.backend_id.clone()));
        }
        kill_group(&mut p.child);
        p.killed = true;
        Ok(())
    }

    fn poll(&self, handles: &[BackendHandle]) -> Result<Vec<StatusReport>> {
        let _guard = self.stats.poll_guard();
        let mut procs = self.procs.lock().unwrap();
        Ok(handles.iter().map(|h| self.report(&mut procs, h)).collect())
    }

    fn fetch_output(&self, handle: &BackendHandle, patterns: &[String], dest: &Path) -> Result<FetchResult> {
        let workdir = handle
            .workdir
            .as_ref()
            .ok_or_else(|| Error::UnknownHandle(handle.backend_id.clone()))?;
        collect_outputs(workdir, patterns, dest)
    }

    fn stats(&self) -> BackendStats {
        self.stats.snapshot()
    }
}
