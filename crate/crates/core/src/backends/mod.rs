//! Execution backends behind one interface.
//!
//! Every backend runs the generated job wrapper somewhere and reads back the
//! files it leaves behind. They differ in where and when the wrapper runs:
//! immediately as a local child ([`LocalBackend`]), when a simulated queue
//! slot frees up ([`BatchSimBackend`]), through a launcher command such as
//! ssh ([`RemoteShellBackend`]), or after the latency and failure model of a
//! mock grid ([`MockGridBackend`]).

mod batchsim;
mod local;
mod mockgrid;
pub mod process;
mod remote;
pub mod wrapper;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use batchsim::{BatchSimBackend, BatchSimConfig, QueueConfig, SimCounts};
pub use local::LocalBackend;
pub use mockgrid::{Latency, MockGridBackend, MockGridConfig};
pub use remote::{RemoteShellBackend, RemoteShellConfig};

use crate::error::{Error, Result};
use crate::job::{BackendHandle, JobEvent};
use crate::plugins::Component;

/// A job in the form a backend accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendJobDescription {
    pub wrapper_path: PathBuf,
    /// Where the wrapper should run when the backend runs it on this host.
    pub workdir: PathBuf,
    pub input_files: Vec<PathBuf>,
    pub output_patterns: Vec<String>,
    pub resource_hints: BTreeMap<String, String>,
}

/// One backend observation about one job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub backend_id: String,
    pub raw_status: String,
    /// `None` when the observation implies no state change.
    pub mapped_event: Option<JobEvent>,
    pub exit_code: Option<i32>,
}

impl StatusReport {
    pub fn new(backend_id: &str, raw_status: &str, mapped_event: Option<JobEvent>) -> Self {
        StatusReport {
            backend_id: backend_id.to_string(),
            raw_status: raw_status.to_string(),
            mapped_event,
            exit_code: None,
        }
    }

    pub fn with_exit(mut self, code: Option<i32>) -> Self {
        self.exit_code = code;
        self
    }

    pub fn lost(backend_id: &str) -> Self {
        StatusReport::new(backend_id, "lost", Some(JobEvent::BackendDoneErr))
    }
}

/// Files retrieved by [`Backend::fetch_output`]; `missing` lists the
/// standard files and patterns that produced nothing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FetchResult {
    pub retrieved: Vec<String>,
    pub missing: Vec<String>,
}

/// Call counters. `max_concurrent_polls` is the reentrancy high-water mark:
/// anything above 1 means two polls overlapped on one instance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendStats {
    pub submit_calls: u64,
    pub collection_calls: u64,
    pub kill_calls: u64,
    pub poll_calls: u64,
    pub max_concurrent_polls: u64,
}

#[derive(Debug, Default)]
pub struct StatsCell {
    submit_calls: AtomicU64,
    collection_calls: AtomicU64,
    kill_calls: AtomicU64,
    poll_calls: AtomicU64,
    polls_in_flight: AtomicU64,
    max_concurrent_polls: AtomicU64,
}

impl StatsCell {
    pub fn count_submit(&self) {
        self.submit_calls.fetch_add(1, Ordering::SeqCst);
    }

    pub fn count_collection(&self) {
        self.collection_calls.fetch_add(1, Ordering::SeqCst);
    }

    pub fn count_kill(&self) {
        self.kill_calls.fetch_add(1, Ordering::SeqCst);
    }

    /// Marks a poll in flight until the guard drops.
    pub fn poll_guard(&self) -> PollGuard<'_> {
        self.poll_calls.fetch_add(1, Ordering::SeqCst);
        let now = self.polls_in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_concurrent_polls.fetch_max(now, Ordering::SeqCst);
        PollGuard { cell: self }
    }

    pub fn snapshot(&self) -> BackendStats {
        BackendStats {
            submit_calls: self.submit_calls.load(Ordering::SeqCst),
            collection_calls: self.collection_calls.load(Ordering::SeqCst),
            kill_calls: self.kill_calls.load(Ordering::SeqCst),
            poll_calls: self.poll_calls.load(Ordering::SeqCst),
            max_concurrent_polls: self.max_concurrent_polls.load(Ordering::SeqCst),
        }
    }
}

pub struct PollGuard<'a> {
    cell: &'a StatsCell,
}

impl Drop for PollGuard<'_> {
    fn drop(&mut self) {
        self.cell.polls_in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

/// A processing system.
///
/// Implementations serialize their own state; calls on different backends
/// may run concurrently. `poll` must not modify job records, it only
/// observes.
pub trait Backend: Send + Sync {
    fn kind(&self) -> &str;

    /// Whether submit, kill and fetch require a valid credential.
    fn requires_credential(&self) -> bool {
        false
    }

    /// Whether [`Backend::submit_collection`] is a single backend call.
    fn supports_bulk(&self) -> bool {
        false
    }

    fn submit(&self, backend: &Component, desc: &BackendJobDescription) -> Result<BackendHandle>;

    /// Submits many jobs with one backend-level call.
    fn submit_collection(&self, backend: &Component, descs: &[BackendJobDescription]) -> Result<Vec<BackendHandle>> {
        let _ = (backend, descs);
        Err(Error::SubmitFailed(format!("{} does not support bulk submission", self.kind())))
    }

    /// Cancels a job. [`Error::AlreadyFinished`] signals a harmless no-op.
    fn kill(&self, handle: &BackendHandle) -> Result<()>;

    /// One report per handle, in order.
    fn poll(&self, handles: &[BackendHandle]) -> Result<Vec<StatusReport>>;

    fn fetch_output(&self, handle: &BackendHandle, patterns: &[String], dest: &Path) -> Result<FetchResult>;

    /// The wrapper's event spool for a job, if readable from this host.
    fn event_spool(&self, handle: &BackendHandle) -> Option<PathBuf> {
        handle.workdir.as_ref().map(|w| w.join(wrapper::EVENTS_FILE))
    }

    fn stats(&self) -> BackendStats;
}

/// Submits `descs`, using the backend's collection call when it has one and
/// falling back to one submit per job otherwise. On a partial fallback
/// failure the jobs already submitted are killed again.
pub fn bulk_submit(
    backend: &dyn Backend,
    component: &Component,
    descs: &[BackendJobDescription],
) -> Result<Vec<BackendHandle>> {
    if descs.is_empty() {
        return Ok(Vec::new());
    }
    if backend.supports_bulk() {
        return backend.submit_collection(component, descs);
    }
    let mut handles = Vec::with_capacity(descs.len());
    for d in descs {
        match backend.submit(component, d) {
            Ok(h) => handles.push(h),
            Err(e) => {
                for h in &handles {
                    let _ = backend.kill(h);
                }
                return Err(e);
            }
        }
    }
    Ok(handles)
}

/// Configuration of the built-in backends.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendsConfig {
    #[serde(rename = "BatchSim")]
    pub batch_sim: BatchSimConfig,
    #[serde(rename = "RemoteShell")]
    pub remote_shell: RemoteShellConfig,
    #[serde(rename = "MockGrid")]
    pub mock_grid: MockGridConfig,
}

/// One instance of each built-in backend.
#[derive(Clone)]
pub struct BackendSet {
    pub local: Arc<LocalBackend>,
    pub batch_sim: Arc<BatchSimBackend>,
    pub remote_shell: Arc<RemoteShellBackend>,
    pub mock_grid: Arc<MockGridBackend>,
}

impl BackendSet {
    /// `scratch` holds backend-private directories (remote and grid spools)
    /// unless the configuration names them.
    pub fn new(config: &BackendsConfig, scratch: &Path) -> Result<Self> {
        Ok(BackendSet {
            local: Arc::new(LocalBackend::new()),
            batch_sim: Arc::new(BatchSimBackend::new(config.batch_sim.clone())?),
            remote_shell: Arc::new(RemoteShellBackend::new(config.remote_shell.clone(), scratch)),
            mock_grid: Arc::new(MockGridBackend::new(config.mock_grid.clone(), scratch)?),
        })
    }
}
