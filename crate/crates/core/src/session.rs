//! The session: the single command path through which jobs are created,
//! submitted, monitored and removed.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard, Weak};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backends::wrapper::SensorConfig;
use crate::backends::{bulk_submit, Backend, BackendJobDescription, BackendSet, BackendsConfig, StatusReport};
use crate::clock::{Clock, SystemClock};
use crate::error::{Error, Result};
use crate::job::{derive_master_status, transition, BackendHandle, Job, JobEvent, JobPatch, JobRef, JobStatus, JobTemplate};
use crate::lifecycle::{
    start_monitor, CredentialConfig, CredentialManager, CredentialStatus, EventBus, EventKind, EventSink,
    FileSink, GatedOp, MonitorConfig, MonitorControl, MonitorEvent, MonitorHost, PollTrace, SensorId,
    SpoolReader,
};
use crate::persistence::{
    JobFilter, JobTreeNode, LoadReport, Repository, SandboxSizeWarning, SessionLock, Workspace,
    DEFAULT_SANDBOX_WARN_BYTES,
};
use crate::plugins::builtin::{builtin_registry, TEXT_MERGER};
use crate::plugins::{read_exit_code, Category, Component, HandlerContext, PluginRegistry, ValidationResult};
use crate::tasks::SubjobOutput;
use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    pub repository_root: PathBuf,
    /// Defaults to `<repository_root>/workspace`.
    pub workspace_root: Option<PathBuf>,
    /// Plugin names to keep per category; categories not listed keep all.
    pub enabled_plugins: BTreeMap<Category, Vec<String>>,
    pub monitor: MonitorConfig,
    pub backends: BackendsConfig,
    pub credential: CredentialConfig,
    pub sensor: SensorConfig,
    pub sandbox_warn_bytes: u64,
    pub event_retention: usize,
    /// File sensor receiving every event, if set.
    pub event_log: Option<PathBuf>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            repository_root: PathBuf::from("jobfront-repo"),
            workspace_root: None,
            enabled_plugins: BTreeMap::new(),
            monitor: MonitorConfig::default(),
            backends: BackendsConfig::default(),
            credential: CredentialConfig::default(),
            sensor: SensorConfig::default(),
            sandbox_warn_bytes: DEFAULT_SANDBOX_WARN_BYTES,
            event_retention: 10_000,
            event_log: None,
        }
    }
}

impl SessionConfig {
    pub fn at(root: impl Into<PathBuf>) -> Self {
        SessionConfig {
            repository_root: root.into(),
            ..Default::default()
        }
    }

    pub fn workspace_root(&self) -> PathBuf {
        self.workspace_root
            .clone()
            .unwrap_or_else(|| self.repository_root.join("workspace"))
    }

    /// Private directories of backends that keep their own spools.
    pub fn scratch_root(&self) -> PathBuf {
        self.repository_root.join("backends")
    }
}

/// Verbs applicable to a selection of jobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BulkVerb {
    Submit,
    Kill,
    Resubmit,
    Remove,
}

impl std::str::FromStr for BulkVerb {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "submit" => Ok(BulkVerb::Submit),
            "kill" => Ok(BulkVerb::Kill),
            "resubmit" => Ok(BulkVerb::Resubmit),
            "remove" | "rm" => Ok(BulkVerb::Remove),
            _ => Err(Error::InvalidFilter(format!("unknown verb `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BulkResult {
    Ok,
    /// The verb's transition is illegal from the job's status.
    Skipped,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BulkOutcome {
    pub id: u64,
    pub result: BulkResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub status: Option<JobStatus>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

struct State {
    repo: Repository,
    spool: SpoolReader,
    /// Jobs whose `completed` event has been emitted.
    completed_seen: HashSet<JobRef>,
}

struct Inner {
    config: SessionConfig,
    registry: Arc<PluginRegistry>,
    clock: Arc<dyn Clock>,
    bus: Arc<EventBus>,
    creds: CredentialManager,
    workspace: Workspace,
    state: Mutex<State>,
    monitor: Mutex<Option<MonitorControl>>,
    load_report: LoadReport,
    _lock: SessionLock,
}

/// A handle on an open repository. Cheap to clone; all clones share state.
#[derive(Clone)]
pub struct Session {
    inner: Arc<Inner>,
}

/// A job unit (plain job or subjob) ready to hand to a backend.
struct Prepared {
    r: JobRef,
    desc: BackendJobDescription,
}

fn status_event(r: JobRef, from: JobStatus, to: JobStatus, now: chrono::DateTime<chrono::Utc>) -> MonitorEvent {
    MonitorEvent::new(Some(r), EventKind::StatusChanged, now)
        .with("from", from.as_str())
        .with("to", to.as_str())
}

/// Writes the backend's answer into the component's informational attributes.
fn record_handle(registry: &PluginRegistry, backend: &mut Component, handle: &BackendHandle) {
    let Ok(schema) = registry.schema_of(Category::Backend, &backend.plugin) else {
        return;
    };
    let mut set = |name: &str, v: Option<&String>| {
        if let (Some(v), Some(_)) = (v, schema.attribute(name)) {
            backend.set(name, Value::Str(v.clone()));
        }
    };
    set("id", Some(&handle.backend_id));
    set("status", Some(&handle.raw_status));
    set("actualqueue", handle.actual_queue.as_ref());
    set("actualhost", handle.actual_host.as_ref());
    set("actualce", handle.actual_host.as_ref());
    if schema.attribute("submit_count").is_some() {
        let n = backend.int_attr("submit_count").unwrap_or(0);
        backend.set("submit_count", Value::Int(n + 1));
    }
}

impl Session {
    pub fn open(config: SessionConfig) -> Result<Self> {
        Self::open_with(config, Arc::new(SystemClock))
    }

    /// Opens with the built-in plugins and an injected clock.
    pub fn open_with(config: SessionConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        let backends = BackendSet::new(&config.backends, &config.scratch_root())?;
        let registry = builtin_registry(&backends)?;
        Self::open_with_registry(config, registry, clock)
    }

    pub fn open_with_registry(config: SessionConfig, mut registry: PluginRegistry, clock: Arc<dyn Clock>) -> Result<Self> {
        config.monitor.validate()?;
        for (cat, names) in &config.enabled_plugins {
            for n in names {
                if !registry.contains(*cat, n) {
                    return Err(Error::ConfigError(format!("enabled plugin {cat}/{n} is not available")));
                }
            }
            registry.retain_enabled(*cat, names);
        }
        let lock = SessionLock::acquire(&config.repository_root)?;
        let registry = Arc::new(registry);
        let (repo, load_report) = Repository::open(&config.repository_root, registry.clone())?;
        let workspace = Workspace::new(config.workspace_root(), config.sandbox_warn_bytes)?;
        let bus = Arc::new(EventBus::new(config.event_retention));
        if let Some(path) = &config.event_log {
            bus.register_sensor(Box::new(FileSink::open(path)?), None);
        }
        let creds = CredentialManager::new(&config.credential, clock.clone());
        Ok(Session {
            inner: Arc::new(Inner {
                config,
                registry,
                clock,
                bus,
                creds,
                workspace,
                state: Mutex::new(State {
                    repo,
                    spool: SpoolReader::new(),
                    completed_seen: HashSet::new(),
                }),
                monitor: Mutex::new(None),
                load_report,
                _lock: lock,
            }),
        })
    }

    fn state(&self) -> MutexGuard<'_, State> {
        self.inner.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn config(&self) -> &SessionConfig {
        &self.inner.config
    }

    pub fn registry(&self) -> &Arc<PluginRegistry> {
        &self.inner.registry
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.inner.clock
    }

    pub fn bus(&self) -> &Arc<EventBus> {
        &self.inner.bus
    }

    pub fn workspace(&self) -> &Workspace {
        &self.inner.workspace
    }

    pub fn load_report(&self) -> &LoadReport {
        &self.inner.load_report
    }

    fn now(&self) -> chrono::DateTime<chrono::Utc> {
        self.inner.clock.now()
    }

    fn emit_all(&self, events: Vec<MonitorEvent>) {
        for e in events {
            self.inner.bus.emit(e);
        }
    }

    // ---- creation and editing -------------------------------------------

    fn user_component(&self, category: Category, c: &Component) -> Result<Component> {
        self.inner.registry.component(category, &c.plugin, c.attrs.clone())
    }

    /// Validates every component of a user-supplied patch.
    fn validate_patch(&self, patch: &JobPatch) -> Result<JobPatch> {
        let mut p = patch.clone();
        if let Some(c) = &patch.application {
            p.application = Some(self.user_component(Category::Application, c)?);
        }
        if let Some(c) = &patch.backend {
            p.backend = Some(self.user_component(Category::Backend, c)?);
        }
        for (slot, cat) in [
            (&mut p.inputdata, Category::Dataset),
            (&mut p.outputdata, Category::Dataset),
            (&mut p.splitter, Category::Splitter),
            (&mut p.merger, Category::Merger),
        ] {
            if let Some(Some(c)) = slot {
                *slot = Some(Some(self.user_component(cat, c)?));
            }
        }
        Ok(p)
    }

    /// Creates and persists a job in status `new`.
    pub fn new_job(&self, application: Component, backend: Component, options: JobPatch) -> Result<Job> {
        let mut doc = options;
        doc.application = Some(application);
        doc.backend = Some(backend);
        self.create_job(&doc)
    }

    /// Creates a job from a document whose `application` and `backend` are
    /// required.
    pub fn create_job(&self, doc: &JobPatch) -> Result<Job> {
        let patch = self.validate_patch(doc)?;
        let (Some(app), Some(backend)) = (patch.application.clone(), patch.backend.clone()) else {
            return Err(Error::ConfigError("a job needs an application and a backend".into()));
        };
        let mut st = self.state();
        let id = st.repo.allocate_id()?;
        let mut job = Job::new(id, app, backend, self.now());
        patch.apply(&mut job);
        self.inner.workspace.allocate(job.job_ref())?;
        st.repo.save(&job)?;
        Ok(job)
    }

    /// A copy of `source` reset for a new submission.
    fn copy_of(&self, source: &Job, id: u64, patch: &JobPatch) -> Result<Job> {
        let reg = &self.inner.registry;
        let mut copy = source.fresh_copy(id);
        copy.created_at = self.now();
        copy.backend = reg.normalize(Category::Backend, reg.user_settings(Category::Backend, &copy.backend), false)?;
        self.validate_patch(patch)?.apply(&mut copy);
        Ok(copy)
    }

    pub fn copy_job(&self, id: u64, overrides: &JobPatch) -> Result<Job> {
        let mut st = self.state();
        let source = st.repo.get(id)?.clone();
        let new_id = st.repo.allocate_id()?;
        let copy = self.copy_of(&source, new_id, overrides)?;
        self.inner.workspace.allocate(copy.job_ref())?;
        st.repo.save(&copy)?;
        Ok(copy)
    }

    /// Edits a job that has not been submitted.
    pub fn update_job(&self, id: u64, patch: &JobPatch) -> Result<Job> {
        let mut st = self.state();
        let mut job = st.repo.get(id)?.clone();
        job.ensure_mutable()?;
        self.validate_patch(patch)?.apply(&mut job);
        st.repo.save(&job)?;
        Ok(job)
    }

    /// Sets one attribute of one component through its proxy view.
    pub fn set_attribute(&self, id: u64, slot: &str, attribute: &str, value: Value) -> Result<Job> {
        let mut st = self.state();
        let mut job = st.repo.get(id)?.clone();
        job.ensure_mutable()?;
        let (comp, cat) = match slot {
            "application" => (Some(&mut job.application), Category::Application),
            "backend" => (Some(&mut job.backend), Category::Backend),
            "inputdata" => (job.inputdata.as_mut(), Category::Dataset),
            "outputdata" => (job.outputdata.as_mut(), Category::Dataset),
            "splitter" => (job.splitter.as_mut(), Category::Splitter),
            "merger" => (job.merger.as_mut(), Category::Merger),
            other => return Err(Error::AttributeNotVisible(other.to_string())),
        };
        let comp = comp.ok_or_else(|| Error::AttributeNotVisible(format!("{slot}.{attribute}")))?;
        let mut view = self.inner.registry.proxy_view(cat, comp)?;
        view.set(attribute, value)?;
        *comp = view.into_component();
        st.repo.save(&job)?;
        Ok(job)
    }

    // ---- reading --------------------------------------------------------

    pub fn job(&self, id: u64) -> Result<Job> {
        self.state().repo.get(id).cloned()
    }

    pub fn get(&self, r: JobRef) -> Result<Job> {
        let st = self.state();
        st.repo
            .get(r.id)?
            .get(r)
            .cloned()
            .ok_or_else(|| Error::UnknownJob(r.to_string()))
    }

    pub fn jobs(&self) -> Vec<Job> {
        self.state().repo.jobs().cloned().collect()
    }

    pub fn job_count(&self) -> usize {
        self.state().repo.len()
    }

    /// Jobs matching `filter`, ordered by id.
    pub fn select(&self, filter: &JobFilter) -> Result<Vec<Job>> {
        Ok(self.state().repo.select(filter)?.into_iter().cloned().collect())
    }

    pub fn select_ids(&self, filter: &JobFilter) -> Result<Vec<u64>> {
        self.state().repo.select_ids(filter)
    }

    // ---- submission -----------------------------------------------------

    fn backend_of(&self, job: &Job) -> Result<Arc<dyn Backend>> {
        self.inner.registry.backend(&job.backend.plugin)
    }

    /// Configures and translates each unit. On failure, leaves no partial
    /// wrapper state behind that would matter: the job stays as it was.
    fn prepare(&self, master: &Job, units: &[&Job]) -> Result<Vec<Prepared>> {
        let reg = &self.inner.registry;
        let ws = &self.inner.workspace;
        let app = reg.application(&master.application.plugin)?;
        let handler = reg.resolve_handler(&master.application.plugin, &master.backend.plugin)?;
        let backend_settings = reg.user_settings(Category::Backend, &master.backend);
        let mut out = Vec::with_capacity(units.len());
        for unit in units {
            let r = unit.job_ref();
            let configured = app.configure(&unit.application, unit)?;
            ws.allocate(r)?;
            ws.reset_run(r)?;
            for w in ws.stage_input(unit)? {
                let SandboxSizeWarning { file, bytes, .. } = w;
                log::warn!("job {r}: large sandbox file {} ({bytes} bytes)", file.display());
            }
            let ctx = HandlerContext {
                job_label: r.to_string(),
                input_dir: ws.input_dir(r),
                workdir: ws.run_dir(r),
                sensor: self.inner.config.sensor.clone(),
            };
            let desc = handler.translate(&configured, &backend_settings, &ctx)?;
            out.push(Prepared { r, desc });
        }
        Ok(out)
    }

    fn send(&self, master: &Job, prepared: &[Prepared]) -> Result<Vec<BackendHandle>> {
        let backend = self.backend_of(master)?;
        let settings = self.inner.registry.user_settings(Category::Backend, &master.backend);
        let descs: Vec<BackendJobDescription> = prepared.iter().map(|p| p.desc.clone()).collect();
        if descs.len() == 1 && master.subjobs.is_empty() {
            return Ok(vec![backend.submit(&settings, &descs[0])?]);
        }
        bulk_submit(&*backend, &settings, &descs)
    }

    /// Marks `unit` as accepted by the backend.
    fn accept(&self, unit: &mut Job, master_backend: &Component, handle: BackendHandle, event: JobEvent, events: &mut Vec<MonitorEvent>) -> Result<()> {
        let now = self.now();
        let r = unit.job_ref();
        let from = unit.status;
        unit.apply_event(event)?;
        unit.apply_event(JobEvent::BackendAccepted)?;
        unit.backend = master_backend.clone();
        record_handle(&self.inner.registry, &mut unit.backend, &handle);
        unit.backend_handle = Some(handle);
        unit.submitted_at = Some(now);
        unit.finished_at = None;
        let mut ev = MonitorEvent::new(Some(r), EventKind::Submitted, now).with("backend", unit.backend.plugin.clone());
        if let Some(h) = &unit.backend_handle {
            ev = ev.with("backend_id", h.backend_id.clone());
        }
        events.push(ev);
        events.push(status_event(r, from, unit.status, now));
        Ok(())
    }

    /// Submits a job in status `new`, splitting it first if it has a
    /// splitter. On any failure the job is left in status `new`.
    pub fn submit(&self, id: u64) -> Result<Job> {
        let mut st = self.state();
        let mut job = st.repo.get(id)?.clone();
        if job.read_only {
            return Err(Error::ReadOnly(id.to_string()));
        }
        transition(job.status, JobEvent::SubmitRequested)?;
        let backend = self.backend_of(&job)?;
        self.inner.creds.gate(GatedOp::Submit, backend.requires_credential())?;
        let reg = &self.inner.registry;
        reg.resolve_handler(&job.application.plugin, &job.backend.plugin)?;

        if let Some(sp) = job.splitter.clone() {
            let subjobs = reg.splitter(&sp.plugin)?.split(&sp, &job)?;
            if subjobs.is_empty() {
                return Err(Error::EmptySplit);
            }
            job.subjobs = subjobs;
        }
        let units: Vec<&Job> = if job.subjobs.is_empty() { vec![&job] } else { job.subjobs.iter().collect() };
        let cleanup = |job: &Job| {
            if !job.subjobs.is_empty() {
                self.inner.workspace.remove_subjobs(job.id, job.subjobs.len());
            }
        };
        let prepared = match self.prepare(&job, &units) {
            Ok(p) => p,
            Err(e) => {
                cleanup(&job);
                return Err(e);
            }
        };
        let handles = match self.send(&job, &prepared) {
            Ok(h) => h,
            Err(e) => {
                cleanup(&job);
                return Err(e);
            }
        };

        let now = self.now();
        let mut events = Vec::new();
        let master_backend = job.backend.clone();
        for p in &prepared {
            st.spool.reset(p.r);
            st.completed_seen.remove(&p.r);
        }
        if job.subjobs.is_empty() {
            let handle = handles.into_iter().next().ok_or_else(|| Error::SubmitFailed("backend returned no handle".into()))?;
            self.accept(&mut job, &master_backend, handle, JobEvent::SubmitRequested, &mut events)?;
        } else {
            if handles.len() != job.subjobs.len() {
                return Err(Error::SubmitFailed(format!(
                    "backend returned {} handles for {} subjobs",
                    handles.len(),
                    job.subjobs.len()
                )));
            }
            for (sj, h) in job.subjobs.iter_mut().zip(handles) {
                self.accept(sj, &master_backend, h, JobEvent::SubmitRequested, &mut events)?;
            }
            let from = job.status;
            job.apply_event(JobEvent::SubmitRequested)?;
            job.apply_event(JobEvent::BackendAccepted)?;
            job.submitted_at = Some(now);
            events.push(
                MonitorEvent::new(Some(job.job_ref()), EventKind::Submitted, now)
                    .with("backend", job.backend.plugin.clone())
                    .with("subjobs", job.subjobs.len().to_string()),
            );
            events.push(status_event(job.job_ref(), from, job.status, now));
        }
        st.repo.save(&job)?;
        drop(st);
        self.emit_all(events);
        Ok(job)
    }

    /// Resubmits a failed or killed job. For a split job, only its failed
    /// and killed subjobs run again.
    pub fn resubmit(&self, r: JobRef) -> Result<Job> {
        let mut st = self.state();
        let mut job = st.repo.get(r.id)?.clone();
        if job.read_only {
            return Err(Error::ReadOnly(r.to_string()));
        }
        let target = job.get(r).ok_or_else(|| Error::UnknownJob(r.to_string()))?;
        transition(target.status, JobEvent::ResubmitRequested)?;
        let backend = self.backend_of(&job)?;
        self.inner.creds.gate(GatedOp::Submit, backend.requires_credential())?;

        let indices: Vec<Option<usize>> = match (r.subjob, job.subjobs.is_empty()) {
            (None, true) => vec![None],
            (None, false) => job
                .subjobs
                .iter()
                .enumerate()
                .filter(|(_, sj)| matches!(sj.status, JobStatus::Failed | JobStatus::Killed))
                .map(|(i, _)| Some(i))
                .collect(),
            (Some(i), _) => vec![Some(i)],
        };
        if indices.is_empty() {
            return Err(Error::IllegalTransition {
                from: job.status,
                event: JobEvent::ResubmitRequested,
            });
        }
        let units: Vec<&Job> = indices
            .iter()
            .map(|i| match i {
                None => &job,
                Some(i) => &job.subjobs[*i],
            })
            .collect();
        let prepared = self.prepare(&job, &units)?;
        let backend_settings = self.inner.registry.user_settings(Category::Backend, &job.backend);
        let descs: Vec<BackendJobDescription> = prepared.iter().map(|p| p.desc.clone()).collect();
        let handles = if descs.len() == 1 {
            vec![backend.submit(&backend_settings, &descs[0])?]
        } else {
            bulk_submit(&*backend, &backend_settings, &descs)?
        };

        let now = self.now();
        let mut events = Vec::new();
        for p in &prepared {
            st.spool.reset(p.r);
            st.completed_seen.remove(&p.r);
        }
        let master_backend = job.backend.clone();
        for (i, h) in indices.iter().zip(handles) {
            let unit = match i {
                None => &mut job,
                Some(i) => &mut job.subjobs[*i],
            };
            // Keep informational attributes such as submit_count.
            let mut b = unit.backend.clone();
            if b.plugin != master_backend.plugin {
                b = master_backend.clone();
            }
            self.accept(unit, &b, h, JobEvent::ResubmitRequested, &mut events)?;
        }
        if !job.subjobs.is_empty() && job.status.is_terminal() {
            let from = job.status;
            job.apply_event(JobEvent::ResubmitRequested)?;
            job.finished_at = None;
            events.push(status_event(job.job_ref(), from, job.status, now));
        }
        st.repo.save(&job)?;
        drop(st);
        self.emit_all(events);
        Ok(job)
    }

    /// Kills a job, a split job's active subjobs, or one subjob.
    pub fn kill(&self, r: JobRef) -> Result<Job> {
        let mut st = self.state();
        let mut job = st.repo.get(r.id)?.clone();
        if job.read_only {
            return Err(Error::ReadOnly(r.to_string()));
        }
        let target = job.get(r).ok_or_else(|| Error::UnknownJob(r.to_string()))?;
        transition(target.status, JobEvent::KillRequested)?;
        let now = self.now();
        let mut events = Vec::new();
        let units: Vec<Option<usize>> = match (r.subjob, job.subjobs.is_empty()) {
            (None, true) => vec![None],
            (None, false) => (0..job.subjobs.len())
                .filter(|&i| transition(job.subjobs[i].status, JobEvent::KillRequested).is_ok())
                .map(Some)
                .collect(),
            (Some(i), _) => vec![Some(i)],
        };
        let backend = self.backend_of(&job)?;
        let needs_cred = backend.requires_credential();
        if units.iter().any(|i| {
            let u = match i {
                None => &job,
                Some(i) => &job.subjobs[*i],
            };
            u.backend_handle.is_some()
        }) {
            self.inner.creds.gate(GatedOp::Kill, needs_cred)?;
        }
        for i in units {
            let unit = match i {
                None => &mut job,
                Some(i) => &mut job.subjobs[i],
            };
            if let Some(h) = &unit.backend_handle {
                match backend.kill(h) {
                    Ok(()) => {}
                    Err(Error::AlreadyFinished(id)) => log::info!("job {}: backend job {id} had already finished", unit.job_ref()),
                    Err(Error::UnknownHandle(id)) => log::warn!("job {}: backend no longer knows {id}", unit.job_ref()),
                    Err(e) => return Err(e),
                }
            }
            let from = unit.status;
            unit.apply_event(JobEvent::KillRequested)?;
            unit.finished_at = Some(now);
            if let Some(h) = unit.backend_handle.as_mut() {
                h.raw_status = "killed".into();
            }
            events.push(status_event(unit.job_ref(), from, unit.status, now));
        }
        if !job.subjobs.is_empty() {
            let from = job.status;
            let to = if r.subjob.is_none() {
                JobStatus::Killed
            } else {
                derive_master_status(&job.subjobs.iter().map(|s| s.status).collect::<Vec<_>>())?
            };
            if from != to {
                job.status = to;
                if to.is_terminal() {
                    job.finished_at = Some(now);
                }
                events.push(status_event(job.job_ref(), from, to, now));
            }
        }
        st.repo.save(&job)?;
        drop(st);
        self.emit_all(events);
        Ok(job)
    }

    /// Deletes a job, its workspace and its jobtree labels, killing it first
    /// if it is still active.
    pub fn remove(&self, id: u64) -> Result<()> {
        let active = self.job(id)?.status.is_active();
        if active {
            if let Err(e) = self.kill(JobRef::master(id)) {
                log::warn!("job {id}: kill before removal failed: {e}");
            }
        }
        let mut st = self.state();
        st.repo.remove(id)?;
        st.spool.forget(id);
        st.completed_seen.retain(|r| r.id != id);
        drop(st);
        self.inner.workspace.remove(id)?;
        Ok(())
    }

    /// Applies `verb` to every job matching `filter`. Jobs for which the
    /// verb's transition is illegal are skipped.
    pub fn bulk(&self, verb: BulkVerb, filter: &JobFilter) -> Result<Vec<BulkOutcome>> {
        let ids = self.select_ids(filter)?;
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let res = match verb {
                BulkVerb::Submit => self.submit(id).map(|j| Some(j.status)),
                BulkVerb::Kill => self.kill(JobRef::master(id)).map(|j| Some(j.status)),
                BulkVerb::Resubmit => self.resubmit(JobRef::master(id)).map(|j| Some(j.status)),
                BulkVerb::Remove => self.remove(id).map(|_| None),
            };
            out.push(match res {
                Ok(status) => BulkOutcome {
                    id,
                    result: BulkResult::Ok,
                    status,
                    code: None,
                    message: None,
                },
                Err(e) => BulkOutcome {
                    id,
                    result: if matches!(e, Error::IllegalTransition { .. }) {
                        BulkResult::Skipped
                    } else {
                        BulkResult::Error
                    },
                    status: self.job(id).ok().map(|j| j.status),
                    code: Some(e.code().to_string()),
                    message: Some(e.to_string()),
                },
            });
        }
        Ok(out)
    }

    // ---- workspace ------------------------------------------------------

    /// The tail of a job file, from retrieved output or, while the job
    /// runs, from its working directory.
    pub fn peek(&self, r: JobRef, file: &str, lines: Option<usize>) -> Result<String> {
        let unit = self.get(r)?;
        let run_dir = unit.backend_handle.as_ref().and_then(|h| h.workdir.clone());
        self.inner.workspace.peek(r, file, lines, run_dir.as_deref())
    }

    /// Runs a merger over a split job's subjobs: `merger`, else the job's
    /// own, else a `TextMerger` with defaults.
    pub fn merge(&self, id: u64, merger: Option<Component>) -> Result<Vec<PathBuf>> {
        let job = self.job(id)?;
        if job.subjobs.is_empty() {
            return Err(Error::MergeIncomplete(format!("job {id} has no subjobs")));
        }
        if let Some(active) = job.subjobs.iter().find(|s| !s.status.is_terminal()) {
            return Err(Error::MergeIncomplete(format!(
                "subjob {} is {}",
                active.job_ref(),
                active.status
            )));
        }
        let reg = &self.inner.registry;
        let comp = match merger {
            Some(c) => self.user_component(Category::Merger, &c)?,
            None => match &job.merger {
                Some(m) => m.clone(),
                None => reg.schema_of(Category::Merger, TEXT_MERGER)?.default_component(),
            },
        };
        self.run_merger(&job, &comp)
    }

    fn run_merger(&self, job: &Job, comp: &Component) -> Result<Vec<PathBuf>> {
        self.inner.auto_merge(job, comp)
    }

    // ---- templates and jobtree --------------------------------------------

    pub fn save_template(&self, id: u64, name: &str) -> Result<JobTemplate> {
        let mut st = self.state();
        let source = st.repo.get(id)?.clone();
        let mut payload = self.copy_of(&source, 0, &JobPatch::default())?;
        payload.created_at = source.created_at;
        let name = if name.is_empty() { source.name.clone() } else { name.to_string() };
        st.repo.save_template(&name, payload)
    }

    pub fn templates(&self) -> Vec<JobTemplate> {
        self.state().repo.templates().cloned().collect()
    }

    /// A new job from a template, with copy semantics.
    pub fn instantiate_template(&self, template_id: u64, overrides: &JobPatch) -> Result<Job> {
        let mut st = self.state();
        let payload = st.repo.template(template_id)?.payload.clone();
        let id = st.repo.allocate_id()?;
        let job = self.copy_of(&payload, id, overrides)?;
        self.inner.workspace.allocate(job.job_ref())?;
        st.repo.save(&job)?;
        Ok(job)
    }

    pub fn tree_mkdir(&self, path: &str) -> Result<()> {
        self.state().repo.update_tree(|t| t.mkdir(path))
    }

    pub fn tree_add(&self, path: &str, id: u64) -> Result<()> {
        let mut st = self.state();
        st.repo.get(id)?;
        st.repo.update_tree(|t| t.add(path, id))
    }

    pub fn tree_list(&self, path: &str) -> Result<JobTreeNode> {
        self.state().repo.tree().list(path)
    }

    pub fn tree_rm(&self, path: &str, recursive: bool) -> Result<()> {
        self.state().repo.update_tree(|t| t.rm(path, recursive))
    }

    // ---- credentials and events -----------------------------------------

    pub fn credential_status(&self) -> CredentialStatus {
        self.inner.creds.status()
    }

    /// Checks the credential, emitting a warning event when due.
    pub fn credential_check(&self) -> CredentialStatus {
        self.inner.creds.check(&self.inner.bus);
        self.inner.creds.status()
    }

    pub fn credential_renew(&self, ttl_s: Option<f64>) -> CredentialStatus {
        self.inner.creds.renew(ttl_s)
    }

    pub fn credential_destroy(&self) -> CredentialStatus {
        self.inner.creds.destroy()
    }

    pub fn credential_gate(&self, op: GatedOp, backend: &str) -> Result<()> {
        let b = self.inner.registry.backend(backend)?;
        self.inner.creds.gate(op, b.requires_credential())
    }

    pub fn register_sensor(&self, sink: Box<dyn EventSink>, filter: Option<Vec<EventKind>>) -> SensorId {
        self.inner.bus.register_sensor(sink, filter)
    }

    pub fn emit(&self, event: MonitorEvent) -> u64 {
        self.inner.bus.emit(event)
    }

    // ---- monitoring -----------------------------------------------------

    pub fn start_monitor(&self) -> Result<()> {
        self.start_monitor_with(self.inner.config.monitor.clone())
    }

    pub fn start_monitor_with(&self, config: MonitorConfig) -> Result<()> {
        let mut m = self.inner.monitor.lock().unwrap();
        if m.is_some() {
            return Err(Error::AlreadyRunning);
        }
        let weak: Weak<Inner> = Arc::downgrade(&self.inner);
        let host: Weak<dyn MonitorHost> = weak;
        *m = Some(start_monitor(host, config)?);
        Ok(())
    }

    /// Stops the monitor, if running. Returns its poll trace.
    pub fn stop_monitor(&self) -> Vec<PollTrace> {
        let control = self.inner.monitor.lock().unwrap().take();
        match control {
            Some(c) => {
                let trace = c.trace();
                c.stop();
                trace
            }
            None => Vec::new(),
        }
    }

    pub fn monitor_running(&self) -> bool {
        self.inner.monitor.lock().unwrap().is_some()
    }

    pub fn monitor_trace(&self) -> Vec<PollTrace> {
        self.inner
            .monitor
            .lock()
            .unwrap()
            .as_ref()
            .map(|c| c.trace())
            .unwrap_or_default()
    }

    /// Polls every backend with active jobs once, on the calling thread,
    /// and applies the results. Does nothing while the monitor runs, which
    /// owns polling then.
    pub fn refresh(&self) -> Result<()> {
        if self.monitor_running() {
            return Ok(());
        }
        self.inner.tick();
        for (name, jobs) in self.inner.active_handles() {
            let Some(backend) = self.inner.backend(&name) else {
                continue;
            };
            let handles: Vec<BackendHandle> = jobs.iter().map(|(_, h)| h.clone()).collect();
            match backend.poll(&handles) {
                Ok(reports) => self.inner.apply_poll(&name, &jobs, reports),
                Err(e) => log::warn!("poll of backend {name} failed: {e}"),
            }
        }
        Ok(())
    }

    /// Waits until the job is terminal, refreshing by itself when no
    /// monitor runs. Returns the job as last seen on timeout.
    pub fn wait(&self, r: JobRef, timeout: Duration) -> Result<Job> {
        let deadline = Instant::now() + timeout;
        loop {
            self.refresh()?;
            let j = self.get(r)?;
            if j.status.is_terminal() || Instant::now() >= deadline {
                return Ok(j);
            }
            thread::sleep(Duration::from_millis(25));
        }
    }

    /// Active jobs grouped by backend type.
    pub fn active_handles(&self) -> BTreeMap<String, Vec<(JobRef, BackendHandle)>> {
        self.inner.active_handles()
    }

    /// Applies backend reports as the monitor would.
    pub fn apply_reports(&self, backend: &str, jobs: &[(JobRef, BackendHandle)], reports: Vec<StatusReport>) {
        self.inner.apply_poll(backend, jobs, reports)
    }

    /// Stops the monitor and waits for sensors to catch up.
    pub fn close(&self) {
        self.stop_monitor();
        self.inner.bus.flush();
    }
}

impl Inner {
    fn now(&self) -> chrono::DateTime<chrono::Utc> {
        self.clock.now()
    }

    fn ingest_spool(&self, st: &mut State, unit: &Job, backend: &dyn Backend, events: &mut Vec<MonitorEvent>) {
        let Some(h) = &unit.backend_handle else {
            return;
        };
        let Some(path) = backend.event_spool(h) else {
            return;
        };
        let r = unit.job_ref();
        for line in st.spool.read_new(r, &path) {
            if line.kind == EventKind::Completed && !st.completed_seen.insert(r) {
                continue;
            }
            let mut ev = MonitorEvent::new(Some(r), line.kind, line.timestamp);
            ev.payload = line.payload;
            events.push(ev);
        }
    }

    /// Retrieves output and decides between completed and failed.
    fn finish_unit(
        &self,
        st: &mut State,
        unit: &mut Job,
        backend: &dyn Backend,
        report: &StatusReport,
        events: &mut Vec<MonitorEvent>,
    ) -> Result<()> {
        let r = unit.job_ref();
        let now = self.now();
        let out_dir = self.workspace.output_dir(r);
        let handle = unit.backend_handle.clone().expect("active unit has a handle");
        let mut reason: Option<String> = None;
        match backend.fetch_output(&handle, &unit.output_sandbox, &out_dir) {
            Ok(f) if !f.missing.is_empty() => {
                log::info!("job {r}: output missing: {}", f.missing.join(", "));
            }
            Ok(_) => {}
            Err(e) => reason = Some(format!("output retrieval failed: {e}")),
        }
        let exit_code = read_exit_code(&out_dir).or(report.exit_code);
        let mut event = report.mapped_event.unwrap_or(JobEvent::BackendDoneErr);
        if event == JobEvent::BackendDoneOk {
            if let Some(why) = &reason {
                log::warn!("job {r}: {why}");
                event = JobEvent::BackendDoneErr;
            } else {
                let app = self.registry.application(&unit.application.plugin)?;
                if let ValidationResult::Invalid(why) = app.postprocess(&unit.application, unit, &out_dir) {
                    log::info!("job {r}: output invalid: {why}");
                    reason = Some(why);
                    event = JobEvent::BackendDoneErr;
                }
            }
        } else if reason.is_none() {
            reason = Some(format!("backend reported {}", report.raw_status));
        }
        let from = unit.status;
        unit.apply_event(event)?;
        unit.finished_at = Some(now);
        if let Some(h) = unit.backend_handle.as_mut() {
            h.raw_status = report.raw_status.clone();
            h.exit_code = exit_code;
        }
        if let Some(h) = unit.backend_handle.clone() {
            unit.backend.set("status", Value::Str(h.raw_status));
        }
        if st.completed_seen.insert(r) {
            let mut ev = MonitorEvent::new(Some(r), EventKind::Completed, now).with("source", "monitor");
            if let Some(c) = exit_code {
                ev = ev.with("exit_code", c.to_string());
            }
            events.push(ev);
        }
        let mut ev = status_event(r, from, unit.status, now);
        if let Some(why) = reason {
            ev = ev.with("reason", why);
        }
        events.push(ev);
        Ok(())
    }

    /// Recomputes a split job's status from its subjobs.
    fn roll_up(&self, job: &mut Job, events: &mut Vec<MonitorEvent>) {
        let statuses: Vec<JobStatus> = job.subjobs.iter().map(|s| s.status).collect();
        let Ok(to) = derive_master_status(&statuses) else {
            return;
        };
        let from = job.status;
        if to == from {
            return;
        }
        let now = self.now();
        job.status = to;
        events.push(status_event(job.job_ref(), from, to, now));
        if to.is_terminal() {
            job.finished_at = Some(now);
        }
    }
}

impl MonitorHost for Inner {
    fn active_handles(&self) -> BTreeMap<String, Vec<(JobRef, BackendHandle)>> {
        let st = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let mut out: BTreeMap<String, Vec<(JobRef, BackendHandle)>> = BTreeMap::new();
        for job in st.repo.jobs() {
            if job.read_only || !job.status.is_active() {
                continue;
            }
            let units: Vec<&Job> = if job.subjobs.is_empty() { vec![job] } else { job.subjobs.iter().collect() };
            for u in units {
                if let (true, Some(h)) = (u.status.is_active(), &u.backend_handle) {
                    out.entry(job.backend.plugin.clone())
                        .or_default()
                        .push((u.job_ref(), h.clone()));
                }
            }
        }
        out
    }

    fn backend(&self, name: &str) -> Option<Arc<dyn Backend>> {
        self.registry.backend(name).ok()
    }

    fn apply_poll(&self, backend_name: &str, jobs: &[(JobRef, BackendHandle)], reports: Vec<StatusReport>) {
        let Some(backend) = self.backend(backend_name) else {
            return;
        };
        let mut st = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let mut events = Vec::new();
        let mut touched: BTreeMap<u64, Job> = BTreeMap::new();
        for ((r, dispatched), report) in jobs.iter().zip(reports) {
            if !touched.contains_key(&r.id) {
                match st.repo.get(r.id) {
                    Ok(j) => {
                        touched.insert(r.id, j.clone());
                    }
                    Err(_) => continue,
                }
            }
            let mut job = touched.remove(&r.id).expect("just inserted");
            let result = self.apply_one(&mut st, &mut job, *r, dispatched, &report, &*backend, &mut events);
            if let Err(e) = result {
                log::warn!("job {r}: report {:?} not applied: {e}", report.raw_status);
            }
            touched.insert(r.id, job);
        }
        for (_, mut job) in touched {
            if !job.subjobs.is_empty() && job.status.is_active() {
                self.roll_up(&mut job, &mut events);
                if job.status.is_terminal() {
                    if let Some(m) = job.merger.clone() {
                        if let Err(e) = self.auto_merge(&job, &m) {
                            log::warn!("job {}: merge failed: {e}", job.id);
                        }
                    }
                }
            }
            if let Err(e) = st.repo.save(&job) {
                log::error!("job {}: cannot save: {e}", job.id);
            }
        }
        drop(st);
        for e in events {
            self.bus.emit(e);
        }
    }

    fn tick(&self) {
        self.creds.check(&self.bus);
    }
}

impl Inner {
    #[allow(clippy::too_many_arguments)]
    fn apply_one(
        &self,
        st: &mut State,
        job: &mut Job,
        r: JobRef,
        dispatched: &BackendHandle,
        report: &StatusReport,
        backend: &dyn Backend,
        events: &mut Vec<MonitorEvent>,
    ) -> Result<()> {
        let unit = job.get_mut(r).ok_or_else(|| Error::UnknownJob(r.to_string()))?;
        let current = unit.backend_handle.as_ref().map(|h| h.backend_id.as_str());
        if current != Some(dispatched.backend_id.as_str()) || !unit.status.is_active() {
            // The job moved on (killed, resubmitted) since the poll started.
            return Ok(());
        }
        self.ingest_spool(st, unit, backend, events);
        match report.mapped_event {
            None => {
                if let Some(h) = unit.backend_handle.as_mut() {
                    h.raw_status = report.raw_status.clone();
                }
            }
            Some(JobEvent::BackendRunning) => {
                if let Some(h) = unit.backend_handle.as_mut() {
                    h.raw_status = report.raw_status.clone();
                }
                unit.backend.set("status", Value::Str(report.raw_status.clone()));
                if unit.status == JobStatus::Submitted {
                    let from = unit.status;
                    unit.apply_event(JobEvent::BackendRunning)?;
                    events.push(status_event(r, from, unit.status, self.now()));
                }
            }
            Some(JobEvent::BackendDoneOk | JobEvent::BackendDoneErr) => {
                if let Err(e) = self.creds.gate(GatedOp::Fetch, backend.requires_credential()) {
                    log::warn!("job {r}: output retrieval deferred: {e}");
                    return Ok(());
                }
                self.finish_unit(st, unit, backend, report, events)?;
            }
            Some(other) => {
                log::warn!("job {r}: backend reported unexpected event {other}");
            }
        }
        Ok(())
    }

    fn auto_merge(&self, job: &Job, comp: &Component) -> Result<Vec<PathBuf>> {
        let merger = self.registry.merger(&comp.plugin)?;
        let outputs: Vec<SubjobOutput> = job
            .subjobs
            .iter()
            .map(|s| SubjobOutput {
                index: s.subjob_index.unwrap_or(0),
                status: s.status,
                output_dir: self.workspace.output_dir(s.job_ref()),
            })
            .collect();
        merger.merge(comp, &outputs, &self.workspace.output_dir(job.job_ref()))
    }
}

impl Drop for Inner {
    fn drop(&mut self) {
        let control = self.monitor.get_mut().map(Option::take).unwrap_or(None);
        if let Some(c) = control {
            c.stop();
        }
    }
}
