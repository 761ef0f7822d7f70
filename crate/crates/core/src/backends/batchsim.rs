use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use std::process::Child;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::process::{collect_outputs, hostname, kill_group, spawn_wrapper};
use super::{Backend, BackendJobDescription, BackendStats, FetchResult, StatsCell, StatusReport};
use crate::error::{Error, Result};
use crate::job::{BackendHandle, JobEvent};
use crate::plugins::{read_exit_code, Component};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueConfig {
    pub slots: u32,
    /// 0 means unlimited.
    #[serde(default)]
    pub max_walltime_s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchSimConfig {
    pub queues: BTreeMap<String, QueueConfig>,
    pub default_queue: String,
    pub tick_interval_ms: u64,
    /// Advance the simulated clock from wall time on every poll. Tests turn
    /// this off and drive [`BatchSimBackend::sim_tick`] by hand.
    pub auto_tick: bool,
}

impl Default for BatchSimConfig {
    fn default() -> Self {
        let mut queues = BTreeMap::new();
        queues.insert(
            "short".to_string(),
            QueueConfig {
                slots: 4,
                max_walltime_s: 3600,
            },
        );
        queues.insert(
            "long".to_string(),
            QueueConfig {
                slots: 2,
                max_walltime_s: 0,
            },
        );
        BatchSimConfig {
            queues,
            default_queue: "short".into(),
            tick_interval_ms: 100,
            auto_tick: true,
        }
    }
}

impl BatchSimConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.queues.contains_key(&self.default_queue) {
            return Err(Error::ConfigError(format!(
                "default queue `{}` is not configured",
                self.default_queue
            )));
        }
        if let Some((name, _)) = self.queues.iter().find(|(_, q)| q.slots == 0) {
            return Err(Error::ConfigError(format!("queue `{name}` has no slots")));
        }
        if self.tick_interval_ms == 0 {
            return Err(Error::ConfigError("tick_interval_ms must be positive".into()));
        }
        Ok(())
    }
}

enum SimState {
    Queued,
    Running { child: Child, started_ms: u64 },
    Done { exit: i32 },
    Failed(String),
    Killed,
}

struct SimJob {
    queue: String,
    desc: BackendJobDescription,
    state: SimState,
}

impl SimJob {
    fn report(&self, id: &str) -> StatusReport {
        match &self.state {
            SimState::Queued => StatusReport::new(id, "queued", None),
            SimState::Running { .. } => StatusReport::new(id, "running", Some(JobEvent::BackendRunning)),
            SimState::Done { exit } => {
                StatusReport::new(id, "done", Some(JobEvent::BackendDoneOk)).with_exit(Some(*exit))
            }
            SimState::Failed(reason) => StatusReport::new(id, reason, Some(JobEvent::BackendDoneErr)),
            SimState::Killed => StatusReport::new(id, "killed", None),
        }
    }
}

struct SimWorld {
    clock_ms: u64,
    next_id: u64,
    last_tick: Instant,
    jobs: HashMap<String, SimJob>,
    queued: BTreeMap<String, VecDeque<String>>,
    running: BTreeMap<String, Vec<String>>,
    submitted: u64,
}

/// Job counts at one instant of the simulation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimCounts {
    pub queued: BTreeMap<String, usize>,
    pub running: BTreeMap<String, usize>,
    pub finished: usize,
    pub submitted: usize,
}

/// A discrete-event batch system with FIFO queues, slot limits and a
/// walltime limit per queue. Jobs run as real wrapper processes once they
/// get a slot.
pub struct BatchSimBackend {
    config: BatchSimConfig,
    state: Mutex<SimWorld>,
    stats: StatsCell,
    host: String,
}

impl BatchSimBackend {
    pub fn new(config: BatchSimConfig) -> Result<Self> {
        config.validate()?;
        Ok(BatchSimBackend {
            state: Mutex::new(SimWorld {
                clock_ms: 0,
                next_id: 0,
                last_tick: Instant::now(),
                jobs: HashMap::new(),
                queued: config.queues.keys().map(|q| (q.clone(), VecDeque::new())).collect(),
                running: config.queues.keys().map(|q| (q.clone(), Vec::new())).collect(),
                submitted: 0,
            }),
            config,
            stats: StatsCell::default(),
            host: hostname(),
        })
    }

    pub fn config(&self) -> &BatchSimConfig {
        &self.config
    }

    /// Advances the simulated clock by one tick: finishes jobs whose wrapper
    /// exited, fails jobs over the walltime, then starts queued jobs in FIFO
    /// order while slots are free. Returns a report for every job whose
    /// state changed.
    pub fn sim_tick(&self) -> Vec<StatusReport> {
        let mut st = self.state.lock().unwrap();
        self.tick_locked(&mut st)
    }

    fn tick_locked(&self, st: &mut SimWorld) -> Vec<StatusReport> {
        st.clock_ms += self.config.tick_interval_ms;
        let now = st.clock_ms;
        let mut reports = Vec::new();
        for (qname, q) in &self.config.queues {
            let running = std::mem::take(st.running.get_mut(qname).unwrap());
            let mut still = Vec::with_capacity(running.len());
            for id in running {
                let job = st.jobs.get_mut(&id).unwrap();
                let SimState::Running { child, started_ms } = &mut job.state else {
                    continue;
                };
                let exited = !matches!(child.try_wait(), Ok(None));
                if exited {
                    job.state = match read_exit_code(&job.desc.workdir) {
                        Some(exit) => SimState::Done { exit },
                        None => SimState::Failed("failed".into()),
                    };
                } else if q.max_walltime_s > 0 && now - *started_ms > q.max_walltime_s * 1000 {
                    kill_group(child);
                    job.state = SimState::Failed("walltime exceeded".into());
                } else {
                    still.push(id);
                    continue;
                }
                reports.push(job.report(&id));
            }
            while still.len() < q.slots as usize {
                let Some(id) = st.queued.get_mut(qname).unwrap().pop_front() else {
                    break;
                };
                let job = st.jobs.get_mut(&id).unwrap();
                match spawn_wrapper(&job.desc.wrapper_path, &job.desc.workdir) {
                    Ok(child) => {
                        job.state = SimState::Running { child, started_ms: now };
                        still.push(id.clone());
                    }
                    Err(e) => job.state = SimState::Failed(format!("cannot start: {e}")),
                }
                reports.push(job.report(&id));
            }
            st.running.insert(qname.clone(), still);
        }
        reports
    }

    pub fn counts(&self) -> SimCounts {
        let st = self.state.lock().unwrap();
        let mut c = SimCounts {
            submitted: st.submitted as usize,
            ..Default::default()
        };
        for (q, ids) in &st.queued {
            c.queued.insert(q.clone(), ids.len());
        }
        for (q, ids) in &st.running {
            c.running.insert(q.clone(), ids.len());
        }
        c.finished = st
            .jobs
            .values()
            .filter(|j| matches!(j.state, SimState::Done { .. } | SimState::Failed(_) | SimState::Killed))
            .count();
        c
    }

    /// Forgets every job, killing running wrappers.
    pub fn reset(&self) {
        let mut st = self.state.lock().unwrap();
        for job in st.jobs.values_mut() {
            if let SimState::Running { child, .. } = &mut job.state {
                kill_group(child);
            }
        }
        st.jobs.clear();
        st.queued.values_mut().for_each(VecDeque::clear);
        st.running.values_mut().for_each(Vec::clear);
        st.submitted = 0;
    }
}

impl Backend for BatchSimBackend {
    fn kind(&self) -> &str {
        "BatchSim"
    }

    fn submit(&self, backend: &Component, desc: &BackendJobDescription) -> Result<BackendHandle> {
        self.stats.count_submit();
        let queue = match backend.str_attr("queue").filter(|q| !q.is_empty()) {
            Some(q) => q.to_string(),
            None => self.config.default_queue.clone(),
        };
        if !self.config.queues.contains_key(&queue) {
            return Err(Error::QueueUnknown(queue));
        }
        let mut st = self.state.lock().unwrap();
        let id = format!("bsim-{}", st.next_id);
        st.next_id += 1;
        st.submitted += 1;
        st.jobs.insert(
            id.clone(),
            SimJob {
                queue: queue.clone(),
                desc: desc.clone(),
                state: SimState::Queued,
            },
        );
        st.queued.get_mut(&queue).unwrap().push_back(id.clone());
        let mut handle = BackendHandle::new(id, "queued");
        handle.actual_queue = Some(queue);
        handle.actual_host = Some(self.host.clone());
        handle.workdir = Some(desc.workdir.clone());
        Ok(handle)
    }

    fn kill(&self, handle: &BackendHandle) -> Result<()> {
        self.stats.count_kill();
        let mut st = self.state.lock().unwrap();
        let id = &handle.backend_id;
        let job = st.jobs.get_mut(id).ok_or_else(|| Error::UnknownHandle(id.clone()))?;
        let queue = job.queue.clone();
        match &mut job.state {
            SimState::Queued => {
                job.state = SimState::Killed;
                st.queued.get_mut(&queue).unwrap().retain(|q| q != id);
            }
            SimState::Running { child, .. } => {
                kill_group(child);
                job.state = SimState::Killed;
                st.running.get_mut(&queue).unwrap().retain(|q| q != id);
            }
            _ => return Err(Error::AlreadyFinished(id.clone())),
        }
        Ok(())
    }

    fn poll(&self, handles: &[BackendHandle]) -> Result<Vec<StatusReport>> {
        let _guard = self.stats.poll_guard();
        let mut st = self.state.lock().unwrap();
        if self.config.auto_tick {
            let tick = self.config.tick_interval_ms as u128;
            let due = (st.last_tick.elapsed().as_millis() / tick).min(10_000) as u32;
            for _ in 0..due {
                self.tick_locked(&mut st);
            }
            st.last_tick += std::time::Duration::from_millis(self.config.tick_interval_ms) * due;
        }
        Ok(handles
            .iter()
            .map(|h| match st.jobs.get(&h.backend_id) {
                Some(job) => job.report(&h.backend_id),
                None => StatusReport::lost(&h.backend_id),
            })
            .collect())
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
