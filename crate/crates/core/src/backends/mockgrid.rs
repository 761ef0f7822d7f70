use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Child;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::process::{collect_outputs, kill_group, spawn_wrapper};
use super::{Backend, BackendJobDescription, BackendStats, FetchResult, StatsCell, StatusReport};
use crate::error::{Error, Result};
use crate::job::{BackendHandle, JobEvent};
use crate::plugins::{read_exit_code, Component};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Latency {
    Fixed { ms: u64 },
    Uniform { lo_ms: u64, hi_ms: u64 },
}

impl Latency {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Duration {
        match *self {
            Latency::Fixed { ms } => Duration::from_millis(ms),
            Latency::Uniform { lo_ms, hi_ms } => Duration::from_millis(rng.random_range(lo_ms..=hi_ms.max(lo_ms))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockGridConfig {
    pub submit_latency: Latency,
    /// Probability that a job is destined to abort.
    pub failure_rate: f64,
    pub supports_bulk: bool,
    /// Jobs running at once; the rest wait.
    pub max_concurrent: usize,
    pub seed: u64,
    /// Artificial delay inside every poll, for fault injection.
    pub poll_latency_ms: u64,
    pub requires_credential: bool,
    pub sites: Vec<String>,
    pub spool_root: Option<PathBuf>,
    /// Simulated outage: submits and polls fail with `BackendUnavailable`.
    pub outage: bool,
}

impl Default for MockGridConfig {
    fn default() -> Self {
        MockGridConfig {
            submit_latency: Latency::Fixed { ms: 0 },
            failure_rate: 0.0,
            supports_bulk: true,
            max_concurrent: 64,
            seed: 0,
            poll_latency_ms: 0,
            requires_credential: true,
            sites: vec!["ce01.mock-grid.org".into(), "ce02.mock-grid.org".into()],
            spool_root: None,
            outage: false,
        }
    }
}

impl MockGridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.failure_rate) {
            return Err(Error::ConfigError(format!(
                "failure_rate {} is outside [0, 1]",
                self.failure_rate
            )));
        }
        if self.max_concurrent == 0 {
            return Err(Error::ConfigError("max_concurrent must be positive".into()));
        }
        if self.sites.is_empty() {
            return Err(Error::ConfigError("at least one site is required".into()));
        }
        Ok(())
    }
}

enum GridState {
    Waiting,
    Running(Child),
    Done(Option<i32>),
    Aborted,
    Cancelled,
}

struct GridJob {
    desc: BackendJobDescription,
    workdir: PathBuf,
    doomed: bool,
    state: GridState,
}

struct Grid {
    rng: ChaCha8Rng,
    next_id: u64,
    jobs: BTreeMap<u64, GridJob>,
}

/// A mock grid workload manager: accepts job collections, applies submit
/// latency, decides failures up front from `failure_rate`, and runs the
/// surviving wrappers in its own spool directory with limited concurrency.
pub struct MockGridBackend {
    config: MockGridConfig,
    spool: PathBuf,
    grid: Mutex<Grid>,
    stats: StatsCell,
}

fn parse_id(id: &str) -> Option<u64> {
    id.strip_prefix("grid-")?.parse().ok()
}

impl MockGridBackend {
    fn reachable(&self) -> Result<()> {
        if self.config.outage {
            return Err(Error::BackendUnavailable("MockGrid is down".into()));
        }
        Ok(())
    }

    pub fn new(config: MockGridConfig, scratch: &Path) -> Result<Self> {
        config.validate()?;
        let spool = config.spool_root.clone().unwrap_or_else(|| scratch.join("mockgrid"));
        Ok(MockGridBackend {
            grid: Mutex::new(Grid {
                rng: ChaCha8Rng::seed_from_u64(config.seed),
                next_id: 0,
                jobs: BTreeMap::new(),
            }),
            config,
            spool,
            stats: StatsCell::default(),
        })
    }

    pub fn config(&self) -> &MockGridConfig {
        &self.config
    }

    fn register(&self, grid: &mut Grid, backend: &Component, desc: &BackendJobDescription) -> BackendHandle {
        let n = grid.next_id;
        grid.next_id += 1;
        let doomed = grid.rng.random::<f64>() < self.config.failure_rate;
        let workdir = self.spool.join(n.to_string());
        let site = match backend.str_attr("site").filter(|s| !s.is_empty()) {
            Some(s) => s.to_string(),
            None => self.config.sites[n as usize % self.config.sites.len()].clone(),
        };
        grid.jobs.insert(
            n,
            GridJob {
                desc: desc.clone(),
                workdir: workdir.clone(),
                doomed,
                state: GridState::Waiting,
            },
        );
        let mut handle = BackendHandle::new(format!("grid-{n}"), "Submitted");
        handle.actual_host = Some(site);
        handle.workdir = Some(workdir);
        handle
    }

    fn advance(&self, grid: &mut Grid) {
        let mut running = 0;
        for job in grid.jobs.values_mut() {
            if let GridState::Running(child) = &mut job.state {
                if matches!(child.try_wait(), Ok(None)) {
                    running += 1;
                } else {
                    job.state = GridState::Done(read_exit_code(&job.workdir));
                }
            }
        }
        for job in grid.jobs.values_mut() {
            if !matches!(job.state, GridState::Waiting) {
                continue;
            }
            if job.doomed {
                job.state = GridState::Aborted;
            } else if running < self.config.max_concurrent {
                job.state = match spawn_wrapper(&job.desc.wrapper_path, &job.workdir) {
                    Ok(child) => {
                        running += 1;
                        GridState::Running(child)
                    }
                    Err(_) => GridState::Aborted,
                };
            }
        }
    }

    fn report(id: &str, job: &GridJob) -> StatusReport {
        match &job.state {
            GridState::Waiting => StatusReport::new(id, "Waiting", None),
            GridState::Running(_) => StatusReport::new(id, "Running", Some(JobEvent::BackendRunning)),
            GridState::Done(Some(code)) => {
                StatusReport::new(id, "Done (Success)", Some(JobEvent::BackendDoneOk)).with_exit(Some(*code))
            }
            GridState::Done(None) => StatusReport::new(id, "Done (Failed)", Some(JobEvent::BackendDoneErr)),
            GridState::Aborted => StatusReport::new(id, "Aborted", Some(JobEvent::BackendDoneErr)),
            GridState::Cancelled => StatusReport::new(id, "Cancelled", None),
        }
    }
}

impl Backend for MockGridBackend {
    fn kind(&self) -> &str {
        "MockGrid"
    }

    fn requires_credential(&self) -> bool {
        self.config.requires_credential
    }

    fn supports_bulk(&self) -> bool {
        self.config.supports_bulk
    }

    fn submit(&self, backend: &Component, desc: &BackendJobDescription) -> Result<BackendHandle> {
        self.stats.count_submit();
        self.reachable()?;
        let mut grid = self.grid.lock().unwrap();
        let delay = self.config.submit_latency.sample(&mut grid.rng);
        thread::sleep(delay);
        Ok(self.register(&mut grid, backend, desc))
    }

    fn submit_collection(&self, backend: &Component, descs: &[BackendJobDescription]) -> Result<Vec<BackendHandle>> {
        if !self.config.supports_bulk {
            return Err(Error::SubmitFailed("bulk submission disabled".into()));
        }
        self.stats.count_collection();
        self.reachable()?;
        let mut grid = self.grid.lock().unwrap();
        let delay = self.config.submit_latency.sample(&mut grid.rng);
        thread::sleep(delay);
        Ok(descs.iter().map(|d| self.register(&mut grid, backend, d)).collect())
    }

    fn kill(&self, handle: &BackendHandle) -> Result<()> {
        self.stats.count_kill();
        let mut grid = self.grid.lock().unwrap();
        let job = parse_id(&handle.backend_id)
            .and_then(|n| grid.jobs.get_mut(&n))
            .ok_or_else(|| Error::UnknownHandle(handle.backend_id.clone()))?;
        match &mut job.state {
            GridState::Waiting => job.state = GridState::Cancelled,
            GridState::Running(child) => {
                if matches!(child.try_wait(), Ok(None)) {
                    kill_group(child);
                    job.state = GridState::Cancelled;
                } else {
                    job.state = GridState::Done(read_exit_code(&job.workdir));
                    return Err(Error::AlreadyFinished(handle.backend_id.clone()));
                }
            }
            _ => return Err(Error::AlreadyFinished(handle.backend_id.clone())),
        }
        Ok(())
    }

    fn poll(&self, handles: &[BackendHandle]) -> Result<Vec<StatusReport>> {
        let _guard = self.stats.poll_guard();
        if self.config.poll_latency_ms > 0 {
            thread::sleep(Duration::from_millis(self.config.poll_latency_ms));
        }
        self.reachable()?;
        let mut grid = self.grid.lock().unwrap();
        self.advance(&mut grid);
        Ok(handles
            .iter()
            .map(|h| match parse_id(&h.backend_id).and_then(|n| grid.jobs.get(&n)) {
                Some(job) => Self::report(&h.backend_id, job),
                None => StatusReport::lost(&h.backend_id),
            })
            .collect())
    }

    fn fetch_output(&self, handle: &BackendHandle, patterns: &[String], dest: &Path) -> Result<FetchResult> {
        let workdir = {
            let grid = self.grid.lock().unwrap();
            parse_id(&handle.backend_id)
                .and_then(|n| grid.jobs.get(&n))
                .map(|j| j.workdir.clone())
                .or_else(|| handle.workdir.clone())
                .ok_or_else(|| Error::UnknownHandle(handle.backend_id.clone()))?
        };
        collect_outputs(&workdir, patterns, dest)
    }

    fn stats(&self) -> BackendStats {
        self.stats.snapshot()
    }
}
