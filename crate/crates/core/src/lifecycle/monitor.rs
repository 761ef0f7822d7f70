use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};

use crate::backends::{Backend, StatusReport};
use crate::error::{Error, Result};
use crate::job::{BackendHandle, JobRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorConfig {
    pub pool_size: usize,
    pub default_poll_rate_s: f64,
    /// Poll period per backend type, overriding the default.
    pub per_backend_poll_rate_s: BTreeMap<String, f64>,
    /// A poll running longer than this is abandoned.
    pub poll_timeout_s: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            pool_size: 4,
            default_poll_rate_s: 1.0,
            per_backend_poll_rate_s: BTreeMap::new(),
            poll_timeout_s: 0.75,
        }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 {
            return Err(Error::ConfigError("monitor.pool_size must be at least 1".into()));
        }
        let rates = std::iter::once(("default".to_string(), self.default_poll_rate_s))
            .chain(self.per_backend_poll_rate_s.iter().map(|(k, v)| (k.clone(), *v)));
        for (name, r) in rates {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::ConfigError(format!("poll rate for {name} must be positive, got {r}")));
            }
        }
        if !(self.poll_timeout_s > 0.0 && self.poll_timeout_s.is_finite()) {
            return Err(Error::ConfigError("monitor.poll_timeout_s must be positive".into()));
        }
        Ok(())
    }

    pub fn poll_rate(&self, backend: &str) -> Duration {
        let s = self
            .per_backend_poll_rate_s
            .get(backend)
            .copied()
            .unwrap_or(self.default_poll_rate_s);
        Duration::from_secs_f64(s)
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.poll_timeout_s)
    }

    /// Whether the timeout exceeds the shortest poll period, which lets a
    /// slow backend fall behind its own schedule.
    pub fn timeout_exceeds_rate(&self) -> bool {
        let min = self
            .per_backend_poll_rate_s
            .values()
            .copied()
            .fold(self.default_poll_rate_s, f64::min);
        self.poll_timeout_s >= min
    }
}

/// What the monitor drives. Implemented by the session.
pub trait MonitorHost: Send + Sync {
    /// Active jobs per backend type.
    fn active_handles(&self) -> BTreeMap<String, Vec<(JobRef, BackendHandle)>>;

    fn backend(&self, name: &str) -> Option<Arc<dyn Backend>>;

    /// Applies one completed poll. `reports` pairs up with `jobs`.
    fn apply_poll(&self, backend: &str, jobs: &[(JobRef, BackendHandle)], reports: Vec<StatusReport>);

    /// Called once per coordinator cycle for periodic housekeeping.
    fn tick(&self) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PollOutcome {
    Pending,
    Applied,
    Failed,
    /// Exceeded the timeout; the result, if any, was discarded.
    Abandoned,
}

/// One dispatched poll, in dispatch order.
#[derive(Debug, Clone, PartialEq)]
pub struct PollTrace {
    pub backend: String,
    pub jobs: usize,
    pub dispatched: Instant,
    pub finished: Option<Instant>,
    pub outcome: PollOutcome,
}

const TRACE_LIMIT: usize = 10_000;

struct Task {
    backend_name: String,
    backend: Arc<dyn Backend>,
    jobs: Vec<(JobRef, BackendHandle)>,
    generation: u64,
    retire: Arc<AtomicBool>,
}

struct Done {
    backend_name: String,
    generation: u64,
    jobs: Vec<(JobRef, BackendHandle)>,
    result: Result<Vec<StatusReport>>,
}

struct InFlight {
    generation: u64,
    started: Instant,
    trace_index: usize,
    abandoned: bool,
    retire: Arc<AtomicBool>,
}

#[derive(Default)]
struct BackendSlot {
    next_due: Option<Instant>,
    in_flight: Option<InFlight>,
}

/// Handle on a running monitor.
pub struct MonitorControl {
    stop: Arc<AtomicBool>,
    coordinator: Option<JoinHandle<()>>,
    trace: Arc<Mutex<Vec<PollTrace>>>,
    config: MonitorConfig,
}

impl MonitorControl {
    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn trace(&self) -> Vec<PollTrace> {
        self.trace.lock().unwrap().clone()
    }

    /// Stops scheduling, waits up to one poll timeout for polls in flight,
    /// and returns.
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.coordinator.take() {
            // The coordinator may hold the last reference to the host, in
            // which case it is the thread dropping us.
            if t.thread().id() != thread::current().id() {
                let _ = t.join();
            }
        }
    }
}

impl Drop for MonitorControl {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn spawn_worker(tasks: Receiver<Task>, done: Sender<Done>) {
    thread::Builder::new()
        .name("monitor-worker".into())
        .spawn(move || {
            for task in tasks.iter() {
                let handles: Vec<BackendHandle> = task.jobs.iter().map(|(_, h)| h.clone()).collect();
                let result = task.backend.poll(&handles);
                let _ = done.send(Done {
                    backend_name: task.backend_name,
                    generation: task.generation,
                    jobs: task.jobs,
                    result,
                });
                // Replaced while stuck in a slow poll: leave the pool.
                if task.retire.load(Ordering::SeqCst) {
                    return;
                }
            }
        })
        .expect("spawn monitor worker");
}

/// Starts polling backends with active jobs on a pool of worker threads.
///
/// Each backend type is polled at its own rate, with at most one poll in
/// flight per backend. A poll exceeding the timeout is abandoned: its
/// worker is replaced so the pool keeps its capacity, and whatever it
/// eventually returns is discarded. The backend is polled again only once
/// the abandoned call has returned, so a backend never sees two concurrent
/// polls.
pub fn start_monitor(host: Weak<dyn MonitorHost>, config: MonitorConfig) -> Result<MonitorControl> {
    config.validate()?;
    if config.timeout_exceeds_rate() {
        log::warn!(
            "poll timeout {}s is not below the shortest poll period; slow backends will fall behind",
            config.poll_timeout_s
        );
    }
    let stop = Arc::new(AtomicBool::new(false));
    let trace = Arc::new(Mutex::new(Vec::new()));
    let coordinator = {
        let stop = stop.clone();
        let trace = trace.clone();
        let config = config.clone();
        thread::Builder::new()
            .name("monitor".into())
            .spawn(move || Coordinator::new(host, config, stop, trace).run())
            .map_err(Error::Io)?
    };
    Ok(MonitorControl {
        stop,
        coordinator: Some(coordinator),
        trace,
        config,
    })
}

struct Coordinator {
    host: Weak<dyn MonitorHost>,
    config: MonitorConfig,
    stop: Arc<AtomicBool>,
    trace: Arc<Mutex<Vec<PollTrace>>>,
    task_tx: Sender<Task>,
    task_rx: Receiver<Task>,
    done_tx: Sender<Done>,
    done_rx: Receiver<Done>,
    slots: BTreeMap<String, BackendSlot>,
    generation: u64,
    busy: usize,
    /// Name of the backend dispatched last, for round-robin order.
    last_dispatched: Option<String>,
}

impl Coordinator {
    fn new(
        host: Weak<dyn MonitorHost>,
        config: MonitorConfig,
        stop: Arc<AtomicBool>,
        trace: Arc<Mutex<Vec<PollTrace>>>,
    ) -> Self {
        let (task_tx, task_rx) = unbounded();
        let (done_tx, done_rx) = unbounded();
        for _ in 0..config.pool_size {
            spawn_worker(task_rx.clone(), done_tx.clone());
        }
        Coordinator {
            host,
            config,
            stop,
            trace,
            task_tx,
            task_rx,
            done_tx,
            done_rx,
            slots: BTreeMap::new(),
            generation: 0,
            busy: 0,
            last_dispatched: None,
        }
    }

    fn record_outcome(&self, index: usize, outcome: PollOutcome, finished: Option<Instant>) {
        let mut t = self.trace.lock().unwrap();
        if let Some(entry) = t.get_mut(index) {
            entry.outcome = outcome;
            if finished.is_some() {
                entry.finished = finished;
            }
        }
    }

    fn run(mut self) {
        while !self.stop.load(Ordering::SeqCst) {
            let Some(host) = self.host.upgrade() else {
                break;
            };
            host.tick();
            self.expire(Instant::now());
            self.dispatch(&*host);
            drop(host);
            let wait = self.next_wakeup();
            match self.done_rx.recv_timeout(wait) {
                Ok(done) => self.complete(done),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            while let Ok(done) = self.done_rx.try_recv() {
                self.complete(done);
            }
        }
        self.drain();
    }

    /// Waits up to one timeout for live polls, applying what arrives.
    fn drain(&mut self) {
        let deadline = Instant::now() + self.config.timeout();
        while self.busy > 0 {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                break;
            }
            match self.done_rx.recv_timeout(left) {
                Ok(done) => self.complete(done),
                Err(_) => break,
            }
        }
    }

    fn next_wakeup(&self) -> Duration {
        let now = Instant::now();
        let mut wake = Duration::from_millis(20);
        for slot in self.slots.values() {
            if let Some(f) = &slot.in_flight {
                if !f.abandoned {
                    let deadline = f.started + self.config.timeout();
                    wake = wake.min(deadline.saturating_duration_since(now));
                }
            } else if let Some(due) = slot.next_due {
                wake = wake.min(due.saturating_duration_since(now));
            }
        }
        wake.max(Duration::from_millis(1))
    }

    fn expire(&mut self, now: Instant) {
        let timeout = self.config.timeout();
        let mut newly = Vec::new();
        for (name, slot) in self.slots.iter_mut() {
            if let Some(f) = slot.in_flight.as_mut() {
                if !f.abandoned && now.duration_since(f.started) > timeout {
                    f.abandoned = true;
                    f.retire.store(true, Ordering::SeqCst);
                    newly.push((name.clone(), f.trace_index));
                }
            }
        }
        for (name, idx) in newly {
            log::warn!("poll of backend {name} exceeded {:.3}s; abandoned", self.config.poll_timeout_s);
            self.record_outcome(idx, PollOutcome::Abandoned, None);
            self.busy -= 1;
            spawn_worker(self.task_rx.clone(), self.done_tx.clone());
        }
    }

    fn complete(&mut self, done: Done) {
        let now = Instant::now();
        let Some(slot) = self.slots.get_mut(&done.backend_name) else {
            return;
        };
        let Some(f) = slot.in_flight.take_if(|f| f.generation == done.generation) else {
            return;
        };
        let rate = self.config.poll_rate(&done.backend_name);
        if f.abandoned {
            log::debug!("discarding late poll result from {}", done.backend_name);
            slot.next_due = Some(now);
            self.record_outcome(f.trace_index, PollOutcome::Abandoned, Some(now));
            return;
        }
        slot.next_due = Some(f.started + rate);
        self.busy -= 1;
        match done.result {
            Ok(reports) => {
                self.record_outcome(f.trace_index, PollOutcome::Applied, Some(now));
                if let Some(host) = self.host.upgrade() {
                    host.apply_poll(&done.backend_name, &done.jobs, reports);
                }
            }
            Err(e) => {
                log::warn!("poll of backend {} failed: {e}; treating as no change", done.backend_name);
                self.record_outcome(f.trace_index, PollOutcome::Failed, Some(now));
            }
        }
    }

    fn dispatch(&mut self, host: &dyn MonitorHost) {
        let active = host.active_handles();
        let now = Instant::now();
        // Backends in round-robin order, starting after the last dispatched.
        let mut names: Vec<&String> = active.keys().filter(|k| !active[*k].is_empty()).collect();
        if let Some(last) = &self.last_dispatched {
            let split = names.iter().position(|n| *n > last).unwrap_or(names.len());
            names.rotate_left(split);
        }
        for name in names {
            if self.busy >= self.config.pool_size {
                break;
            }
            let slot = self.slots.entry(name.clone()).or_default();
            if slot.in_flight.is_some() || slot.next_due.is_some_and(|d| d > now) {
                continue;
            }
            let Some(backend) = host.backend(name) else {
                continue;
            };
            self.generation += 1;
            let retire = Arc::new(AtomicBool::new(false));
            let jobs = active[name].clone();
            let trace_index = {
                let mut t = self.trace.lock().unwrap();
                if t.len() >= TRACE_LIMIT {
                    t.clear();
                }
                t.push(PollTrace {
                    backend: name.clone(),
                    jobs: jobs.len(),
                    dispatched: now,
                    finished: None,
                    outcome: PollOutcome::Pending,
                });
                t.len() - 1
            };
            slot.in_flight = Some(InFlight {
                generation: self.generation,
                started: now,
                trace_index,
                abandoned: false,
                retire: retire.clone(),
            });
            self.busy += 1;
            self.last_dispatched = Some(name.clone());
            let _ = self.task_tx.send(Task {
                backend_name: name.clone(),
                backend,
                jobs,
                generation: self.generation,
                retire,
            });
        }
    }
}
