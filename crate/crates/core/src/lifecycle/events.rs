use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, Utc};
use crossbeam_channel::{unbounded, Receiver, Sender};
use serde::{Deserialize, Serialize};

use crate::job::JobRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Submitted,
    Started,
    Heartbeat,
    OutputLine,
    Completed,
    StatusChanged,
    CredentialWarning,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::Submitted,
        EventKind::Started,
        EventKind::Heartbeat,
        EventKind::OutputLine,
        EventKind::Completed,
        EventKind::StatusChanged,
        EventKind::CredentialWarning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Submitted => "submitted",
            EventKind::Started => "started",
            EventKind::Heartbeat => "heartbeat",
            EventKind::OutputLine => "output_line",
            EventKind::Completed => "completed",
            EventKind::StatusChanged => "status_changed",
            EventKind::CredentialWarning => "credential_warning",
        }
    }

    pub fn parse(s: &str) -> Option<EventKind> {
        EventKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

/// A lifecycle or monitoring event. `seq` is assigned by the bus and is
/// strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorEvent {
    pub seq: u64,
    pub job_id: Option<u64>,
    pub subjob_index: Option<usize>,
    pub kind: EventKind,
    pub timestamp: DateTime<Utc>,
    pub payload: BTreeMap<String, String>,
}

impl MonitorEvent {
    pub fn new(job: Option<JobRef>, kind: EventKind, timestamp: DateTime<Utc>) -> Self {
        MonitorEvent {
            seq: 0,
            job_id: job.map(|j| j.id),
            subjob_index: job.and_then(|j| j.subjob),
            kind,
            timestamp,
            payload: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.payload.insert(key.to_string(), value.into());
        self
    }

    pub fn job_ref(&self) -> Option<JobRef> {
        self.job_id.map(|id| JobRef {
            id,
            subjob: self.subjob_index,
        })
    }

    /// `<iso8601> <job_id>[.<subjob>] <kind> <key=value ...>`; `-` stands
    /// for a missing job. Values containing whitespace, quotes or `=` are
    /// written as JSON strings.
    pub fn to_line(&self) -> String {
        let mut s = self.timestamp.to_rfc3339_opts(SecondsFormat::Millis, true);
        match self.job_ref() {
            Some(r) => {
                let _ = write!(s, " {r}");
            }
            None => s.push_str(" -"),
        }
        let _ = write!(s, " {}", self.kind.as_str());
        for (k, v) in &self.payload {
            let plain = !v.is_empty() && !v.chars().any(|c| c.is_whitespace() || c == '"' || c == '=');
            if plain {
                let _ = write!(s, " {k}={v}");
            } else {
                let _ = write!(s, " {k}={}", serde_json::Value::String(v.clone()));
            }
        }
        s
    }
}

/// A consumer of events. Runs on its own thread; a failing or panicking
/// sink affects only itself.
pub trait EventSink: Send {
    fn handle(&mut self, event: &MonitorEvent) -> Result<(), String>;
}

/// Appends one line per event to a file.
pub struct FileSink {
    file: File,
}

impl FileSink {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p)?;
        }
        Ok(FileSink {
            file: OpenOptions::new().create(true).append(true).open(path)?,
        })
    }
}

impl EventSink for FileSink {
    fn handle(&mut self, event: &MonitorEvent) -> Result<(), String> {
        writeln!(self.file, "{}", event.to_line()).map_err(|e| e.to_string())
    }
}

/// Keeps every event in memory.
#[derive(Clone, Default)]
pub struct CollectingSink {
    events: Arc<Mutex<Vec<MonitorEvent>>>,
}

impl CollectingSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<MonitorEvent> {
        self.events.lock().unwrap().clone()
    }
}

impl EventSink for CollectingSink {
    fn handle(&mut self, event: &MonitorEvent) -> Result<(), String> {
        self.events.lock().unwrap().push(event.clone());
        Ok(())
    }
}

pub type SensorId = u64;

enum SinkMsg {
    Event(Arc<MonitorEvent>),
    Flush(Sender<()>),
}

struct SinkEntry {
    id: SensorId,
    filter: Option<Vec<EventKind>>,
    tx: Sender<SinkMsg>,
    thread: Option<JoinHandle<()>>,
}

struct Subscriber {
    tx: Sender<Arc<MonitorEvent>>,
}

struct BusState {
    next_seq: u64,
    next_sensor: SensorId,
    history: VecDeque<Arc<MonitorEvent>>,
    sinks: Vec<SinkEntry>,
    subscribers: Vec<Subscriber>,
}

/// Fans events out to sensors and stream subscribers and keeps a bounded
/// history for cursor-based replay.
pub struct EventBus {
    retention: usize,
    state: Mutex<BusState>,
}

/// Minimum number of events kept for replay.
pub const MIN_RETENTION: usize = 1000;

impl EventBus {
    pub fn new(retention: usize) -> Self {
        EventBus {
            retention: retention.max(MIN_RETENTION),
            state: Mutex::new(BusState {
                next_seq: 1,
                next_sensor: 1,
                history: VecDeque::new(),
                sinks: Vec::new(),
                subscribers: Vec::new(),
            }),
        }
    }

    pub fn register_sensor(&self, sink: Box<dyn EventSink>, filter: Option<Vec<EventKind>>) -> SensorId {
        let mut st = self.state.lock().unwrap();
        let id = st.next_sensor;
        st.next_sensor += 1;
        let (tx, rx) = unbounded::<SinkMsg>();
        let thread = thread::Builder::new()
            .name(format!("sensor-{id}"))
            .spawn(move || run_sink(id, sink, rx))
            .expect("spawn sensor thread");
        st.sinks.push(SinkEntry {
            id,
            filter,
            tx,
            thread: Some(thread),
        });
        id
    }

    /// Detaches a sensor after it has handled everything already emitted.
    pub fn unregister_sensor(&self, id: SensorId) -> bool {
        let entry = {
            let mut st = self.state.lock().unwrap();
            let Some(pos) = st.sinks.iter().position(|s| s.id == id) else {
                return false;
            };
            st.sinks.remove(pos)
        };
        let SinkEntry { tx, thread, .. } = entry;
        drop(tx);
        if let Some(t) = thread {
            let _ = t.join();
        }
        true
    }

    /// Assigns the next sequence number and dispatches. Never blocks on
    /// sinks.
    pub fn emit(&self, mut event: MonitorEvent) -> u64 {
        let mut st = self.state.lock().unwrap();
        event.seq = st.next_seq;
        st.next_seq += 1;
        let ev = Arc::new(event);
        st.history.push_back(ev.clone());
        while st.history.len() > self.retention {
            st.history.pop_front();
        }
        for s in &st.sinks {
            if s.filter.as_ref().is_none_or(|f| f.contains(&ev.kind)) {
                let _ = s.tx.send(SinkMsg::Event(ev.clone()));
            }
        }
        st.subscribers.retain(|sub| sub.tx.send(ev.clone()).is_ok());
        ev.seq
    }

    /// Retained events with `seq > since`, oldest first.
    pub fn since(&self, since: u64) -> Vec<MonitorEvent> {
        let st = self.state.lock().unwrap();
        st.history
            .iter()
            .filter(|e| e.seq > since)
            .map(|e| (**e).clone())
            .collect()
    }

    /// Replays retained events after `since`, then delivers live ones.
    /// No event is lost or duplicated between the two.
    pub fn subscribe(&self, since: Option<u64>) -> (Vec<MonitorEvent>, Receiver<Arc<MonitorEvent>>) {
        let mut st = self.state.lock().unwrap();
        let backlog = match since {
            Some(s) => st.history.iter().filter(|e| e.seq > s).map(|e| (**e).clone()).collect(),
            None => Vec::new(),
        };
        let (tx, rx) = unbounded();
        st.subscribers.push(Subscriber { tx });
        (backlog, rx)
    }

    pub fn last_seq(&self) -> u64 {
        self.state.lock().unwrap().next_seq - 1
    }

    pub fn retention(&self) -> usize {
        self.retention
    }

    /// Waits until every sensor has handled every event emitted so far.
    pub fn flush(&self) {
        let waits: Vec<_> = {
            let st = self.state.lock().unwrap();
            st.sinks
                .iter()
                .filter_map(|s| {
                    let (tx, rx) = crossbeam_channel::bounded(1);
                    s.tx.send(SinkMsg::Flush(tx)).ok().map(|_| rx)
                })
                .collect()
        };
        for rx in waits {
            let _ = rx.recv_timeout(Duration::from_secs(10));
        }
    }
}

impl Drop for EventBus {
    fn drop(&mut self) {
        let sinks = std::mem::take(&mut self.state.lock().unwrap().sinks);
        for SinkEntry { tx, thread, .. } in sinks {
            drop(tx);
            if let Some(t) = thread {
                let _ = t.join();
            }
        }
    }
}

fn run_sink(id: SensorId, mut sink: Box<dyn EventSink>, rx: Receiver<SinkMsg>) {
    let mut failures = 0u64;
    for msg in rx {
        match msg {
            SinkMsg::Event(ev) => match catch_unwind(AssertUnwindSafe(|| sink.handle(&ev))) {
                Ok(Ok(())) => {}
                Ok(Err(e)) => {
                    failures += 1;
                    if failures.is_power_of_two() {
                        log::warn!("sensor {id} failed on event {}: {e} ({failures} failures)", ev.seq);
                    }
                }
                Err(_) => {
                    failures += 1;
                    log::warn!("sensor {id} panicked on event {}", ev.seq);
                }
            },
            SinkMsg::Flush(done) => {
                let _ = done.send(());
            }
        }
    }
}
