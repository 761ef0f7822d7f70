mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use common::*;
use jobfront::backends::wrapper::EXIT_CODE_FILE;
use jobfront::backends::BackendSet;
use jobfront::lifecycle::{CollectingSink, EventKind, MonitorConfig, MonitorEvent, PollOutcome};
use jobfront::plugins::builtin::{builtin_registry, ARG_SPLITTER, BATCH_SIM, MOCK_GRID, REMOTE_SHELL, TEXT_MERGER};
use jobfront::plugins::PluginBehavior;
use jobfront::tasks::{Merger, SubjobOutput};
use jobfront::{
    transition, Category, Component, Error, FakeClock, JobEvent, JobPatch, JobRef, JobStatus, PluginSchema, Session,
    SessionConfig, Value,
};

fn monitor(rate: f64, timeout: f64, pool: usize) -> MonitorConfig {
    MonitorConfig {
        pool_size: pool,
        default_poll_rate_s: rate,
        per_backend_poll_rate_s: BTreeMap::new(),
        poll_timeout_s: timeout,
    }
}

fn events_of(events: &[MonitorEvent], id: u64) -> Vec<&MonitorEvent> {
    events.iter().filter(|e| e.job_id == Some(id) && e.subjob_index.is_none()).collect()
}

// ---- monitor ---------------------------------------------------------------

#[test]
fn slow_backend_does_not_delay_others() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.backends.mock_grid.poll_latency_ms = 5000;
    let s = Session::open(cfg).unwrap();
    let period = 0.5;
    s.start_monitor_with(monitor(period, 1.0, 4)).unwrap();

    let stuck = job(&s, sh("true"), Component::new(MOCK_GRID));
    s.submit(stuck.id).unwrap();
    std::thread::sleep(Duration::from_millis(200));

    let started = Instant::now();
    let mut worst = Duration::ZERO;
    while started.elapsed() < Duration::from_secs(7) {
        let j = job(&s, sh("true"), local());
        s.submit(j.id).unwrap();
        let exit_file = s.workspace().run_dir(JobRef::master(j.id)).join(EXIT_CODE_FILE);
        assert!(wait_for(Duration::from_secs(10), || exit_file.is_file()));
        let finished = Instant::now();
        assert!(wait_for(Duration::from_secs(10), || status_of(&s, j.id).is_terminal()));
        let lag = finished.elapsed();
        worst = worst.max(lag);
        assert_eq!(status_of(&s, j.id), JobStatus::Completed);
    }
    assert!(
        worst <= Duration::from_secs_f64(2.0 * period),
        "local completion noticed {worst:?} after the job ended"
    );

    let trace = s.stop_monitor();
    let grid_polls: Vec<_> = trace.iter().filter(|t| t.backend == MOCK_GRID).collect();
    assert!(grid_polls.iter().any(|t| t.outcome == PollOutcome::Abandoned));
    assert!(grid_polls.iter().all(|t| t.outcome != PollOutcome::Applied));
    let grid = s.registry().backend(MOCK_GRID).unwrap();
    assert!(grid.stats().poll_calls >= 2);
    assert!(grid.stats().max_concurrent_polls <= 1);
    assert!(status_of(&s, stuck.id).is_active());
}

#[test]
fn single_worker_serves_backends_in_turn() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    for b in [
        local(),
        Component::new(BATCH_SIM).with("queue", "long"),
        Component::new(REMOTE_SHELL),
    ] {
        let j = job(&s, sh("sleep 5"), b);
        s.submit(j.id).unwrap();
    }
    s.start_monitor_with(monitor(0.1, 0.08, 1)).unwrap();
    std::thread::sleep(Duration::from_millis(1500));
    let trace = s.stop_monitor();
    for w in trace.windows(2) {
        let prev_end = w[0].finished.expect("finished");
        assert!(w[1].dispatched >= prev_end, "two polls overlapped with one worker");
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &trace {
        *counts.entry(t.backend.as_str()).or_default() += 1;
    }
    assert_eq!(counts.len(), 3, "{counts:?}");
    let (lo, hi) = (counts.values().min().unwrap(), counts.values().max().unwrap());
    assert!(hi - lo <= 1, "{counts:?}");
    for id in 0..3 {
        let _ = s.kill(JobRef::master(id));
    }
}

#[test]
fn monitor_config_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    assert!(matches!(s.start_monitor_with(monitor(0.0, 0.1, 1)), Err(Error::ConfigError(_))));
    assert!(matches!(s.start_monitor_with(monitor(1.0, 0.1, 0)), Err(Error::ConfigError(_))));
    s.start_monitor_with(monitor(1.0, 0.5, 1)).unwrap();
    assert!(matches!(s.start_monitor(), Err(Error::AlreadyRunning)));
    s.stop_monitor();
    assert!(!s.monitor_running());
}

// ---- credential ------------------------------------------------------------

fn fake_session(dir: &Path) -> (Session, Arc<FakeClock>, DateTime<Utc>) {
    let mut cfg = config(dir);
    cfg.credential.ttl_s = 10.0;
    cfg.credential.warn_threshold_s = 5.0;
    let t0: DateTime<Utc> = "2026-01-01T00:00:00Z".parse().unwrap();
    let clock = Arc::new(FakeClock::new(t0));
    let s = Session::open_with(cfg, clock.clone()).unwrap();
    (s, clock, t0)
}

#[test]
fn credential_warns_exactly_once_before_expiry() {
    let dir = tempfile::tempdir().unwrap();
    let (s, clock, t0) = fake_session(dir.path());
    let (_, rx) = s.bus().subscribe(None);
    let mut states = Vec::new();
    for _ in 0..24 {
        clock.advance_secs_f64(0.5);
        states.push(s.credential_check().state);
    }
    let warnings: Vec<_> = rx.try_iter().filter(|e| e.kind == EventKind::CredentialWarning).collect();
    assert_eq!(warnings.len(), 1);
    let at = (warnings[0].timestamp - t0).num_milliseconds() as f64 / 1000.0;
    assert!(at > 5.0 && at <= 10.0, "warning at {at}s");
    use jobfront::lifecycle::CredentialState::*;
    // 0.5 s steps: valid through 5 s, warning until 10 s, then expired
    assert_eq!(&states[..10], [Valid; 10]);
    assert_eq!(&states[10..19], [Warning; 9]);
    assert_eq!(&states[19..], [Expired; 5]);
}

#[test]
fn expired_credential_gates_only_backends_that_need_it() {
    let dir = tempfile::tempdir().unwrap();
    let (s, clock, _) = fake_session(dir.path());
    clock.advance_secs_f64(11.0);
    let grid = job(&s, sh("echo grid"), Component::new(MOCK_GRID));
    let loc = job(&s, sh("echo local"), local());
    let err = s.submit(grid.id).unwrap_err();
    assert!(matches!(err, Error::Gate(_)));
    assert_eq!(err.code(), "GateError");
    assert_eq!(status_of(&s, grid.id), JobStatus::New);
    s.submit(loc.id).unwrap();
    assert_eq!(settle(&s, loc.id, Duration::from_secs(20)).status, JobStatus::Completed);

    let st = s.credential_renew(None);
    assert_eq!(st.state, jobfront::lifecycle::CredentialState::Valid);
    s.submit(grid.id).unwrap();
    assert_eq!(settle(&s, grid.id, Duration::from_secs(20)).status, JobStatus::Completed);

    s.credential_destroy();
    let again = job(&s, sh("true"), Component::new(MOCK_GRID));
    assert!(matches!(s.submit(again.id), Err(Error::Gate(_))));
}

#[test]
fn output_retrieval_waits_for_a_credential() {
    let dir = tempfile::tempdir().unwrap();
    let (s, clock, _) = fake_session(dir.path());
    let j = job(&s, sh("echo held"), Component::new(MOCK_GRID));
    s.submit(j.id).unwrap();
    clock.advance_secs_f64(11.0);
    // the grid job finishes, but its output cannot be fetched
    let grid = s.registry().backend(MOCK_GRID).unwrap();
    assert!(wait_for(Duration::from_secs(10), || {
        s.refresh().unwrap();
        let h = s.job(j.id).unwrap().backend_handle.unwrap();
        grid.poll(&[h]).unwrap()[0].mapped_event == Some(JobEvent::BackendDoneOk)
    }));
    for _ in 0..5 {
        s.refresh().unwrap();
    }
    assert!(status_of(&s, j.id).is_active());
    s.credential_renew(Some(100.0));
    assert_eq!(settle(&s, j.id, Duration::from_secs(10)).status, JobStatus::Completed);
    assert_eq!(s.peek(JobRef::master(j.id), "stdout", None).unwrap(), "held\n");
}

// ---- events ----------------------------------------------------------------

#[test]
fn job_events_arrive_in_lifecycle_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.sensor.heartbeat_ms = 200;
    let s = Session::open(cfg).unwrap();
    let sink = CollectingSink::new();
    s.register_sensor(Box::new(sink.clone()), None);
    s.start_monitor_with(monitor(0.1, 0.08, 2)).unwrap();
    let j = job(&s, sh("echo a; sleep 1.2; echo b"), local());
    s.submit(j.id).unwrap();
    assert!(wait_for(Duration::from_secs(20), || status_of(&s, j.id).is_terminal()));
    s.close();

    let all = sink.events();
    assert!(all.windows(2).all(|w| w[0].seq < w[1].seq));
    let mine = events_of(&all, j.id);
    let kinds: Vec<EventKind> = mine
        .iter()
        .map(|e| e.kind)
        .filter(|k| matches!(k, EventKind::Submitted | EventKind::Started | EventKind::Heartbeat | EventKind::Completed))
        .collect();
    assert_eq!(kinds.first(), Some(&EventKind::Submitted));
    assert_eq!(kinds[1], EventKind::Started);
    assert_eq!(kinds.last(), Some(&EventKind::Completed));
    let middle = &kinds[2..kinds.len() - 1];
    assert!(!middle.is_empty(), "no heartbeat in {kinds:?}");
    assert!(middle.iter().all(|k| *k == EventKind::Heartbeat), "{kinds:?}");
    let lines: Vec<String> = mine
        .iter()
        .filter(|e| e.kind == EventKind::OutputLine)
        .map(|e| e.payload["line"].clone())
        .collect();
    assert_eq!(lines, ["a", "b"]);
}

#[test]
fn sensor_filter_delivers_only_selected_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    let done = CollectingSink::new();
    let everything = CollectingSink::new();
    s.register_sensor(Box::new(done.clone()), Some(vec![EventKind::Completed]));
    s.register_sensor(Box::new(everything.clone()), None);
    let ids: Vec<u64> = (0..3).map(|i| job(&s, sh(&format!("echo {i}")), local()).id).collect();
    for id in &ids {
        s.submit(*id).unwrap();
    }
    for id in &ids {
        settle(&s, *id, Duration::from_secs(20));
    }
    s.close();
    let got = done.events();
    assert_eq!(got.len(), 3);
    assert!(got.iter().all(|e| e.kind == EventKind::Completed));
    let mut got_ids: Vec<u64> = got.iter().map(|e| e.job_id.unwrap()).collect();
    got_ids.sort();
    assert_eq!(got_ids, ids);
    assert!(everything.events().len() > 3);
}

struct FailingSink;

impl jobfront::lifecycle::EventSink for FailingSink {
    fn handle(&mut self, _: &MonitorEvent) -> Result<(), String> {
        panic!("sensor bug")
    }
}

#[test]
fn broken_sensor_affects_only_itself() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    let good = CollectingSink::new();
    s.register_sensor(Box::new(FailingSink), None);
    s.register_sensor(Box::new(good.clone()), Some(vec![EventKind::Completed]));
    let j = job(&s, sh("true"), local());
    s.submit(j.id).unwrap();
    assert_eq!(settle(&s, j.id, Duration::from_secs(20)).status, JobStatus::Completed);
    s.close();
    assert_eq!(good.events().len(), 1);
}

#[test]
fn event_log_file_gets_one_line_per_event() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    let log = dir.path().join("events.log");
    cfg.event_log = Some(log.clone());
    let s = Session::open(cfg).unwrap();
    let j = job(&s, sh("echo x"), local());
    s.submit(j.id).unwrap();
    settle(&s, j.id, Duration::from_secs(20));
    s.close();
    let text = std::fs::read_to_string(&log).unwrap();
    let n = s.bus().since(0).len();
    assert_eq!(text.lines().count(), n);
    assert!(text.lines().any(|l| l.contains(" 0 completed")));
}

/// Folds status events into a status per job, checking every step against
/// the state machine.
fn replay(events: &[MonitorEvent]) -> BTreeMap<JobRef, JobStatus> {
    let mut seen: BTreeMap<JobRef, JobStatus> = BTreeMap::new();
    for e in events.iter().filter(|e| e.kind == EventKind::StatusChanged) {
        let r = e.job_ref().unwrap();
        let from: JobStatus = e.payload["from"].parse().unwrap();
        let to: JobStatus = e.payload["to"].parse().unwrap();
        let before = *seen.get(&r).unwrap_or(&JobStatus::New);
        assert_eq!(from, before, "{r}: event says from {from}, stream says {before}");
        let legal = JobEvent::ALL.iter().any(|ev| transition(from, *ev).ok() == Some(to));
        assert!(legal, "{r}: {from} -> {to} is not a transition");
        seen.insert(r, to);
    }
    seen
}

#[test]
fn status_events_replay_to_the_stored_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    let (backlog_start, _) = (s.bus().last_seq(), ());
    let ok = job(&s, sh("true"), local());
    let bad = job(&s, sh("exit 2"), local());
    let killed = job(&s, sh("sleep 30"), local());
    let queued = job(&s, sh("true"), Component::new(BATCH_SIM));
    let sets = Value::StrTable(["0", "1", "2"].iter().map(|c| strings(&["-c", "exit $1", "sh", c])).collect());
    let split = s
        .new_job(
            exe("/bin/sh", &[]),
            local(),
            JobPatch {
                splitter: Some(Some(Component::new(ARG_SPLITTER).with("args", sets))),
                ..Default::default()
            },
        )
        .unwrap();
    for j in [&ok, &bad, &killed, &queued, &split] {
        s.submit(j.id).unwrap();
    }
    s.kill(JobRef::master(killed.id)).unwrap();
    for j in [&ok, &bad, &queued, &split] {
        settle(&s, j.id, Duration::from_secs(20));
    }
    s.resubmit(JobRef::master(bad.id)).unwrap();
    settle(&s, bad.id, Duration::from_secs(20));
    s.resubmit(JobRef::master(split.id)).unwrap();
    settle(&s, split.id, Duration::from_secs(20));
    s.close();

    let events = s.bus().since(backlog_start);
    let replayed = replay(&events);
    for job in s.jobs() {
        assert_eq!(replayed[&job.job_ref()], job.status, "job {}", job.id);
        for sj in &job.subjobs {
            assert_eq!(replayed[&sj.job_ref()], sj.status, "subjob {}", sj.job_ref());
        }
    }
    assert_eq!(status_of(&s, killed.id), JobStatus::Killed);
    assert_eq!(status_of(&s, split.id), JobStatus::Failed);
}

// ---- auto-merge ------------------------------------------------------------

struct CountingMerger(Arc<AtomicUsize>);

impl Merger for CountingMerger {
    fn merge(&self, _: &Component, outputs: &[SubjobOutput], dest: &Path) -> jobfront::Result<Vec<PathBuf>> {
        self.0.fetch_add(1, Ordering::SeqCst);
        std::fs::create_dir_all(dest)?;
        let p = dest.join("count.txt");
        std::fs::write(&p, outputs.len().to_string())?;
        Ok(vec![p])
    }
}

#[test]
fn split_job_is_merged_exactly_once() {
    let dir = tempfile::tempdir().unwrap();
    let cfg: SessionConfig = config(dir.path());
    let backends = BackendSet::new(&cfg.backends, &cfg.scratch_root()).unwrap();
    let mut reg = builtin_registry(&backends).unwrap();
    let calls = Arc::new(AtomicUsize::new(0));
    reg.register_plugin(
        PluginSchema::new("CountingMerger", Category::Merger, 1),
        PluginBehavior::Merger(Arc::new(CountingMerger(calls.clone()))),
    )
    .unwrap();
    let s = Session::open_with_registry(cfg, reg, Arc::new(jobfront::SystemClock)).unwrap();
    s.start_monitor_with(monitor(0.05, 0.04, 2)).unwrap();
    let sets = Value::StrTable(vec![strings(&["a"]), strings(&["b"]), strings(&["c"])]);
    let j = s
        .new_job(
            exe("/bin/echo", &[]),
            local(),
            JobPatch {
                splitter: Some(Some(Component::new(ARG_SPLITTER).with("args", sets))),
                merger: Some(Some(Component::new("CountingMerger"))),
                ..Default::default()
            },
        )
        .unwrap();
    s.submit(j.id).unwrap();
    assert!(wait_for(Duration::from_secs(20), || status_of(&s, j.id).is_terminal()));
    std::thread::sleep(Duration::from_millis(500));
    s.stop_monitor();
    for _ in 0..3 {
        s.refresh().unwrap();
    }
    assert_eq!(calls.load(Ordering::SeqCst), 1);
    assert_eq!(s.peek(JobRef::master(j.id), "count.txt", None).unwrap(), "3");

    // an explicit merge runs again on request
    s.merge(j.id, None).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 2);
    let text = Component::new(TEXT_MERGER).with("files", strings(&["stdout"]));
    s.merge(j.id, Some(text)).unwrap();
    assert_eq!(
        s.peek(JobRef::master(j.id), "stdout.merged", None).unwrap(),
        "==> subjob 0 <==\na\n==> subjob 1 <==\nb\n==> subjob 2 <==\nc\n"
    );
}
