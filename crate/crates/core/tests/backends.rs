mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Duration;

use common::*;
use jobfront::backends::wrapper::{generate_wrapper, SensorConfig, EVENTS_FILE, EXIT_CODE_FILE};
use jobfront::backends::{
    bulk_submit, Backend, BackendJobDescription, BatchSimBackend, BatchSimConfig, LocalBackend, MockGridBackend,
    MockGridConfig, QueueConfig,
};
use jobfront::lifecycle::EventKind;
use jobfront::plugins::builtin::{ARG_SPLITTER, BATCH_SIM, MOCK_GRID, REMOTE_SHELL};
use jobfront::plugins::ConfiguredApplication;
use jobfront::{BackendHandle, Component, Error, JobEvent, JobPatch, JobRef, JobStatus, Session, Value};
use proptest::prelude::*;

fn configured(cmd: &[&str]) -> ConfiguredApplication {
    ConfiguredApplication {
        command_line: strings(cmd),
        environment: BTreeMap::new(),
        staged_files: vec![],
        expected_outputs: vec![],
    }
}

/// A wrapper in `<root>/<name>/in` that will run in `<root>/<name>/run`.
fn desc(root: &Path, name: &str, cmd: &[&str]) -> BackendJobDescription {
    let input = root.join(name).join("in");
    fs::create_dir_all(&input).unwrap();
    let sensor = SensorConfig {
        heartbeat_ms: 0,
        forward_output: false,
    };
    let wrapper = generate_wrapper(&configured(cmd), &[], name, &sensor, &input).unwrap();
    BackendJobDescription {
        wrapper_path: wrapper,
        workdir: root.join(name).join("run"),
        input_files: vec![],
        output_patterns: vec![],
        resource_hints: BTreeMap::new(),
    }
}

fn run_wrapper(d: &BackendJobDescription) {
    let status = Command::new("/bin/sh").arg(&d.wrapper_path).arg(&d.workdir).status().unwrap();
    assert!(status.success(), "the wrapper itself always exits 0");
}

fn spool_kinds(workdir: &Path) -> Vec<String> {
    fs::read_to_string(workdir.join(EVENTS_FILE))
        .unwrap()
        .lines()
        .map(|l| l.split('\t').nth(1).unwrap().to_string())
        .collect()
}

#[test]
fn wrapper_records_output_exit_code_and_events() {
    let dir = tempfile::tempdir().unwrap();
    let ok = desc(dir.path(), "ok", &["/bin/echo", "hi"]);
    run_wrapper(&ok);
    assert_eq!(fs::read_to_string(ok.workdir.join("stdout")).unwrap(), "hi\n");
    assert_eq!(fs::read_to_string(ok.workdir.join("stderr")).unwrap(), "");
    assert_eq!(fs::read_to_string(ok.workdir.join(EXIT_CODE_FILE)).unwrap(), "0\n");
    assert_eq!(spool_kinds(&ok.workdir), ["started", "completed"]);
    let spool = fs::read_to_string(ok.workdir.join(EVENTS_FILE)).unwrap();
    assert!(spool.lines().last().unwrap().ends_with("\texit_code=0"));

    let bad = desc(dir.path(), "bad", &["/bin/false"]);
    run_wrapper(&bad);
    let code: i32 = fs::read_to_string(bad.workdir.join(EXIT_CODE_FILE)).unwrap().trim().parse().unwrap();
    assert_ne!(code, 0);
    assert_eq!(spool_kinds(&bad.workdir), ["started", "completed"]);

    let missing = desc(dir.path(), "missing", &["/no/such/program"]);
    run_wrapper(&missing);
    assert_eq!(fs::read_to_string(missing.workdir.join(EXIT_CODE_FILE)).unwrap(), "127\n");
}

#[test]
fn wrapper_exports_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut app = configured(&["/bin/sh", "-c", "printf '%s|%s' \"$GREETING\" \"$OTHER\""]);
    app.environment.insert("GREETING".into(), "hello world".into());
    app.environment.insert("OTHER".into(), "it's $HOME".into());
    let input = dir.path().join("in");
    fs::create_dir_all(&input).unwrap();
    let w = generate_wrapper(&app, &[], "env", &SensorConfig::default(), &input).unwrap();
    let run = dir.path().join("run");
    Command::new("/bin/sh").arg(&w).arg(&run).status().unwrap();
    assert_eq!(fs::read_to_string(run.join("stdout")).unwrap(), "hello world|it's $HOME");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    /// Arguments reach the program exactly, whatever characters they hold.
    #[test]
    fn wrapper_passes_arguments_verbatim(args in proptest::collection::vec("[ -~]{0,10}", 0..6)) {
        let dir = tempfile::tempdir().unwrap();
        let mut cmd = vec!["/bin/sh", "-c", "for a; do printf '[%s]\\n' \"$a\"; done", "sh"];
        cmd.extend(args.iter().map(String::as_str));
        let d = desc(dir.path(), "p", &cmd);
        run_wrapper(&d);
        let expected: String = args.iter().map(|a| format!("[{a}]\n")).collect();
        prop_assert_eq!(fs::read_to_string(d.workdir.join("stdout")).unwrap(), expected);
    }
}

// ---- BatchSim --------------------------------------------------------------

fn sim(queues: &[(&str, u32, u64)]) -> BatchSimBackend {
    let mut cfg = BatchSimConfig {
        queues: queues
            .iter()
            .map(|(n, slots, wall)| {
                (
                    n.to_string(),
                    QueueConfig {
                        slots: *slots,
                        max_walltime_s: *wall,
                    },
                )
            })
            .collect(),
        default_queue: queues[0].0.to_string(),
        ..Default::default()
    };
    cfg.auto_tick = false;
    cfg.tick_interval_ms = 500;
    BatchSimBackend::new(cfg).unwrap()
}

fn queue(q: &str) -> Component {
    Component::new(BATCH_SIM).with("queue", q)
}

#[test]
fn batch_queue_is_fifo_with_slot_limit() {
    let dir = tempfile::tempdir().unwrap();
    let b = sim(&[("q", 2, 0)]);
    let handles: Vec<BackendHandle> = (0..3)
        .map(|i| b.submit(&queue("q"), &desc(dir.path(), &format!("j{i}"), &["/bin/sh", "-c", "sleep 0.3"])).unwrap())
        .collect();
    assert_eq!(handles.iter().map(|h| h.backend_id.as_str()).collect::<Vec<_>>(), ["bsim-0", "bsim-1", "bsim-2"]);
    let c = b.counts();
    assert_eq!((c.queued["q"], c.running["q"], c.submitted), (3, 0, 3));

    let started: Vec<String> = b.sim_tick().into_iter().map(|r| r.backend_id).collect();
    assert_eq!(started, ["bsim-0", "bsim-1"]);
    let polled: Vec<String> = b.poll(&handles).unwrap().into_iter().map(|r| r.raw_status).collect();
    assert_eq!(polled, ["running", "running", "queued"]);

    assert!(wait_for(Duration::from_secs(10), || {
        b.sim_tick();
        b.counts().finished == 3
    }));
    let reports = b.poll(&handles).unwrap();
    for r in &reports {
        assert_eq!(r.mapped_event, Some(JobEvent::BackendDoneOk));
        assert_eq!(r.exit_code, Some(0));
    }
}

#[test]
fn batch_walltime_is_enforced_in_simulated_time() {
    let dir = tempfile::tempdir().unwrap();
    // one second of walltime is two ticks of 500 ms
    let b = sim(&[("w", 1, 1)]);
    let h = b.submit(&queue("w"), &desc(dir.path(), "s", &["/bin/sleep", "30"])).unwrap();
    b.sim_tick();
    b.sim_tick();
    b.sim_tick();
    assert_eq!(b.poll(std::slice::from_ref(&h)).unwrap()[0].raw_status, "running");
    let r = b.sim_tick();
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].raw_status, "walltime exceeded");
    assert_eq!(r[0].mapped_event, Some(JobEvent::BackendDoneErr));
}

#[test]
fn batch_unknown_queue_is_refused_and_default_applies() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    let bad = job(&s, sh("true"), queue("nope"));
    assert!(matches!(s.submit(bad.id), Err(Error::QueueUnknown(q)) if q == "nope"));
    assert_eq!(status_of(&s, bad.id), JobStatus::New);

    let good = job(&s, sh("true"), Component::new(BATCH_SIM));
    let j = s.submit(good.id).unwrap();
    assert_eq!(j.backend_handle.unwrap().actual_queue.as_deref(), Some("short"));
    assert_eq!(j.backend.attrs["actualqueue"], Value::Str("short".into()));
    assert_eq!(settle(&s, good.id, Duration::from_secs(20)).status, JobStatus::Completed);
}

#[derive(Debug, Clone)]
enum SimOp {
    Submit(usize),
    Tick,
    Kill(usize),
}

fn sim_op() -> impl Strategy<Value = SimOp> {
    prop_oneof![
        3 => (0..2usize).prop_map(SimOp::Submit),
        3 => Just(SimOp::Tick),
        1 => (0..64usize).prop_map(SimOp::Kill),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    /// Every submitted job is queued, running or finished, and no queue runs
    /// more jobs than it has slots.
    #[test]
    fn batch_jobs_are_conserved(ops in proptest::collection::vec(sim_op(), 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let b = sim(&[("a", 1, 0), ("b", 3, 0)]);
        let names = ["a", "b"];
        let mut handles = Vec::new();
        for (i, op) in ops.iter().enumerate() {
            match op {
                SimOp::Submit(q) => {
                    let d = desc(dir.path(), &format!("j{i}"), &["/bin/sh", "-c", "sleep 0.05"]);
                    handles.push(b.submit(&queue(names[*q]), &d).unwrap());
                }
                SimOp::Tick => {
                    b.sim_tick();
                }
                SimOp::Kill(k) => {
                    if !handles.is_empty() {
                        let _ = b.kill(&handles[k % handles.len()]);
                    }
                }
            }
            let c = b.counts();
            let queued: usize = c.queued.values().sum();
            let running: usize = c.running.values().sum();
            prop_assert_eq!(queued + running + c.finished, c.submitted);
            prop_assert_eq!(c.submitted, handles.len());
            prop_assert!(c.running["a"] <= 1);
            prop_assert!(c.running["b"] <= 3);
        }
        b.reset();
        prop_assert_eq!(b.counts().submitted, 0);
    }
}

// ---- MockGrid --------------------------------------------------------------

fn grid(cfg: MockGridConfig, scratch: &Path) -> MockGridBackend {
    MockGridBackend::new(cfg, scratch).unwrap()
}

/// Number of aborted jobs out of `n` submitted in one collection.
fn grid_failures(seed: u64, rate: f64, n: usize, dir: &Path) -> Vec<bool> {
    let g = grid(
        MockGridConfig {
            failure_rate: rate,
            seed,
            // only one wrapper may start; the rest wait
            max_concurrent: 1,
            ..Default::default()
        },
        &dir.join(format!("scratch-{seed}")),
    );
    let d = desc(dir, "g", &["/bin/true"]);
    let descs = vec![d; n];
    let handles = g.submit_collection(&Component::new(MOCK_GRID), &descs).unwrap();
    let reports = g.poll(&handles).unwrap();
    reports.iter().map(|r| r.raw_status == "Aborted").collect()
}

#[test]
fn grid_failure_rate_is_within_four_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let (n, p) = (1000usize, 0.3f64);
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for seed in [0u64, 1, 7, 42, 2008] {
        let failed = grid_failures(seed, p, n, dir.path()).iter().filter(|f| **f).count();
        let dev = (failed as f64 - n as f64 * p).abs();
        assert!(dev <= 4.0 * sigma, "seed {seed}: {failed} failures, {dev} away from the mean");
    }
}

#[test]
fn grid_failures_are_reproducible_from_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = grid_failures(5, 0.3, 200, dir.path());
    let b = grid_failures(5, 0.3, 200, &dir.path().join("again"));
    assert_eq!(a, b);
    assert_eq!(grid_failures(3, 0.0, 50, dir.path()), vec![false; 50]);
}

#[test]
fn grid_certain_failure_fails_the_job() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.backends.mock_grid.failure_rate = 1.0;
    let s = Session::open(cfg).unwrap();
    let j = job(&s, exe("/bin/echo", &["never"]), Component::new(MOCK_GRID));
    s.submit(j.id).unwrap();
    let done = settle(&s, j.id, Duration::from_secs(20));
    assert_eq!(done.status, JobStatus::Failed);
    assert_eq!(done.backend_handle.unwrap().raw_status, "Aborted");
    assert!(matches!(s.peek(JobRef::master(j.id), "stdout", None), Err(Error::PeekUnavailable(_))));
}

// ---- bulk submission -------------------------------------------------------

fn split_job(s: &Session, backend: Component, n: usize) -> u64 {
    let sets: Vec<Vec<String>> = (0..n).map(|i| vec![i.to_string()]).collect();
    s.new_job(
        exe("/bin/echo", &[]),
        backend,
        JobPatch {
            splitter: Some(Some(Component::new(ARG_SPLITTER).with("args", Value::StrTable(sets)))),
            ..Default::default()
        },
    )
    .unwrap()
    .id
}

#[test]
fn bulk_capable_backend_gets_one_call() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    let id = split_job(&s, Component::new(MOCK_GRID), 100);
    let grid = s.registry().backend(MOCK_GRID).unwrap();
    let before = grid.stats();
    let j = s.submit(id).unwrap();
    let after = grid.stats();
    assert_eq!(after.collection_calls - before.collection_calls, 1);
    assert_eq!(after.submit_calls - before.submit_calls, 0);
    assert_eq!(j.subjobs.len(), 100);
    assert!(j.subjobs.iter().all(|sj| sj.status == JobStatus::Submitted));
    assert_eq!(settle(&s, id, Duration::from_secs(60)).status, JobStatus::Completed);
}

#[test]
fn other_backends_get_one_call_per_job() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    let id = split_job(&s, local(), 100);
    let backend = s.registry().backend(jobfront::plugins::builtin::LOCAL).unwrap();
    let before = backend.stats();
    s.submit(id).unwrap();
    let after = backend.stats();
    assert_eq!(after.submit_calls - before.submit_calls, 100);
    assert_eq!(after.collection_calls, 0);
    assert_eq!(settle(&s, id, Duration::from_secs(60)).status, JobStatus::Completed);
}

#[test]
fn empty_bulk_makes_no_calls() {
    let dir = tempfile::tempdir().unwrap();
    let g = grid(MockGridConfig::default(), dir.path());
    let l = LocalBackend::new();
    assert!(bulk_submit(&g, &Component::new(MOCK_GRID), &[]).unwrap().is_empty());
    assert!(bulk_submit(&l, &local(), &[]).unwrap().is_empty());
    assert_eq!((g.stats().collection_calls, g.stats().submit_calls), (0, 0));
    assert_eq!(l.stats().submit_calls, 0);
}

#[test]
fn bulk_disabled_grid_falls_back_to_single_submits() {
    let dir = tempfile::tempdir().unwrap();
    let g = grid(
        MockGridConfig {
            supports_bulk: false,
            ..Default::default()
        },
        dir.path(),
    );
    let descs: Vec<_> = (0..5).map(|i| desc(dir.path(), &format!("d{i}"), &["/bin/true"])).collect();
    let hs = bulk_submit(&g, &Component::new(MOCK_GRID), &descs).unwrap();
    assert_eq!(hs.len(), 5);
    assert_eq!((g.stats().collection_calls, g.stats().submit_calls), (0, 5));
}

// ---- Local -----------------------------------------------------------------

#[test]
fn local_kill_is_idempotent_at_the_backend() {
    let dir = tempfile::tempdir().unwrap();
    let l = LocalBackend::new();
    let h = l.submit(&local(), &desc(dir.path(), "k", &["/bin/sleep", "30"])).unwrap();
    let pid: i32 = h.backend_id.parse().unwrap();
    assert!(jobfront::backends::process::pid_alive(pid));
    l.kill(&h).unwrap();
    assert!(matches!(l.kill(&h), Err(Error::AlreadyFinished(_))));
    assert!(wait_for(Duration::from_secs(5), || !jobfront::backends::process::pid_alive(pid)));
    let r = &l.poll(std::slice::from_ref(&h)).unwrap()[0];
    assert_eq!(r.raw_status, "killed");
    assert_eq!(r.mapped_event, None);
}

#[test]
fn local_kill_through_the_session() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    let j = job(&s, sh("sleep 30"), local());
    s.submit(j.id).unwrap();
    assert_eq!(s.kill(JobRef::master(j.id)).unwrap().status, JobStatus::Killed);
    assert!(matches!(s.kill(JobRef::master(j.id)), Err(Error::IllegalTransition { .. })));
    s.refresh().unwrap();
    assert_eq!(status_of(&s, j.id), JobStatus::Killed);
}

#[test]
fn local_handles_survive_a_new_backend_instance() {
    let dir = tempfile::tempdir().unwrap();
    let first = LocalBackend::new();
    let d = desc(dir.path(), "r", &["/bin/echo", "x"]);
    let h = first.submit(&local(), &d).unwrap();
    assert!(wait_for(Duration::from_secs(10), || d.workdir.join(EXIT_CODE_FILE).is_file()));

    let second = LocalBackend::new();
    let r = &second.poll(std::slice::from_ref(&h)).unwrap()[0];
    assert_eq!(r.mapped_event, Some(JobEvent::BackendDoneOk));
    assert_eq!(r.exit_code, Some(0));

    let mut gone = BackendHandle::new("999999999", "running");
    gone.workdir = Some(dir.path().join("never-created"));
    let r = &second.poll(&[gone]).unwrap()[0];
    assert_eq!(r.raw_status, "lost");
    assert_eq!(r.mapped_event, Some(JobEvent::BackendDoneErr));
    assert!(matches!(second.kill(&h), Err(Error::UnknownHandle(_))));
}

// ---- output retrieval ------------------------------------------------------

#[test]
fn output_patterns_select_files() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    let j = s
        .new_job(
            sh("echo 1 > a.dat; echo 2 > b.dat; echo 3 > c.txt"),
            local(),
            JobPatch {
                output_sandbox: Some(strings(&["*.dat"])),
                ..Default::default()
            },
        )
        .unwrap();
    s.submit(j.id).unwrap();
    assert_eq!(settle(&s, j.id, Duration::from_secs(20)).status, JobStatus::Completed);
    let out = s.workspace().output_dir(JobRef::master(j.id));
    assert!(out.join("a.dat").is_file());
    assert!(out.join("b.dat").is_file());
    assert!(!out.join("c.txt").exists());
    assert_eq!(s.peek(JobRef::master(j.id), "b.dat", None).unwrap(), "2\n");
}

#[test]
fn missing_declared_output_fails_the_job() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    let (_, rx) = s.bus().subscribe(None);
    let j = s
        .new_job(
            sh("echo 1 > a.dat"),
            local(),
            JobPatch {
                output_sandbox: Some(strings(&["*.root"])),
                ..Default::default()
            },
        )
        .unwrap();
    s.submit(j.id).unwrap();
    assert_eq!(settle(&s, j.id, Duration::from_secs(20)).status, JobStatus::Failed);
    let reason = rx
        .try_iter()
        .filter(|e| e.kind == EventKind::StatusChanged && e.payload.get("to").map(String::as_str) == Some("failed"))
        .find_map(|e| e.payload.get("reason").cloned())
        .unwrap();
    assert!(reason.contains("*.root"), "{reason}");
}

#[test]
fn nonzero_exit_fails_the_job() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    let j = job(&s, sh("echo partial; exit 4"), local());
    s.submit(j.id).unwrap();
    let done = settle(&s, j.id, Duration::from_secs(20));
    assert_eq!(done.status, JobStatus::Failed);
    assert_eq!(done.backend_handle.unwrap().exit_code, Some(4));
    assert_eq!(s.peek(JobRef::master(j.id), "stdout", None).unwrap(), "partial\n");
}

// ---- interchangeability ----------------------------------------------------

fn all_backends() -> Vec<Component> {
    vec![
        local(),
        Component::new(BATCH_SIM).with("queue", "short"),
        Component::new(REMOTE_SHELL),
        Component::new(MOCK_GRID),
    ]
}

#[test]
fn one_job_definition_runs_everywhere_with_identical_output() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    let input = dir.path().join("greeting.txt");
    fs::write(&input, "from the sandbox\n").unwrap();
    let app = exe(
        "/bin/sh",
        &["-c", "cat greeting.txt; printf '%s\\n' \"$@\"; echo \"env=$MODE\"", "sh", "two words", "it's", "$x"],
    )
    .with("env", Value::StrMap([("MODE".to_string(), "same".to_string())].into()));
    let mut outputs = Vec::new();
    let mut ids = Vec::new();
    for b in all_backends() {
        let j = s
            .new_job(
                app.clone(),
                b,
                JobPatch {
                    input_sandbox: Some(vec![input.clone()]),
                    ..Default::default()
                },
            )
            .unwrap();
        s.submit(j.id).unwrap();
        ids.push(j.id);
    }
    for (id, b) in ids.iter().zip(all_backends()) {
        let done = settle(&s, *id, Duration::from_secs(30));
        assert_eq!(done.status, JobStatus::Completed, "{}", b.plugin);
        outputs.push(fs::read(s.workspace().output_dir(JobRef::master(*id)).join("stdout")).unwrap());
    }
    let expected = b"from the sandbox\ntwo words\nit's\n$x\nenv=same\n".to_vec();
    for (o, b) in outputs.iter().zip(all_backends()) {
        assert_eq!(o, &expected, "{}", b.plugin);
    }
}
