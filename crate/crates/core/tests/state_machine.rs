mod common;

use std::fs;
use std::sync::Arc;
use std::time::Duration;

use jobfront::backends::BackendSet;
use jobfront::persistence::{JobRecord, Repository};
use jobfront::plugins::builtin::{builtin_registry, EXECUTABLE, LOCAL, MOCK_GRID};
use jobfront::{
    derive_master_status, transition, Component, Error, Job, JobEvent, JobPatch, JobRef, JobStatus,
    Value,
};
use proptest::prelude::*;

use common::*;

/// Hand-written transition table. Rows follow `STATES`, columns `EVENTS`;
/// `-` marks an illegal pair.
const STATES: [&str; 6] = ["new", "submitted", "running", "completed", "failed", "killed"];
const EVENTS: [&str; 7] = [
    "submit_requested",
    "backend_accepted",
    "backend_running",
    "backend_done_ok",
    "backend_done_err",
    "kill_requested",
    "resubmit_requested",
];
const TABLE: [[&str; 7]; 6] = [
    ["submitted", "-", "-", "-", "-", "killed", "-"],
    ["-", "submitted", "running", "completed", "failed", "killed", "-"],
    ["-", "-", "-", "completed", "failed", "killed", "-"],
    ["-", "-", "-", "-", "-", "-", "-"],
    ["-", "-", "-", "-", "-", "-", "submitted"],
    ["-", "-", "-", "-", "-", "-", "submitted"],
];

fn oracle(from: JobStatus, event: JobEvent) -> Option<JobStatus> {
    let r = STATES.iter().position(|s| *s == from.as_str()).unwrap();
    let c = EVENTS.iter().position(|e| *e == event.as_str()).unwrap();
    match TABLE[r][c] {
        "-" => None,
        to => Some(to.parse().unwrap()),
    }
}

#[test]
fn all_42_pairs_match_the_table() {
    let mut checked = 0;
    for from in JobStatus::ALL {
        for event in JobEvent::ALL {
            let got = transition(from, event);
            match oracle(from, event) {
                Some(to) => assert_eq!(got.unwrap(), to, "{from} on {event}"),
                None => match got {
                    Err(Error::IllegalTransition { from: f, event: e }) => {
                        assert_eq!((f, e), (from, event));
                    }
                    other => panic!("{from} on {event}: expected IllegalTransition, got {other:?}"),
                },
            }
            checked += 1;
        }
    }
    assert_eq!(checked, 42);
}

#[test]
fn example_transitions() {
    let s = transition(JobStatus::New, JobEvent::SubmitRequested).unwrap();
    assert_eq!(transition(s, JobEvent::BackendAccepted).unwrap(), JobStatus::Submitted);
    assert!(matches!(
        transition(JobStatus::Completed, JobEvent::KillRequested),
        Err(Error::IllegalTransition { .. })
    ));
}

/// Master status rule written out independently: activity, then failure,
/// then killing, otherwise completed.
fn master_oracle(statuses: &[JobStatus]) -> JobStatus {
    use JobStatus::*;
    if statuses.iter().any(|s| matches!(s, Submitted | Running)) {
        Running
    } else if statuses.contains(&Failed) {
        Failed
    } else if statuses.contains(&Killed) {
        Killed
    } else {
        Completed
    }
}

#[test]
fn master_status_brute_force_up_to_three() {
    let all = JobStatus::ALL;
    let mut lists: Vec<Vec<JobStatus>> = Vec::new();
    for a in 0..6 {
        lists.push(vec![all[a]]);
        for b in a..6 {
            lists.push(vec![all[a], all[b]]);
            for c in b..6 {
                lists.push(vec![all[a], all[b], all[c]]);
            }
        }
    }
    // 6 + 21 + 56 multisets
    assert_eq!(lists.len(), 83);
    for l in &lists {
        assert_eq!(derive_master_status(l).unwrap(), master_oracle(l), "{l:?}");
    }
    use JobStatus::*;
    assert_eq!(derive_master_status(&[Completed, Completed]).unwrap(), Completed);
    assert_eq!(derive_master_status(&[Completed, Failed]).unwrap(), Failed);
    assert_eq!(derive_master_status(&[Running, Failed]).unwrap(), Running);
    assert!(matches!(derive_master_status(&[]), Err(Error::EmptySubjobs)));
}

fn status_strategy() -> impl Strategy<Value = JobStatus> {
    prop::sample::select(JobStatus::ALL.to_vec())
}

fn event_strategy() -> impl Strategy<Value = JobEvent> {
    prop::sample::select(JobEvent::ALL.to_vec())
}

proptest! {
    #[test]
    fn master_status_is_permutation_invariant(
        (list, perm) in prop::collection::vec(status_strategy(), 1..12)
            .prop_flat_map(|l| { let n = l.len(); (Just(l), Just((0..n).collect::<Vec<_>>()).prop_shuffle()) })
    ) {
        let shuffled: Vec<JobStatus> = perm.iter().map(|&i| list[i]).collect();
        prop_assert_eq!(derive_master_status(&list).unwrap(), derive_master_status(&shuffled).unwrap());
        prop_assert_eq!(derive_master_status(&list).unwrap(), master_oracle(&list));
    }
}

fn test_job(id: u64) -> Job {
    Job::new(
        id,
        exe("/bin/echo", &["hi"]),
        Component::new(LOCAL),
        chrono::Utc::now(),
    )
}

/// Random event sequences, legal and illegal, applied to a job that is
/// saved after every step: illegal events leave the status alone, legal
/// ones follow the table, and the record on disk always agrees.
#[test]
fn random_event_sequences_never_corrupt_stored_status() {
    let dir = tempfile::tempdir().unwrap();
    let backends = BackendSet::new(&Default::default(), &dir.path().join("scratch")).unwrap();
    let registry = Arc::new(builtin_registry(&backends).unwrap());
    let (repo, _) = Repository::open(&dir.path().join("repo"), registry.clone()).unwrap();
    let repo = std::cell::RefCell::new(repo);
    let next = std::cell::Cell::new(0u64);
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig {
        cases: 10_000,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    runner
        .run(&prop::collection::vec(event_strategy(), 0..24), |events| {
            let id = next.get();
            next.set(id + 1);
            let mut job = test_job(id);
            let mut model = JobStatus::New;
            let mut repo = repo.borrow_mut();
            repo.save(&job).unwrap();
            for ev in events {
                let before = job.status;
                let got = job.apply_event(ev);
                match oracle(model, ev) {
                    Some(to) => {
                        prop_assert_eq!(got.unwrap(), to);
                        model = to;
                    }
                    None => {
                        prop_assert!(got.is_err());
                        prop_assert_eq!(job.status, before);
                    }
                }
                repo.save(&job).unwrap();
            }
            prop_assert_eq!(job.status, model);
            prop_assert_eq!(repo.get(id).unwrap().status, model);
            let path = repo.root().join("jobs").join(id.to_string()).join("record.toml");
            let rec = JobRecord::parse(&fs::read_to_string(path).unwrap()).unwrap();
            prop_assert_eq!(rec.metadata.status, model);
            prop_assert_eq!(rec.to_job(&registry).unwrap().status, model);
            Ok(())
        })
        .unwrap();
    assert_eq!(next.get(), 10_000);
}

/// One job in every status other than `new`.
fn jobs_in_every_state(s: &jobfront::Session) -> Vec<u64> {
    let completed = job(s, exe("/bin/echo", &["done"]), local());
    let failed = job(s, exe("/bin/false", &[]), local());
    let killed = job(s, exe("/bin/sleep", &["30"]), local());
    let running = job(s, sh("sleep 30"), local());
    let submitted = job(s, exe("/bin/echo", &["queued"]), Component::new("BatchSim").with("queue", "long"));
    for j in [&completed, &failed, &killed, &running, &submitted] {
        s.submit(j.id).unwrap();
    }
    settle(s, completed.id, Duration::from_secs(20));
    settle(s, failed.id, Duration::from_secs(20));
    s.kill(JobRef::master(killed.id)).unwrap();
    assert!(wait_for(Duration::from_secs(20), || {
        s.refresh().unwrap();
        status_of(s, running.id) == JobStatus::Running
    }));
    assert_eq!(status_of(s, completed.id), JobStatus::Completed);
    assert_eq!(status_of(s, failed.id), JobStatus::Failed);
    assert_eq!(status_of(s, killed.id), JobStatus::Killed);
    assert!(status_of(s, submitted.id).is_active());
    vec![completed.id, failed.id, killed.id, running.id, submitted.id]
}

#[derive(Debug, Clone)]
enum Mutation {
    Name(String),
    Attribute(&'static str, &'static str, Value),
    Backend(&'static str),
    Args(Vec<String>),
}

fn mutation_strategy() -> impl Strategy<Value = Mutation> {
    prop_oneof![
        "[a-z]{1,8}".prop_map(Mutation::Name),
        "[a-z/]{1,12}".prop_map(|s| Mutation::Attribute("application", "exe", Value::Str(s))),
        prop::collection::vec("[a-z]{0,5}", 0..4).prop_map(Mutation::Args),
        prop::sample::select(vec![LOCAL, MOCK_GRID, "BatchSim"]).prop_map(Mutation::Backend),
        Just(Mutation::Attribute("backend", "id", Value::Str("forged".into()))),
    ]
}

#[test]
fn mutating_a_submitted_job_is_always_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    let ids = jobs_in_every_state(&s);
    let snapshots: Vec<(u64, Vec<u8>)> = ids.iter().map(|&id| (id, fs::read(record_path(&s, id)).unwrap())).collect();
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig {
        cases: 200,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    runner
        .run(&(prop::sample::select(ids.clone()), mutation_strategy()), |(id, m)| {
            let r = match m {
                Mutation::Name(n) => s.update_job(id, &JobPatch::name(n)),
                Mutation::Attribute(slot, attr, v) => s.set_attribute(id, slot, attr, v),
                Mutation::Backend(b) => s.update_job(
                    id,
                    &JobPatch {
                        backend: Some(Component::new(b)),
                        ..Default::default()
                    },
                ),
                Mutation::Args(a) => s.update_job(
                    id,
                    &JobPatch {
                        application: Some(Component::new(EXECUTABLE).with("exe", "/bin/echo").with("args", a)),
                        ..Default::default()
                    },
                ),
            };
            prop_assert!(matches!(r, Err(Error::JobImmutable(_))), "{:?}", r);
            Ok(())
        })
        .unwrap();
    s.kill(JobRef::master(ids[3])).ok();
    s.kill(JobRef::master(ids[4])).ok();
    // The records only changed through the kills above, never through edits.
    for (id, before) in &snapshots[..3] {
        assert_eq!(&fs::read(record_path(&s, *id)).unwrap(), before, "job {id}");
    }
}

#[test]
fn new_jobs_accept_edits() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    let j = job(&s, exe("", &[]), local());
    assert_eq!(j.status, JobStatus::New);
    let j = s.set_attribute(j.id, "application", "exe", Value::Str("/bin/echo".into())).unwrap();
    assert_eq!(j.application.str_attr("exe"), Some("/bin/echo"));
    let j = s.update_job(j.id, &JobPatch::name("renamed")).unwrap();
    assert_eq!(j.name, "renamed");
}

#[test]
fn ids_are_monotone_from_zero() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    let ids: Vec<u64> = (0..3).map(|_| job(&s, exe("/bin/echo", &[]), local()).id).collect();
    assert_eq!(ids, vec![0, 1, 2]);
    let named = s
        .new_job(exe("/bin/echo", &[]), local(), JobPatch::name("MyJob"))
        .unwrap();
    assert_eq!((named.id, named.status, named.name.as_str()), (3, JobStatus::New, "MyJob"));
    assert!(matches!(
        s.new_job(exe("/bin/echo", &[]), Component::new("NoSuchBackend"), JobPatch::default()),
        Err(Error::UnknownPlugin { .. })
    ));
}

#[test]
fn copy_resets_run_state_and_leaves_the_source_alone() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    let src = job(&s, exe("/bin/echo", &["hi"]), local());
    s.submit(src.id).unwrap();
    let src = settle(&s, src.id, Duration::from_secs(20));
    assert_eq!(src.status, JobStatus::Completed);
    let before = fs::read(record_path(&s, src.id)).unwrap();

    let copy = s
        .copy_job(
            src.id,
            &JobPatch {
                backend: Some(Component::new(MOCK_GRID)),
                ..Default::default()
            },
        )
        .unwrap();
    assert_ne!(copy.id, src.id);
    assert_eq!(copy.status, JobStatus::New);
    assert_eq!(copy.backend.plugin, MOCK_GRID);
    assert!(copy.backend_handle.is_none() && copy.submitted_at.is_none() && copy.finished_at.is_none());
    assert_eq!(copy.application, src.application);

    let plain = s.copy_job(src.id, &JobPatch::default()).unwrap();
    assert_eq!(plain.application, src.application);
    assert_eq!(plain.name, src.name);
    assert_eq!(plain.backend.plugin, src.backend.plugin);
    assert_eq!(plain.backend.str_attr("id"), Some(""), "backend info is cleared");

    s.submit(plain.id).unwrap();
    settle(&s, plain.id, Duration::from_secs(20));
    assert_eq!(fs::read(record_path(&s, src.id)).unwrap(), before);
}

#[test]
fn copy_of_a_split_job_has_no_subjobs() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path());
    let args: Vec<Vec<String>> = (0..10).map(|i| vec![i.to_string()]).collect();
    let master = s
        .new_job(
            exe("/bin/echo", &[]),
            local(),
            JobPatch {
                splitter: Some(Some(Component::new("ArgSplitter").with("args", Value::StrTable(args)))),
                ..Default::default()
            },
        )
        .unwrap();
    s.submit(master.id).unwrap();
    assert_eq!(s.job(master.id).unwrap().subjobs.len(), 10);
    let copy = s.copy_job(master.id, &JobPatch::default()).unwrap();
    assert_eq!(copy.subjobs.len(), 0);
    assert!(copy.splitter.is_some());
    settle(&s, master.id, Duration::from_secs(30));
}
