#![allow(dead_code)]

use std::path::Path;
use std::time::{Duration, Instant};

use jobfront::plugins::builtin::{EXECUTABLE, LOCAL};
use jobfront::{Component, Job, JobPatch, JobRef, JobStatus, Session, SessionConfig};

pub fn config(dir: &Path) -> SessionConfig {
    let mut c = SessionConfig::at(dir.join("repo"));
    c.monitor.default_poll_rate_s = 0.1;
    c.monitor.poll_timeout_s = 0.08;
    c
}

pub fn session(dir: &Path) -> Session {
    Session::open(config(dir)).expect("open session")
}

pub fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

pub fn exe(path: &str, args: &[&str]) -> Component {
    Component::new(EXECUTABLE).with("exe", path).with("args", strings(args))
}

pub fn sh(script: &str) -> Component {
    exe("/bin/sh", &["-c", script])
}

pub fn local() -> Component {
    Component::new(LOCAL)
}

pub fn job(s: &Session, app: Component, backend: Component) -> Job {
    s.new_job(app, backend, JobPatch::default()).expect("create job")
}

/// Polls `refresh` until the job leaves the active states.
pub fn settle(s: &Session, id: u64, timeout: Duration) -> Job {
    s.wait(JobRef::master(id), timeout).expect("job settles")
}

pub fn wait_for(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    cond()
}

pub fn status_of(s: &Session, id: u64) -> JobStatus {
    s.job(id).expect("job exists").status
}

pub fn record_path(s: &Session, id: u64) -> std::path::PathBuf {
    s.config().repository_root.join("jobs").join(id.to_string()).join("record.toml")
}
