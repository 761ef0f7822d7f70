//! Drives a background daemon through the `jobfront` binary, the way a user
//! at a terminal would.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value as Json;
use tempfile::TempDir;

struct Terminal {
    dir: TempDir,
    repo: PathBuf,
}

impl Terminal {
    fn new() -> Terminal {
        let dir = tempfile::tempdir().unwrap();
        let repo = dir.path().join("repo");
        Terminal { dir, repo }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_jobfront"))
            .env("HOME", self.dir.path())
            .env("XDG_CONFIG_HOME", self.dir.path().join("xdg"))
            .env("JOBFRONT_SITE_CONFIG", self.dir.path().join("none.toml"))
            .env_remove("JOBFRONT_WORKGROUP_CONFIG")
            .env_remove("JOBFRONT_USER_CONFIG")
            .arg("--repo")
            .arg(&self.repo)
            .args(["--set", "http.port=0", "--set", "monitor.default_poll_rate_s=0.2"])
            .args(args)
            .output()
            .unwrap()
    }

    /// Runs a command that must succeed and returns its stdout.
    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn json(&self, args: &[&str]) -> Json {
        let mut full = vec!["--json"];
        full.extend(args);
        serde_json::from_str(&self.ok(&full)).unwrap()
    }
}

impl Drop for Terminal {
    fn drop(&mut self) {
        if self.run(&["daemon", "stop"]).status.success() {
            return;
        }
        // last resort so a failed test does not leak a process
        if let Ok(text) = std::fs::read_to_string(self.repo.join("daemon.json")) {
            if let Some(pid) = serde_json::from_str::<Json>(&text).ok().and_then(|v| v["pid"].as_i64()) {
                let _ = Command::new("kill").arg(pid.to_string()).status();
            }
        }
    }
}

fn marker_script(marker: &Path) -> String {
    format!("test -f {0} || {{ touch {0}; exit 1; }}; echo recovered", marker.display())
}

#[test]
fn terminal_session_replay() {
    replay_terminal_session();
}

/// create, submit, peek, copy to another backend, submit, then resubmit
/// whatever failed.
pub fn replay_terminal_session() {
    let t = Terminal::new();
    let started = t.ok(&["daemon", "start"]);
    assert!(started.contains("listening on http://127.0.0.1:"), "{started}");
    assert_eq!(t.run(&["daemon", "start"]).status.code(), Some(1), "a second daemon is refused");

    // create, submit and inspect a local job
    assert_eq!(t.ok(&["job", "create", "--name", "MyJob", "--exe", "/bin/echo", "--arg", "hi"]), "created job 0\n");
    let shown = t.ok(&["job", "show", "0"]);
    assert!(shown.contains("MyJob") && shown.contains("new"), "{shown}");
    assert_eq!(t.ok(&["job", "submit", "0"]), "job 0 submitted\n");
    let done = t.json(&["job", "wait", "0", "--timeout", "30"]);
    assert_eq!(done["status"], "completed");
    assert_eq!(t.ok(&["job", "peek", "0"]), "hi\n");

    // the same job, moved to the grid
    let copy = t.json(&["job", "copy", "0", "--backend", "MockGrid", "--name", "GridJob"]);
    assert_eq!(copy["id"], 1);
    assert_eq!(copy["status"], "new");
    assert_eq!(copy["backend"]["type"], "MockGrid");
    assert_eq!(copy["application"], done["application"]);
    t.ok(&["job", "submit", "1"]);
    assert_eq!(t.json(&["job", "wait", "1", "--timeout", "30"])["status"], "completed");
    assert_eq!(t.ok(&["job", "peek", "1"]), "hi\n");

    // a job that fails once, then succeeds when resubmitted
    let marker = t.dir.path().join("marker");
    let script = marker_script(&marker);
    t.ok(&["job", "create", "--name", "Flaky", "--exe", "/bin/sh", "--arg", "-c", "--arg", &script]);
    t.ok(&["job", "submit", "2"]);
    assert_eq!(t.json(&["job", "wait", "2", "--timeout", "30"])["status"], "failed");
    let table = t.ok(&["jobs", "list", "--status", "failed"]);
    assert_eq!(table.lines().count(), 2, "{table}");
    assert!(table.contains("Flaky"));

    let outcome = t.ok(&["jobs", "resubmit", "--status", "failed"]);
    assert_eq!(outcome.lines().count(), 1, "{outcome}");
    assert!(outcome.contains("ok") && outcome.contains("submitted"), "{outcome}");
    assert_eq!(t.json(&["job", "wait", "2", "--timeout", "30"])["status"], "completed");
    assert_eq!(t.ok(&["job", "peek", "2"]), "recovered\n");
    assert_eq!(t.ok(&["jobs", "list", "--status", "failed"]).lines().count(), 1);

    // the daemon goes away, the jobs stay
    assert!(t.json(&["daemon", "status"])["pid"].is_number());
    t.ok(&["daemon", "stop"]);
    for _ in 0..100 {
        if !t.repo.join("daemon.json").exists() {
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    assert!(!t.repo.join("daemon.json").exists());
    let statuses: Vec<Json> = t
        .json(&["--embedded", "jobs", "list"])
        .as_array()
        .unwrap()
        .iter()
        .map(|j| j["status"].clone())
        .collect();
    assert_eq!(statuses, ["completed", "completed", "completed"]);
}
