use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simplified job state as seen by the user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    New,
    Submitted,
    Running,
    Completed,
    Failed,
    Killed,
}

impl JobStatus {
    pub const ALL: [JobStatus; 6] = [
        JobStatus::New,
        JobStatus::Submitted,
        JobStatus::Running,
        JobStatus::Completed,
        JobStatus::Failed,
        JobStatus::Killed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JobStatus::New => "new",
            JobStatus::Submitted => "submitted",
            JobStatus::Running => "running",
            JobStatus::Completed => "completed",
            JobStatus::Failed => "failed",
            JobStatus::Killed => "killed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Completed | JobStatus::Failed | JobStatus::Killed)
    }

    /// Submitted or running.
    pub fn is_active(self) -> bool {
        matches!(self, JobStatus::Submitted | JobStatus::Running)
    }
}

impl fmt::Display for JobStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        JobStatus::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidFilter(format!("unknown status `{s}`")))
    }
}

/// Inputs to the job state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobEvent {
    SubmitRequested,
    BackendAccepted,
    BackendRunning,
    BackendDoneOk,
    BackendDoneErr,
    KillRequested,
    ResubmitRequested,
}

impl JobEvent {
    pub const ALL: [JobEvent; 7] = [
        JobEvent::SubmitRequested,
        JobEvent::BackendAccepted,
        JobEvent::BackendRunning,
        JobEvent::BackendDoneOk,
        JobEvent::BackendDoneErr,
        JobEvent::KillRequested,
        JobEvent::ResubmitRequested,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JobEvent::SubmitRequested => "submit_requested",
            JobEvent::BackendAccepted => "backend_accepted",
            JobEvent::BackendRunning => "backend_running",
            JobEvent::BackendDoneOk => "backend_done_ok",
            JobEvent::BackendDoneErr => "backend_done_err",
            JobEvent::KillRequested => "kill_requested",
            JobEvent::ResubmitRequested => "resubmit_requested",
        }
    }
}

impl fmt::Display for JobEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The job state machine.
///
/// `backend_accepted` is only meaningful once a submission has been
/// recorded, so it is a self-loop on `submitted`. Killing a queued job goes
/// straight to `killed` without passing through `running`.
pub fn transition(from: JobStatus, event: JobEvent) -> Result<JobStatus> {
    use JobEvent::*;
    use JobStatus::*;
    let to = match (from, event) {
        (New, SubmitRequested) => Submitted,
        (Submitted, BackendAccepted) => Submitted,
        (Submitted, BackendRunning) => Running,
        (Submitted | Running, BackendDoneOk) => Completed,
        (Submitted | Running, BackendDoneErr) => Failed,
        (New | Submitted | Running, KillRequested) => Killed,
        (Failed | Killed, ResubmitRequested) => Submitted,
        _ => return Err(Error::IllegalTransition { from, event }),
    };
    Ok(to)
}

/// Status of a split job computed from its subjobs: any activity wins, then
/// failure, then killing; everything else is `completed`. Subjobs in `new`
/// only exist before the master is submitted, when this is never consulted.
pub fn derive_master_status(subjobs: &[JobStatus]) -> Result<JobStatus> {
    if subjobs.is_empty() {
        return Err(Error::EmptySubjobs);
    }
    let any = |s: JobStatus| subjobs.contains(&s);
    let status = if subjobs.iter().any(|s| s.is_active()) {
        JobStatus::Running
    } else if any(JobStatus::Failed) {
        JobStatus::Failed
    } else if any(JobStatus::Killed) {
        JobStatus::Killed
    } else {
        JobStatus::Completed
    };
    Ok(status)
}
