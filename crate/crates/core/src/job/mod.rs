//! The job record, its identity and its state machine.

mod status;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plugins::Component;

pub use status::{derive_master_status, transition, JobEvent, JobStatus};

/// Identity of a job or of one of its subjobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JobRef {
    pub id: u64,
    pub subjob: Option<usize>,
}

impl JobRef {
    pub fn master(id: u64) -> Self {
        JobRef { id, subjob: None }
    }

    pub fn sub(id: u64, index: usize) -> Self {
        JobRef {
            id,
            subjob: Some(index),
        }
    }
}

impl fmt::Display for JobRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.subjob {
            Some(i) => write!(f, "{}.{}", self.id, i),
            None => write!(f, "{}", self.id),
        }
    }
}

impl FromStr for JobRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownJob(s.to_string());
        match s.split_once('.') {
            Some((id, sub)) => Ok(JobRef::sub(
                id.parse().map_err(|_| bad())?,
                sub.parse().map_err(|_| bad())?,
            )),
            None => Ok(JobRef::master(s.parse().map_err(|_| bad())?)),
        }
    }
}

/// What a backend reported about a job it accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendHandle {
    pub backend_id: String,
    pub raw_status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual_queue: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual_host: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    /// Directory the wrapper runs in, when it is visible to this host.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workdir: Option<PathBuf>,
}

impl BackendHandle {
    pub fn new(backend_id: impl Into<String>, raw_status: impl Into<String>) -> Self {
        BackendHandle {
            backend_id: backend_id.into(),
            raw_status: raw_status.into(),
            actual_queue: None,
            actual_host: None,
            exit_code: None,
            workdir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subjob_index: Option<usize>,
    #[serde(default)]
    pub name: String,
    pub application: Component,
    pub backend: Component,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputdata: Option<Component>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputdata: Option<Component>,
    #[serde(default)]
    pub input_sandbox: Vec<PathBuf>,
    #[serde(default)]
    pub output_sandbox: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splitter: Option<Component>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merger: Option<Component>,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_handle: Option<BackendHandle>,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submitted_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
    /// Attributes dropped by a schema migration, kept verbatim for audit.
    /// Keyed by component slot, then attribute name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub quarantine: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default)]
    pub subjobs: Vec<Job>,
    /// Set when the stored record could not be migrated to the current schemas.
    #[serde(skip)]
    pub read_only: bool,
}

impl Job {
    pub fn new(id: u64, application: Component, backend: Component, now: DateTime<Utc>) -> Self {
        Job {
            id,
            subjob_index: None,
            name: String::new(),
            application,
            backend,
            inputdata: None,
            outputdata: None,
            input_sandbox: Vec::new(),
            output_sandbox: Vec::new(),
            splitter: None,
            merger: None,
            status: JobStatus::New,
            backend_handle: None,
            created_at: now,
            submitted_at: None,
            finished_at: None,
            quarantine: BTreeMap::new(),
            subjobs: Vec::new(),
            read_only: false,
        }
    }

    pub fn job_ref(&self) -> JobRef {
        JobRef {
            id: self.id,
            subjob: self.subjob_index,
        }
    }

    pub fn subjob(&self, index: usize) -> Option<&Job> {
        self.subjobs.get(index)
    }

    /// Resolves `r` against this master job.
    pub fn get(&self, r: JobRef) -> Option<&Job> {
        if r.id != self.id {
            return None;
        }
        match r.subjob {
            None => Some(self),
            Some(i) => self.subjobs.get(i),
        }
    }

    pub fn get_mut(&mut self, r: JobRef) -> Option<&mut Job> {
        if r.id != self.id {
            return None;
        }
        match r.subjob {
            None => Some(self),
            Some(i) => self.subjobs.get_mut(i),
        }
    }

    /// Fails unless the job may still be edited.
    pub fn ensure_mutable(&self) -> Result<()> {
        if self.read_only {
            return Err(Error::ReadOnly(self.job_ref().to_string()));
        }
        if self.status != JobStatus::New {
            return Err(Error::JobImmutable(self.job_ref().to_string()));
        }
        Ok(())
    }

    /// Applies `event` through the state machine.
    pub fn apply_event(&mut self, event: JobEvent) -> Result<JobStatus> {
        let to = transition(self.status, event)?;
        self.status = to;
        Ok(to)
    }

    /// Deep copy reset to a fresh, unsubmitted job with id `id`.
    pub fn fresh_copy(&self, id: u64) -> Job {
        let mut copy = self.clone();
        copy.id = id;
        copy.subjob_index = None;
        copy.status = JobStatus::New;
        copy.backend_handle = None;
        copy.subjobs.clear();
        copy.submitted_at = None;
        copy.finished_at = None;
        copy.read_only = false;
        copy
    }

    /// Number of subjobs per status, master excluded.
    pub fn subjob_summary(&self) -> BTreeMap<JobStatus, usize> {
        let mut out = BTreeMap::new();
        for sj in &self.subjobs {
            *out.entry(sj.status).or_insert(0) += 1;
        }
        out
    }
}

/// Partial job fields, used for creation options, copy overrides and edits.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobPatch {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub application: Option<Component>,
    #[serde(default)]
    pub backend: Option<Component>,
    #[serde(default, with = "double_option")]
    pub inputdata: Option<Option<Component>>,
    #[serde(default, with = "double_option")]
    pub outputdata: Option<Option<Component>>,
    #[serde(default)]
    pub input_sandbox: Option<Vec<PathBuf>>,
    #[serde(default)]
    pub output_sandbox: Option<Vec<String>>,
    #[serde(default, with = "double_option")]
    pub splitter: Option<Option<Component>>,
    #[serde(default, with = "double_option")]
    pub merger: Option<Option<Component>>,
}

impl JobPatch {
    pub fn name(name: impl Into<String>) -> Self {
        JobPatch {
            name: Some(name.into()),
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        *self == JobPatch::default()
    }

    pub fn apply(&self, job: &mut Job) {
        if let Some(n) = &self.name {
            job.name = n.clone();
        }
        if let Some(a) = &self.application {
            job.application = a.clone();
        }
        if let Some(b) = &self.backend {
            job.backend = b.clone();
        }
        if let Some(d) = &self.inputdata {
            job.inputdata = d.clone();
        }
        if let Some(d) = &self.outputdata {
            job.outputdata = d.clone();
        }
        if let Some(s) = &self.input_sandbox {
            job.input_sandbox = s.clone();
        }
        if let Some(s) = &self.output_sandbox {
            job.output_sandbox = s.clone();
        }
        if let Some(s) = &self.splitter {
            job.splitter = s.clone();
        }
        if let Some(m) = &self.merger {
            job.merger = m.clone();
        }
    }

    /// Every component the patch sets, for validation.
    pub fn components(&self) -> impl Iterator<Item = &Component> {
        [
            self.application.as_ref(),
            self.backend.as_ref(),
            self.inputdata.as_ref().and_then(Option::as_ref),
            self.outputdata.as_ref().and_then(Option::as_ref),
            self.splitter.as_ref().and_then(Option::as_ref),
            self.merger.as_ref().and_then(Option::as_ref),
        ]
        .into_iter()
        .flatten()
    }
}

/// `null` clears an optional component, absence leaves it untouched.
mod double_option {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<T: Serialize, S: Serializer>(v: &Option<Option<T>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(inner) => inner.serialize(s),
        }
    }

    pub fn deserialize<'de, T: Deserialize<'de>, D: Deserializer<'de>>(d: D) -> Result<Option<Option<T>>, D::Error> {
        Option::<T>::deserialize(d).map(Some)
    }
}

/// A saved job configuration that can be instantiated repeatedly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTemplate {
    pub template_id: u64,
    pub name: String,
    pub payload: Job,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_ref_parse_and_display() {
        assert_eq!("3".parse::<JobRef>().unwrap(), JobRef::master(3));
        assert_eq!("3.7".parse::<JobRef>().unwrap(), JobRef::sub(3, 7));
        assert_eq!(JobRef::sub(3, 7).to_string(), "3.7");
        assert!("x".parse::<JobRef>().is_err());
    }

    #[test]
    fn submitted_job_to_completed_and_no_further() {
        let mut s = JobStatus::New;
        for e in [JobEvent::SubmitRequested, JobEvent::BackendAccepted, JobEvent::BackendRunning, JobEvent::BackendDoneOk] {
            s = transition(s, e).unwrap();
        }
        assert_eq!(s, JobStatus::Completed);
        assert!(matches!(
            transition(s, JobEvent::KillRequested),
            Err(Error::IllegalTransition { .. })
        ));
    }

    #[test]
    fn master_status_examples() {
        use JobStatus::*;
        assert_eq!(derive_master_status(&[Completed, Completed]).unwrap(), Completed);
        assert_eq!(derive_master_status(&[Completed, Failed]).unwrap(), Failed);
        assert_eq!(derive_master_status(&[Running, Failed]).unwrap(), Running);
        assert!(matches!(derive_master_status(&[]), Err(Error::EmptySubjobs)));
    }
}
