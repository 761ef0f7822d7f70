use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::job::{Job, JobStatus};
use crate::plugins::{Category, PluginRegistry};

/// Version of the record layout itself, independent of plugin schemas.
pub const RECORD_FORMAT: u32 = 1;

/// Component slots of a job and the plugin category each holds.
pub const COMPONENT_SLOTS: [(&str, Category); 6] = [
    ("application", Category::Application),
    ("backend", Category::Backend),
    ("inputdata", Category::Dataset),
    ("outputdata", Category::Dataset),
    ("splitter", Category::Splitter),
    ("merger", Category::Merger),
];

/// Summary fields duplicated from the payload for selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMetadata {
    pub name: String,
    pub application_type: String,
    pub backend_type: String,
    pub status: JobStatus,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submitted_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
}

impl RecordMetadata {
    pub fn of(job: &Job) -> Self {
        RecordMetadata {
            name: job.name.clone(),
            application_type: job.application.plugin.clone(),
            backend_type: job.backend.plugin.clone(),
            status: job.status,
            created_at: job.created_at,
            submitted_at: job.submitted_at,
            finished_at: job.finished_at,
        }
    }
}

/// The persisted form of a job.
///
/// On disk this is a TOML document:
///
/// ```toml
/// format = 1
/// job_id = 3
///
/// [schema_versions]
/// Executable = 2
/// Local = 1
///
/// [metadata]
/// name = "analysis"
/// application_type = "Executable"
/// backend_type = "Local"
/// status = "completed"
/// created_at = "2024-05-01T10:00:00Z"
///
/// [payload]
/// id = 3
/// name = "analysis"
/// status = "completed"
/// created_at = "2024-05-01T10:00:00Z"
/// input_sandbox = []
/// output_sandbox = []
///
/// [payload.application]
/// type = "Executable"
/// exe = "/bin/echo"
/// args = ["hi"]
///
/// [payload.application.env]
///
/// [payload.backend]
/// type = "Local"
/// id = "4242"
/// ```
///
/// Every component table carries its plugin name under `type` followed by
/// all schema attributes, internal ones included. Subjobs are stored as
/// `[[payload.subjobs]]` with the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub format: u32,
    pub job_id: u64,
    pub schema_versions: BTreeMap<String, u32>,
    pub metadata: RecordMetadata,
    pub payload: toml::Table,
}

fn collect_versions(job: &Job, registry: &PluginRegistry, out: &mut BTreeMap<String, u32>) {
    let comps = [
        (Some(&job.application), Category::Application),
        (Some(&job.backend), Category::Backend),
        (job.inputdata.as_ref(), Category::Dataset),
        (job.outputdata.as_ref(), Category::Dataset),
        (job.splitter.as_ref(), Category::Splitter),
        (job.merger.as_ref(), Category::Merger),
    ];
    for (c, cat) in comps {
        if let Some(c) = c {
            if let Ok(s) = registry.schema_of(cat, &c.plugin) {
                out.insert(c.plugin.clone(), s.version);
            }
        }
    }
    for sj in &job.subjobs {
        collect_versions(sj, registry, out);
    }
}

impl JobRecord {
    pub fn from_job(job: &Job, registry: &PluginRegistry) -> Result<Self> {
        let mut schema_versions = BTreeMap::new();
        collect_versions(job, registry, &mut schema_versions);
        Ok(JobRecord {
            format: RECORD_FORMAT,
            job_id: job.id,
            schema_versions,
            metadata: RecordMetadata::of(job),
            payload: toml::Table::try_from(job).map_err(Error::storage)?,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(Error::storage)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let rec: JobRecord = toml::from_str(text).map_err(Error::storage)?;
        if rec.format != RECORD_FORMAT {
            return Err(Error::StorageError(format!("unsupported record format {}", rec.format)));
        }
        Ok(rec)
    }

    /// Deserializes the payload and validates every component against the
    /// registered schemas. Records must already be at current versions.
    pub fn to_job(&self, registry: &PluginRegistry) -> Result<Job> {
        let job: Job = toml::Value::Table(self.payload.clone())
            .try_into()
            .map_err(Error::storage)?;
        normalize_job(job, registry)
    }

    /// Deserializes the payload without schema validation.
    pub fn to_job_unchecked(&self) -> Result<Job> {
        toml::Value::Table(self.payload.clone())
            .try_into()
            .map_err(Error::storage)
    }
}

/// Coerces the components of `job` and its subjobs to their schemas.
pub fn normalize_job(mut job: Job, registry: &PluginRegistry) -> Result<Job> {
    job.application = registry.normalize(Category::Application, job.application, true)?;
    job.backend = registry.normalize(Category::Backend, job.backend, true)?;
    for (slot, cat) in [
        (&mut job.inputdata, Category::Dataset),
        (&mut job.outputdata, Category::Dataset),
        (&mut job.splitter, Category::Splitter),
        (&mut job.merger, Category::Merger),
    ] {
        if let Some(c) = slot.take() {
            *slot = Some(registry.normalize(cat, c, true)?);
        }
    }
    job.subjobs = job
        .subjobs
        .into_iter()
        .map(|sj| normalize_job(sj, registry))
        .collect::<Result<_>>()?;
    Ok(job)
}
