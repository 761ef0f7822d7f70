use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::job::{Job, JobStatus};

use super::record::RecordMetadata;

/// Conjunction of optional predicates over job metadata.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<JobStatus>,
    /// Exact name, or a glob pattern when it contains `*`, `?` or `[`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub application: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    /// Inclusive bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_range: Option<(u64, u64)>,
}

/// A [`JobFilter`] checked and ready to apply.
#[derive(Debug, Clone)]
pub struct CompiledFilter {
    filter: JobFilter,
    name: Option<glob::Pattern>,
}

fn is_glob(s: &str) -> bool {
    s.contains(['*', '?', '['])
}

/// Parses `lo-hi` or a single id.
pub fn parse_id_range(s: &str) -> Result<(u64, u64)> {
    let bad = || Error::InvalidFilter(format!("bad id range `{s}`"));
    let (lo, hi) = match s.split_once('-') {
        Some((lo, hi)) => (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?),
        None => {
            let v = s.trim().parse().map_err(|_| bad())?;
            (v, v)
        }
    };
    if lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

impl JobFilter {
    pub fn status(status: JobStatus) -> Self {
        JobFilter {
            status: Some(status),
            ..Default::default()
        }
    }

    pub fn name(name: &str) -> Self {
        JobFilter {
            name: Some(name.to_string()),
            ..Default::default()
        }
    }

    pub fn compile(&self) -> Result<CompiledFilter> {
        if let Some((lo, hi)) = self.id_range {
            if lo > hi {
                return Err(Error::InvalidFilter(format!("empty id range {lo}-{hi}")));
            }
        }
        let name = match &self.name {
            Some(n) if is_glob(n) => Some(
                glob::Pattern::new(n).map_err(|e| Error::InvalidFilter(format!("name pattern `{n}`: {e}")))?,
            ),
            _ => None,
        };
        Ok(CompiledFilter {
            filter: self.clone(),
            name,
        })
    }
}

impl CompiledFilter {
    pub fn matches(&self, id: u64, meta: &RecordMetadata) -> bool {
        let f = &self.filter;
        f.status.is_none_or(|s| s == meta.status)
            && f.application.as_ref().is_none_or(|a| *a == meta.application_type)
            && f.backend.as_ref().is_none_or(|b| *b == meta.backend_type)
            && f.id_range.is_none_or(|(lo, hi)| (lo..=hi).contains(&id))
            && match (&self.name, &f.name) {
                (Some(p), _) => p.matches(&meta.name),
                (None, Some(n)) => *n == meta.name,
                (None, None) => true,
            }
    }

    pub fn matches_job(&self, job: &Job) -> bool {
        self.matches(job.id, &RecordMetadata::of(job))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_ranges() {
        assert_eq!(parse_id_range("3-7").unwrap(), (3, 7));
        assert_eq!(parse_id_range("4").unwrap(), (4, 4));
        assert!(parse_id_range("7-3").is_err());
        assert!(parse_id_range("x").is_err());
    }

    #[test]
    fn bad_glob_is_invalid_filter() {
        assert!(matches!(JobFilter::name("[a").compile(), Err(Error::InvalidFilter(_))));
    }
}
