use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use super::application::ConfiguredApplication;
use super::schema::Component;
use crate::backends::wrapper::{generate_wrapper, SensorConfig};
use crate::backends::BackendJobDescription;
use crate::error::Result;
use crate::value::Value;

/// Where and for whom a submission handler is translating.
#[derive(Debug, Clone)]
pub struct HandlerContext {
    /// `<id>` or `<id>.<subjob>`, used in wrapper events.
    pub job_label: String,
    pub input_dir: PathBuf,
    /// Directory the wrapper will run in.
    pub workdir: PathBuf,
    pub sensor: SensorConfig,
}

pub type TranslateFn =
    dyn Fn(&ConfiguredApplication, &Component, &HandlerContext) -> Result<BackendJobDescription> + Send + Sync;

/// Connects one application type to one backend type.
pub struct SubmissionHandler {
    pub application_type: String,
    pub backend_type: String,
    translate: Box<TranslateFn>,
}

impl SubmissionHandler {
    pub fn new<F>(application_type: &str, backend_type: &str, translate: F) -> Self
    where
        F: Fn(&ConfiguredApplication, &Component, &HandlerContext) -> Result<BackendJobDescription>
            + Send
            + Sync
            + 'static,
    {
        SubmissionHandler {
            application_type: application_type.to_string(),
            backend_type: backend_type.to_string(),
            translate: Box::new(translate),
        }
    }

    /// Handler that runs the application through the generic job wrapper.
    pub fn wrapped(application_type: &str, backend_type: &str) -> Self {
        Self::new(application_type, backend_type, wrapper_translate)
    }

    pub fn translate(
        &self,
        configured: &ConfiguredApplication,
        backend: &Component,
        ctx: &HandlerContext,
    ) -> Result<BackendJobDescription> {
        (self.translate)(configured, backend, ctx)
    }
}

impl fmt::Debug for SubmissionHandler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SubmissionHandler")
            .field("application_type", &self.application_type)
            .field("backend_type", &self.backend_type)
            .finish_non_exhaustive()
    }
}

/// Writes the job wrapper and describes it. Non-empty string attributes of
/// the backend (queue, host, ...) become resource hints.
pub fn wrapper_translate(
    configured: &ConfiguredApplication,
    backend: &Component,
    ctx: &HandlerContext,
) -> Result<BackendJobDescription> {
    let input_files: Vec<PathBuf> = configured
        .staged_files
        .iter()
        .filter_map(|p| p.file_name().map(|n| ctx.input_dir.join(n)))
        .collect();
    let wrapper_path = generate_wrapper(configured, &input_files, &ctx.job_label, &ctx.sensor, &ctx.input_dir)?;
    let resource_hints: BTreeMap<String, String> = backend
        .attrs
        .iter()
        .filter_map(|(k, v)| match v {
            Value::Str(s) if !s.is_empty() && !matches!(k.as_str(), "id" | "status") => {
                Some((k.clone(), s.clone()))
            }
            _ => None,
        })
        .collect();
    Ok(BackendJobDescription {
        wrapper_path,
        workdir: ctx.workdir.clone(),
        input_files,
        output_patterns: configured.expected_outputs.clone(),
        resource_hints,
    })
}
