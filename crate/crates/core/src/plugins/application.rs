use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::schema::Component;
use crate::error::{Error, Result};
use crate::job::Job;

/// The application after its configuration step: everything a backend needs
/// to run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfiguredApplication {
    pub command_line: Vec<String>,
    pub environment: BTreeMap<String, String>,
    pub staged_files: Vec<PathBuf>,
    pub expected_outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationResult {
    Ok,
    Invalid(String),
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        *self == ValidationResult::Ok
    }
}

pub trait Application: Send + Sync {
    /// Integrity checks and derivation of the command to run. Must not
    /// modify the job.
    fn configure(&self, app: &Component, job: &Job) -> Result<ConfiguredApplication>;

    /// Judges the retrieved output. Never fails; problems are reported as
    /// [`ValidationResult::Invalid`].
    fn postprocess(&self, app: &Component, job: &Job, output_dir: &Path) -> ValidationResult;
}

/// Environment variable listing the dataset files assigned to a job.
pub const INPUT_FILES_ENV: &str = "JOBFRONT_INPUT_FILES";

/// Runs an arbitrary executable with arguments and environment.
#[derive(Debug, Default)]
pub struct Executable;

impl Application for Executable {
    fn configure(&self, app: &Component, job: &Job) -> Result<ConfiguredApplication> {
        let exe = app.str_attr("exe").unwrap_or_default();
        if exe.is_empty() {
            return Err(Error::ConfigError("exe not set".into()));
        }
        let mut command_line = vec![exe.to_string()];
        command_line.extend(app.list_attr("args").iter().cloned());
        let mut environment = app
            .get("env")
            .and_then(|v| v.as_map())
            .cloned()
            .unwrap_or_default();
        if let Some(ds) = &job.inputdata {
            let files = ds.list_attr("files");
            if !files.is_empty() {
                environment.insert(INPUT_FILES_ENV.to_string(), files.join(" "));
            }
        }
        Ok(ConfiguredApplication {
            command_line,
            environment,
            staged_files: job.input_sandbox.clone(),
            expected_outputs: job.output_sandbox.clone(),
        })
    }

    fn postprocess(&self, _app: &Component, job: &Job, output_dir: &Path) -> ValidationResult {
        match read_exit_code(output_dir) {
            Some(0) => {}
            Some(code) => return ValidationResult::Invalid(format!("exit code {code}")),
            None => return ValidationResult::Invalid("exit code not recorded".into()),
        }
        for pattern in &job.output_sandbox {
            if matching_files(output_dir, pattern).is_empty() {
                return ValidationResult::Invalid(format!("missing output {pattern}"));
            }
        }
        ValidationResult::Ok
    }
}

/// Reads the `__exitcode__` file the job wrapper leaves behind.
pub fn read_exit_code(dir: &Path) -> Option<i32> {
    fs::read_to_string(dir.join(crate::backends::wrapper::EXIT_CODE_FILE))
        .ok()
        .and_then(|s| s.trim().parse().ok())
}

/// Regular files directly inside `dir` whose name matches `pattern`.
pub fn matching_files(dir: &Path, pattern: &str) -> Vec<PathBuf> {
    let Ok(pat) = glob::Pattern::new(pattern) else {
        return Vec::new();
    };
    let Ok(entries) = fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .filter(|e| pat.matches(&e.file_name().to_string_lossy()))
        .map(|e| e.path())
        .collect();
    out.sort();
    out
}

/// Dataset components describe external data referenced by a job.
pub trait Dataset: Send + Sync {
    fn files(&self, dataset: &Component) -> Vec<String>;
}

#[derive(Debug, Default)]
pub struct NullDataset;

impl Dataset for NullDataset {
    fn files(&self, _dataset: &Component) -> Vec<String> {
        Vec::new()
    }
}

#[derive(Debug, Default)]
pub struct FileListDataset;

impl Dataset for FileListDataset {
    fn files(&self, dataset: &Component) -> Vec<String> {
        dataset.list_attr("files").to_vec()
    }
}
