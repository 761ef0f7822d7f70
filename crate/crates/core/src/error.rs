use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::job::{JobEvent, JobStatus};
use crate::value::ValueType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown plugin {category}/{name}")]
    UnknownPlugin { category: String, name: String },
    #[error("plugin {0} is already registered")]
    DuplicatePlugin(String),
    #[error("malformed schema for {plugin}: {reason}")]
    MalformedSchema { plugin: String, reason: String },
    #[error("invalid plugin category `{0}`")]
    InvalidCategory(String),
    #[error("plugin {plugin} has no attribute `{attribute}`")]
    UnknownAttribute { plugin: String, attribute: String },
    #[error("attribute `{0}` is not visible")]
    AttributeNotVisible(String),
    #[error("attribute `{0}` is read-only")]
    AttributeReadOnly(String),
    #[error("attribute `{attribute}` expects a value of type {expected}")]
    TypeMismatch {
        attribute: String,
        expected: ValueType,
    },
    #[error("configuration error: {0}")]
    ConfigError(String),
    #[error("no submission handler for application {application} on backend {backend}")]
    NoHandler {
        application: String,
        backend: String,
    },

    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("illegal transition from {from} on {event}")]
    IllegalTransition { from: JobStatus, event: JobEvent },
    #[error("job {0} has been submitted and can no longer be modified")]
    JobImmutable(String),
    #[error("job {0} was loaded read-only")]
    ReadOnly(String),
    #[error("subjob status list is empty")]
    EmptySubjobs,

    #[error("submission failed: {0}")]
    SubmitFailed(String),
    #[error("unknown queue `{0}`")]
    QueueUnknown(String),
    #[error("transport error: {0}")]
    TransportError(String),
    #[error("job {0} already finished at the backend")]
    AlreadyFinished(String),
    #[error("unknown backend handle {0}")]
    UnknownHandle(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("output files missing: {}", .0.join(", "))]
    OutputMissing(Vec<String>),
    #[error("workspace directory {} is missing", .0.display())]
    WorkspaceMissing(PathBuf),

    #[error("storage error: {0}")]
    StorageError(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("unknown template {0}")]
    UnknownTemplate(u64),
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("jobtree path {0} already exists")]
    PathExists(String),
    #[error("jobtree path {0} does not exist")]
    PathMissing(String),
    #[error("jobtree path {0} is not empty")]
    NotEmpty(String),
    #[error("no migration from version {from} of plugin {plugin}")]
    MigrationGap { plugin: String, from: u32 },
    #[error("file {} does not exist", .0.display())]
    FileMissing(PathBuf),
    #[error("file {0} is not available for this job")]
    PeekUnavailable(String),
    #[error("repository {} is locked by another session", .0.display())]
    LockHeld(PathBuf),

    #[error("monitor is already running")]
    AlreadyRunning,
    #[error("operation refused: {0}")]
    Gate(String),

    #[error("splitter does not apply: {0}")]
    SplitterMismatch(String),
    #[error("splitter produced no subjobs")]
    EmptySplit,
    #[error("cannot merge: {0}")]
    MergeIncomplete(String),
    #[error("table shapes differ: {0}")]
    ShapeMismatch(String),
    #[error("robot action {action} failed: {reason}")]
    ActionFailed { action: String, reason: String },
}

impl Error {
    /// Stable identifier of the error kind, used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            Error::UnknownPlugin { .. } => "UnknownPlugin",
            Error::DuplicatePlugin(_) => "DuplicatePlugin",
            Error::MalformedSchema { .. } => "MalformedSchema",
            Error::InvalidCategory(_) => "InvalidCategory",
            Error::UnknownAttribute { .. } => "UnknownAttribute",
            Error::AttributeNotVisible(_) => "AttributeNotVisible",
            Error::AttributeReadOnly(_) => "AttributeReadOnly",
            Error::TypeMismatch { .. } => "TypeMismatch",
            Error::ConfigError(_) => "ConfigError",
            Error::NoHandler { .. } => "NoHandler",
            Error::UnknownJob(_) => "UnknownJob",
            Error::IllegalTransition { .. } => "IllegalTransition",
            Error::JobImmutable(_) => "JobImmutable",
            Error::ReadOnly(_) => "ReadOnly",
            Error::EmptySubjobs => "EmptySubjobs",
            Error::SubmitFailed(_) => "SubmitFailed",
            Error::QueueUnknown(_) => "QueueUnknown",
            Error::TransportError(_) => "TransportError",
            Error::AlreadyFinished(_) => "AlreadyFinished",
            Error::UnknownHandle(_) => "UnknownHandle",
            Error::BackendUnavailable(_) => "BackendUnavailable",
            Error::OutputMissing(_) => "OutputMissing",
            Error::WorkspaceMissing(_) => "WorkspaceMissing",
            Error::StorageError(_) | Error::Io(_) => "StorageError",
            Error::UnknownTemplate(_) => "UnknownTemplate",
            Error::InvalidFilter(_) => "InvalidFilter",
            Error::PathExists(_) => "PathExists",
            Error::PathMissing(_) => "PathMissing",
            Error::NotEmpty(_) => "NotEmpty",
            Error::MigrationGap { .. } => "MigrationGap",
            Error::FileMissing(_) => "FileMissing",
            Error::PeekUnavailable(_) => "PeekUnavailable",
            Error::LockHeld(_) => "LockHeld",
            Error::AlreadyRunning => "AlreadyRunning",
            Error::Gate(_) => "GateError",
            Error::SplitterMismatch(_) => "SplitterMismatch",
            Error::EmptySplit => "EmptySplit",
            Error::MergeIncomplete(_) => "MergeIncomplete",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::ActionFailed { .. } => "ActionFailed",
        }
    }

    pub(crate) fn storage(err: impl std::fmt::Display) -> Self {
        Error::StorageError(err.to_string())
    }
}
