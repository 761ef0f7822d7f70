//! Define a computational job once and run it on any registered backend.
//!
//! A [`Job`] is a composition of plugin components (application, backend,
//! datasets, splitter, merger). The [`Session`] owns the job repository and
//! is the single path through which jobs are created, submitted, monitored
//! and removed. Backends range from a local process executor to a simulated
//! batch queue and a mock grid with bulk submission and fault injection.

pub mod backends;
pub mod clock;
pub mod error;
pub mod external;
pub mod job;
pub mod lifecycle;
pub mod persistence;
pub mod plugins;
pub mod session;
pub mod tasks;
pub mod value;

pub use clock::{Clock, FakeClock, SystemClock};
pub use error::{Error, Result};
pub use job::{
    derive_master_status, transition, BackendHandle, Job, JobEvent, JobPatch, JobRef, JobStatus,
    JobTemplate,
};
pub use plugins::{Category, Component, PluginRegistry, PluginSchema};
pub use session::{Session, SessionConfig};
pub use value::{Value, ValueType};
