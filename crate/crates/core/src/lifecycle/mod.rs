//! Monitoring: backend polling, credential tracking and the event bus.

mod credential;
mod events;
mod monitor;
mod spool;

pub use credential::{
    CredentialConfig, CredentialManager, CredentialState, CredentialStatus, GatedOp, MockCredential,
};
pub use events::{
    CollectingSink, EventBus, EventKind, EventSink, FileSink, MonitorEvent, SensorId, MIN_RETENTION,
};
pub use monitor::{start_monitor, MonitorConfig, MonitorControl, MonitorHost, PollOutcome, PollTrace};
pub use spool::{parse_spool_line, SpoolLine, SpoolReader};
