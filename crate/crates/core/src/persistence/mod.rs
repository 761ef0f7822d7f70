//! Job repository and job workspace.

mod jobtree;
mod lock;
mod migration;
mod record;
mod repository;
mod select;
mod workspace;

pub use jobtree::{normalize_path, JobTree, JobTreeNode};
pub use lock::{SessionLock, LOCK_FILE};
pub use migration::{migrate_record, needs_migration};
pub use record::{normalize_job, JobRecord, RecordMetadata, COMPONENT_SLOTS, RECORD_FORMAT};
pub use repository::{write_atomic, LoadReport, Repository};
pub use select::{parse_id_range, CompiledFilter, JobFilter};
pub use workspace::{tail_file, SandboxSizeWarning, Workspace, DEFAULT_SANDBOX_WARN_BYTES};
