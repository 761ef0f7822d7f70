//! Schemas and registrations for the plugins that ship with the crate.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use super::{
    AttributeDescriptor as Attr, Category, Executable, FileListDataset, NullDataset,
    PluginBehavior, PluginRegistry, PluginSchema, SubmissionHandler,
};
use crate::backends::BackendSet;
use crate::error::Result;
use crate::tasks::{ArgSplitter, FileDatasetSplitter, TableSumMerger, TextMerger};
use crate::value::{Shortcut, Value, ValueType};

pub const EXECUTABLE: &str = "Executable";
pub const LOCAL: &str = "Local";
pub const BATCH_SIM: &str = "BatchSim";
pub const REMOTE_SHELL: &str = "RemoteShell";
pub const MOCK_GRID: &str = "MockGrid";
pub const NULL_DATASET: &str = "NullDataset";
pub const FILE_LIST_DATASET: &str = "FileListDataset";
pub const ARG_SPLITTER: &str = "ArgSplitter";
pub const FILE_DATASET_SPLITTER: &str = "FileDatasetSplitter";
pub const TEXT_MERGER: &str = "TextMerger";
pub const TABLE_SUM_MERGER: &str = "TableSumMerger";

fn s(v: &str) -> Value {
    Value::Str(v.to_string())
}

fn list(items: &[&str]) -> Value {
    Value::StrList(items.iter().map(|s| s.to_string()).collect())
}

pub fn executable_schema() -> PluginSchema {
    PluginSchema::new(EXECUTABLE, Category::Application, 2)
        .doc("Runs an executable binary or script.")
        .attr(
            Attr::rw("exe", ValueType::Path, Value::Path(PathBuf::new()), "path to an executable binary or script")
                .with_shortcut(Shortcut::StringToPath),
        )
        .attr(
            Attr::rw("args", ValueType::StringList, list(&[]), "arguments passed to the executable")
                .with_shortcut(Shortcut::ScalarToList),
        )
        .attr(Attr::rw(
            "env",
            ValueType::StringMap,
            Value::StrMap(BTreeMap::new()),
            "environment variables set before the executable runs",
        ))
}

/// Version 1 of `Executable` called the argument list `arguments`, had a
/// `shell` attribute and no `env`.
pub fn executable_schema_v1() -> PluginSchema {
    PluginSchema::new(EXECUTABLE, Category::Application, 1)
        .attr(Attr::rw("exe", ValueType::Path, Value::Path(PathBuf::new()), "executable"))
        .attr(Attr::rw("arguments", ValueType::StringList, list(&[]), "arguments"))
        .attr(Attr::rw("shell", ValueType::String, s("/bin/sh"), "shell"))
}

fn backend_info(schema: PluginSchema) -> PluginSchema {
    schema
        .attr(Attr::ro("id", ValueType::String, s(""), "job identifier assigned by the backend"))
        .attr(Attr::ro("status", ValueType::String, s(""), "status as reported by the backend"))
}

fn submit_count(schema: PluginSchema) -> PluginSchema {
    schema.attr(Attr::internal(
        "submit_count",
        ValueType::Integer,
        Value::Int(0),
        "number of times the job was handed to the backend",
    ))
}

pub fn local_schema() -> PluginSchema {
    let schema = backend_info(PluginSchema::new(LOCAL, Category::Backend, 1).doc("Runs jobs as local processes."))
        .attr(Attr::ro("actualhost", ValueType::String, s(""), "host the job ran on"));
    submit_count(schema)
}

pub fn batch_sim_schema() -> PluginSchema {
    let schema = PluginSchema::new(BATCH_SIM, Category::Backend, 1)
        .doc("Simulated batch system with named queues.")
        .attr(Attr::rw(
            "queue",
            ValueType::String,
            s(""),
            "name of queue to which job should be submitted; the system default queue if empty",
        ));
    let schema = backend_info(schema).attr(Attr::ro(
        "actualqueue",
        ValueType::String,
        s(""),
        "name of queue to which job has been submitted",
    ));
    submit_count(schema)
}

pub fn remote_shell_schema() -> PluginSchema {
    let schema = PluginSchema::new(REMOTE_SHELL, Category::Backend, 1)
        .doc("Runs jobs on another machine through a launcher command such as ssh.")
        .attr(Attr::rw("host", ValueType::String, s("localhost"), "remote host"));
    let schema = backend_info(schema).attr(Attr::ro("actualhost", ValueType::String, s(""), "host the job ran on"));
    submit_count(schema)
}

pub fn mock_grid_schema() -> PluginSchema {
    let schema = PluginSchema::new(MOCK_GRID, Category::Backend, 1)
        .doc("Offline stand-in for a grid workload management system.")
        .attr(Attr::rw("site", ValueType::String, s(""), "requested site; any site if empty"));
    let schema = backend_info(schema).attr(Attr::ro(
        "actualce",
        ValueType::String,
        s(""),
        "computing element the job was scheduled to",
    ));
    submit_count(schema)
}

pub fn null_dataset_schema() -> PluginSchema {
    PluginSchema::new(NULL_DATASET, Category::Dataset, 1).doc("The empty dataset.")
}

pub fn file_list_dataset_schema() -> PluginSchema {
    PluginSchema::new(FILE_LIST_DATASET, Category::Dataset, 1)
        .doc("An explicit list of externally stored files.")
        .attr(
            Attr::rw("files", ValueType::StringList, list(&[]), "file names or URLs")
                .with_shortcut(Shortcut::ScalarToList),
        )
}

pub fn arg_splitter_schema() -> PluginSchema {
    PluginSchema::new(ARG_SPLITTER, Category::Splitter, 1)
        .doc("One subjob per argument set.")
        .attr(
            Attr::rw(
                "args",
                ValueType::StringTable,
                Value::StrTable(Vec::new()),
                "list of sets of arguments to be passed to the application",
            )
            .with_shortcut(Shortcut::ScalarToList),
        )
}

pub fn file_dataset_splitter_schema() -> PluginSchema {
    PluginSchema::new(FILE_DATASET_SPLITTER, Category::Splitter, 1)
        .doc("Splits a file list dataset into contiguous chunks.")
        .attr(Attr::rw(
            "files_per_subjob",
            ValueType::Integer,
            Value::Int(1),
            "number of dataset files per subjob",
        ))
}

pub fn text_merger_schema() -> PluginSchema {
    PluginSchema::new(TEXT_MERGER, Category::Merger, 1)
        .doc("Concatenates text output of subjobs.")
        .attr(
            Attr::rw("files", ValueType::StringList, list(&["stdout", "stderr"]), "files to concatenate")
                .with_shortcut(Shortcut::ScalarToList),
        )
        .attr(Attr::rw("headers", ValueType::Boolean, Value::Bool(true), "write a header line before each subjob"))
        .attr(Attr::rw(
            "ignorefailed",
            ValueType::Boolean,
            Value::Bool(false),
            "merge completed subjobs even if others failed",
        ))
}

pub fn table_sum_merger_schema() -> PluginSchema {
    PluginSchema::new(TABLE_SUM_MERGER, Category::Merger, 1)
        .doc("Sums whitespace-separated numeric tables element by element.")
        .attr(Attr::rw("file", ValueType::String, s("table.txt"), "name of the table file"))
        .attr(Attr::rw(
            "ignorefailed",
            ValueType::Boolean,
            Value::Bool(false),
            "merge completed subjobs even if others failed",
        ))
}

fn migrate_executable_v1(t: &mut toml::Table) -> Result<()> {
    if let Some(args) = t.remove("arguments") {
        t.insert("args".into(), args);
    }
    Ok(())
}

/// Registers every non-backend built-in plugin and the migration hooks.
pub fn register_standard(reg: &mut PluginRegistry) -> Result<()> {
    reg.register_plugin(executable_schema(), PluginBehavior::Application(Arc::new(Executable)))?;
    reg.register_plugin(null_dataset_schema(), PluginBehavior::Dataset(Arc::new(NullDataset)))?;
    reg.register_plugin(file_list_dataset_schema(), PluginBehavior::Dataset(Arc::new(FileListDataset)))?;
    reg.register_plugin(arg_splitter_schema(), PluginBehavior::Splitter(Arc::new(ArgSplitter)))?;
    reg.register_plugin(
        file_dataset_splitter_schema(),
        PluginBehavior::Splitter(Arc::new(FileDatasetSplitter)),
    )?;
    reg.register_plugin(text_merger_schema(), PluginBehavior::Merger(Arc::new(TextMerger)))?;
    reg.register_plugin(table_sum_merger_schema(), PluginBehavior::Merger(Arc::new(TableSumMerger)))?;
    reg.register_migration(EXECUTABLE, 1, Arc::new(migrate_executable_v1));
    Ok(())
}

/// The full built-in registry over the given backend instances.
pub fn builtin_registry(backends: &BackendSet) -> Result<PluginRegistry> {
    let mut reg = PluginRegistry::new();
    register_standard(&mut reg)?;
    reg.register_plugin(local_schema(), PluginBehavior::Backend(backends.local.clone()))?;
    reg.register_plugin(batch_sim_schema(), PluginBehavior::Backend(backends.batch_sim.clone()))?;
    reg.register_plugin(remote_shell_schema(), PluginBehavior::Backend(backends.remote_shell.clone()))?;
    reg.register_plugin(mock_grid_schema(), PluginBehavior::Backend(backends.mock_grid.clone()))?;
    for backend in [LOCAL, BATCH_SIM, REMOTE_SHELL, MOCK_GRID] {
        reg.register_handler(SubmissionHandler::wrapped(EXECUTABLE, backend))?;
    }
    Ok(reg)
}
