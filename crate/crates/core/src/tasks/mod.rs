//! Fan-out of jobs into subjobs, aggregation of their outputs, and the
//! robot that drives repetitive pipelines.

mod mergers;
pub mod robot;
mod splitters;

pub use mergers::{
    format_table, parse_table, sum_tables, Merger, SubjobOutput, Table, TableSumMerger, TextMerger,
    MERGED_SUFFIX,
};
pub use robot::{
    robot_run_xml, ActionEntry, ActionError, ActionPolicy, ActionSpec, IterationReport, JobSummary, ReportFormat, Robot,
    RobotAction, RobotContext, RobotPipeline, RobotRunReport, TemplateCopies, ROBOT_RUN_XSD,
};
pub use splitters::{chunk, ArgSplitter, FileDatasetSplitter, Splitter};
