use crate::error::{Error, Result};
use crate::job::Job;
use crate::plugins::builtin::FILE_LIST_DATASET;
use crate::plugins::Component;
use crate::value::Value;

/// Turns a master job into subjobs. Subjobs carry the master's id, their
/// index, and no splitter, merger or subjobs of their own.
pub trait Splitter: Send + Sync {
    fn split(&self, splitter: &Component, job: &Job) -> Result<Vec<Job>>;
}

fn subjob(master: &Job, index: usize) -> Job {
    let mut sj = master.fresh_copy(master.id);
    sj.subjob_index = Some(index);
    sj.splitter = None;
    sj.merger = None;
    sj.created_at = master.created_at;
    sj
}

/// One subjob per argument set, each replacing the application's `args`.
#[derive(Debug, Default)]
pub struct ArgSplitter;

impl Splitter for ArgSplitter {
    fn split(&self, splitter: &Component, job: &Job) -> Result<Vec<Job>> {
        let sets = splitter.get("args").and_then(Value::as_table).unwrap_or(&[]);
        if sets.is_empty() {
            return Err(Error::EmptySplit);
        }
        Ok(sets
            .iter()
            .enumerate()
            .map(|(i, args)| {
                let mut sj = subjob(job, i);
                sj.application.set("args", Value::StrList(args.clone()));
                sj
            })
            .collect())
    }
}

/// Contiguous chunks of at most `size` items; the last may be shorter.
pub fn chunk<T: Clone>(items: &[T], size: usize) -> Vec<Vec<T>> {
    items.chunks(size.max(1)).map(<[T]>::to_vec).collect()
}

/// Partitions a `FileListDataset` into chunks of `files_per_subjob` files.
#[derive(Debug, Default)]
pub struct FileDatasetSplitter;

impl Splitter for FileDatasetSplitter {
    fn split(&self, splitter: &Component, job: &Job) -> Result<Vec<Job>> {
        let per = splitter.int_attr("files_per_subjob").unwrap_or(1);
        if per < 1 {
            return Err(Error::ConfigError(format!("files_per_subjob must be at least 1, got {per}")));
        }
        let dataset = match &job.inputdata {
            Some(d) if d.plugin == FILE_LIST_DATASET => d,
            Some(d) => return Err(Error::SplitterMismatch(format!("inputdata is a {}", d.plugin))),
            None => return Err(Error::SplitterMismatch("job has no inputdata".into())),
        };
        let files = dataset.list_attr("files");
        if files.is_empty() {
            return Err(Error::EmptySplit);
        }
        Ok(chunk(files, per as usize)
            .into_iter()
            .enumerate()
            .map(|(i, part)| {
                let mut sj = subjob(job, i);
                let mut ds = dataset.clone();
                ds.set("files", Value::StrList(part));
                sj.inputdata = Some(ds);
                sj
            })
            .collect())
    }
}
