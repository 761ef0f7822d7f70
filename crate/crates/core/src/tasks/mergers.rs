use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::job::JobStatus;
use crate::plugins::Component;

/// Appended to the name of a concatenated file.
pub const MERGED_SUFFIX: &str = ".merged";

/// Where one subjob's retrieved output lives.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjobOutput {
    pub index: usize,
    pub status: JobStatus,
    pub output_dir: PathBuf,
}

/// Combines subjob outputs into the master's output directory. Subjob
/// outputs are left untouched.
pub trait Merger: Send + Sync {
    /// `outputs` is in subjob-index order. Returns the files written.
    fn merge(&self, merger: &Component, outputs: &[SubjobOutput], dest: &Path) -> Result<Vec<PathBuf>>;
}

/// The subjobs to merge: all of them when every one completed, only the
/// completed ones when `ignorefailed` is set.
fn mergeable<'a>(merger: &Component, outputs: &'a [SubjobOutput]) -> Result<Vec<&'a SubjobOutput>> {
    let bad: Vec<String> = outputs
        .iter()
        .filter(|o| o.status != JobStatus::Completed)
        .map(|o| format!("subjob {} is {}", o.index, o.status))
        .collect();
    if !bad.is_empty() && !merger.bool_attr("ignorefailed").unwrap_or(false) {
        return Err(Error::MergeIncomplete(bad.join(", ")));
    }
    let ok: Vec<&SubjobOutput> = outputs.iter().filter(|o| o.status == JobStatus::Completed).collect();
    if ok.is_empty() {
        return Err(Error::MergeIncomplete("no completed subjobs".into()));
    }
    Ok(ok)
}

/// Concatenates text files across subjobs into `<name>.merged`, optionally
/// preceding each subjob's part with a `==> subjob <i> <==` line.
#[derive(Debug, Default)]
pub struct TextMerger;

impl Merger for TextMerger {
    fn merge(&self, merger: &Component, outputs: &[SubjobOutput], dest: &Path) -> Result<Vec<PathBuf>> {
        let parts = mergeable(merger, outputs)?;
        let headers = merger.bool_attr("headers").unwrap_or(true);
        let files = match merger.list_attr("files") {
            [] => vec!["stdout".to_string(), "stderr".to_string()],
            f => f.to_vec(),
        };
        fs::create_dir_all(dest)?;
        let mut written = Vec::new();
        for name in files {
            let mut merged = Vec::new();
            for o in &parts {
                if headers {
                    merged.extend_from_slice(format!("==> subjob {} <==\n", o.index).as_bytes());
                }
                // A subjob that produced nothing contributes nothing.
                if let Ok(bytes) = fs::read(o.output_dir.join(&name)) {
                    merged.extend_from_slice(&bytes);
                }
            }
            let path = dest.join(format!("{name}{MERGED_SUFFIX}"));
            fs::write(&path, merged)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// A rectangular numeric table.
pub type Table = Vec<Vec<f64>>;

/// Parses whitespace-separated numbers, one row per non-blank line.
pub fn parse_table(text: &str) -> Result<Table> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(row, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|_| Error::ShapeMismatch(format!("row {}: `{tok}` is not a number", row + 1)))
                })
                .collect()
        })
        .collect()
}

pub fn format_table(table: &Table) -> String {
    let mut out = String::new();
    for row in table {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", cells.join(" "));
    }
    out
}

fn shape(t: &Table) -> Vec<usize> {
    t.iter().map(Vec::len).collect()
}

/// Element-wise sum. Every table must have the shape of the first.
pub fn sum_tables(tables: &[Table]) -> Result<Table> {
    let Some(first) = tables.first() else {
        return Ok(Vec::new());
    };
    let mut acc = first.clone();
    for (i, t) in tables.iter().enumerate().skip(1) {
        if shape(t) != shape(&acc) {
            return Err(Error::ShapeMismatch(format!(
                "table {i} has row lengths {:?}, expected {:?}",
                shape(t),
                shape(&acc)
            )));
        }
        for (ra, rb) in acc.iter_mut().zip(t) {
            for (a, b) in ra.iter_mut().zip(rb) {
                *a += b;
            }
        }
    }
    Ok(acc)
}

/// Sums a numeric table file across subjobs; the result has the same name
/// in the master's output directory.
#[derive(Debug, Default)]
pub struct TableSumMerger;

impl Merger for TableSumMerger {
    fn merge(&self, merger: &Component, outputs: &[SubjobOutput], dest: &Path) -> Result<Vec<PathBuf>> {
        let parts = mergeable(merger, outputs)?;
        let name = merger.str_attr("file").unwrap_or("table.txt");
        let mut tables = Vec::with_capacity(parts.len());
        for o in parts {
            let path = o.output_dir.join(name);
            let text = fs::read_to_string(&path).map_err(|_| Error::FileMissing(path.clone()))?;
            tables.push(parse_table(&text)?);
        }
        let sum = sum_tables(&tables)?;
        fs::create_dir_all(dest)?;
        let path = dest.join(name);
        fs::write(&path, format_table(&sum))?;
        Ok(vec![path])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_elementwise() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let b = vec![vec![10.0, 20.0], vec![30.0, 40.0]];
        assert_eq!(sum_tables(&[a, b]).unwrap(), vec![vec![11.0, 22.0], vec![33.0, 44.0]]);
    }

    #[test]
    fn shape_mismatch() {
        let a = vec![vec![1.0, 2.0]];
        let b = vec![vec![1.0]];
        assert!(matches!(sum_tables(&[a, b]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn table_text_round_trip() {
        let t = parse_table("1 2\n 3   4.5\n\n").unwrap();
        assert_eq!(t, vec![vec![1.0, 2.0], vec![3.0, 4.5]]);
        assert_eq!(format_table(&t), "1 2\n3 4.5\n");
    }

    #[test]
    fn strict_merge_refuses_failed_subjob() {
        let outputs = [
            SubjobOutput {
                index: 0,
                status: JobStatus::Completed,
                output_dir: PathBuf::from("/nonexistent"),
            },
            SubjobOutput {
                index: 1,
                status: JobStatus::Failed,
                output_dir: PathBuf::from("/nonexistent"),
            },
        ];
        let m = Component::new("TextMerger");
        let dir = std::env::temp_dir();
        assert!(matches!(TextMerger.merge(&m, &outputs, &dir), Err(Error::MergeIncomplete(_))));
    }
}
