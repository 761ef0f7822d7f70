use std::fs;
use std::io::{self, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::job::{Job, JobRef};

/// Default size above which a sandbox file triggers a warning.
pub const DEFAULT_SANDBOX_WARN_BYTES: u64 = 10 * 1024 * 1024;

/// A sandbox file larger than the configured threshold. Staging proceeds;
/// large data belongs in a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxSizeWarning {
    pub file: PathBuf,
    pub bytes: u64,
    pub threshold: u64,
}

/// Per-job directories under one root:
///
/// ```text
/// <root>/<id>/input     staged sandbox files and the job wrapper
/// <root>/<id>/output    retrieved output
/// <root>/<id>/run       wrapper working directory for host-local backends
/// <root>/<id>/<i>/...   the same for subjob i
/// ```
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
    warn_bytes: u64,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, warn_bytes: u64) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Workspace { root, warn_bytes })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn job_dir(&self, r: JobRef) -> PathBuf {
        let d = self.root.join(r.id.to_string());
        match r.subjob {
            Some(i) => d.join(i.to_string()),
            None => d,
        }
    }

    pub fn input_dir(&self, r: JobRef) -> PathBuf {
        self.job_dir(r).join("input")
    }

    pub fn output_dir(&self, r: JobRef) -> PathBuf {
        self.job_dir(r).join("output")
    }

    pub fn run_dir(&self, r: JobRef) -> PathBuf {
        self.job_dir(r).join("run")
    }

    pub fn allocate(&self, r: JobRef) -> Result<()> {
        fs::create_dir_all(self.input_dir(r))?;
        fs::create_dir_all(self.output_dir(r))?;
        Ok(())
    }

    /// Empties the output and run directories before a resubmission.
    pub fn reset_run(&self, r: JobRef) -> Result<()> {
        for d in [self.output_dir(r), self.run_dir(r)] {
            match fs::remove_dir_all(&d) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
        }
        fs::create_dir_all(self.output_dir(r))?;
        Ok(())
    }

    /// Removes the job's whole tree, subjobs included.
    pub fn remove(&self, id: u64) -> Result<()> {
        match fs::remove_dir_all(self.job_dir(JobRef::master(id))) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    /// Removes subjob directories left by a failed split.
    pub fn remove_subjobs(&self, id: u64, count: usize) {
        for i in 0..count {
            let _ = fs::remove_dir_all(self.job_dir(JobRef::sub(id, i)));
        }
    }

    /// Copies the job's input sandbox into its input directory.
    pub fn stage_input(&self, job: &Job) -> Result<Vec<SandboxSizeWarning>> {
        let dir = self.input_dir(job.job_ref());
        if !dir.is_dir() {
            return Err(Error::WorkspaceMissing(dir));
        }
        let mut warnings = Vec::new();
        for f in &job.input_sandbox {
            let meta = fs::metadata(f).map_err(|_| Error::FileMissing(f.clone()))?;
            if !meta.is_file() {
                return Err(Error::FileMissing(f.clone()));
            }
            if meta.len() > self.warn_bytes {
                log::warn!(
                    "sandbox file {} is {} bytes, above the {} byte threshold; consider a dataset",
                    f.display(),
                    meta.len(),
                    self.warn_bytes
                );
                warnings.push(SandboxSizeWarning {
                    file: f.clone(),
                    bytes: meta.len(),
                    threshold: self.warn_bytes,
                });
            }
            let name = f.file_name().ok_or_else(|| Error::FileMissing(f.clone()))?;
            fs::copy(f, dir.join(name))?;
        }
        Ok(warnings)
    }

    /// Where `file` of a job currently lives: retrieved output first, then
    /// the running job's working directory.
    pub fn locate(&self, r: JobRef, file: &str, run_dir: Option<&Path>) -> Option<PathBuf> {
        if file.contains('/') || file == ".." {
            return None;
        }
        let out = self.output_dir(r).join(file);
        if out.is_file() {
            return Some(out);
        }
        run_dir.map(|d| d.join(file)).filter(|p| p.is_file())
    }

    /// The last `lines` lines of a job file, all of it when `lines` is
    /// `None`.
    pub fn peek(&self, r: JobRef, file: &str, lines: Option<usize>, run_dir: Option<&Path>) -> Result<String> {
        let path = self
            .locate(r, file, run_dir)
            .ok_or_else(|| Error::PeekUnavailable(file.to_string()))?;
        tail_file(&path, lines)
    }
}

/// Reads at most the final `lines` lines of `path`.
pub fn tail_file(path: &Path, lines: Option<usize>) -> Result<String> {
    let Some(n) = lines else {
        return Ok(String::from_utf8_lossy(&fs::read(path)?).into_owned());
    };
    if n == 0 {
        return Ok(String::new());
    }
    let mut f = fs::File::open(path)?;
    let len = f.metadata()?.len();
    // Read backwards in blocks until enough newlines are seen.
    let mut buf: Vec<u8> = Vec::new();
    let mut pos = len;
    const BLOCK: u64 = 8192;
    loop {
        let start = pos.saturating_sub(BLOCK);
        let mut block = vec![0u8; (pos - start) as usize];
        f.seek(SeekFrom::Start(start))?;
        f.read_exact(&mut block)?;
        block.extend_from_slice(&buf);
        buf = block;
        pos = start;
        let body = buf.strip_suffix(b"\n").unwrap_or(&buf);
        if pos == 0 || body.iter().filter(|&&b| b == b'\n').count() >= n {
            break;
        }
    }
    let body_len = if buf.ends_with(b"\n") { buf.len() - 1 } else { buf.len() };
    let mut seen = 0;
    let mut cut = 0;
    for i in (0..body_len).rev() {
        if buf[i] == b'\n' {
            seen += 1;
            if seen == n {
                cut = i + 1;
                break;
            }
        }
    }
    Ok(String::from_utf8_lossy(&buf[cut..]).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_counts_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f");
        fs::write(&p, "a\nb\nc\n").unwrap();
        assert_eq!(tail_file(&p, Some(0)).unwrap(), "");
        assert_eq!(tail_file(&p, Some(1)).unwrap(), "c\n");
        assert_eq!(tail_file(&p, Some(2)).unwrap(), "b\nc\n");
        assert_eq!(tail_file(&p, Some(10)).unwrap(), "a\nb\nc\n");
        assert_eq!(tail_file(&p, None).unwrap(), "a\nb\nc\n");
        fs::write(&p, "x\ny").unwrap();
        assert_eq!(tail_file(&p, Some(1)).unwrap(), "y");
    }

    #[test]
    fn tail_of_long_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f");
        let text: String = (0..5000).map(|i| format!("line {i}\n")).collect();
        fs::write(&p, &text).unwrap();
        assert_eq!(tail_file(&p, Some(3)).unwrap(), "line 4997\nline 4998\nline 4999\n");
        assert_eq!(tail_file(&p, Some(5000)).unwrap(), text);
    }
}
