use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One directory of the job tree as returned by [`JobTree::list`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobTreeNode {
    pub path: String,
    pub children: Vec<String>,
    pub job_ids: Vec<u64>,
}

/// Hierarchical labels for jobs. A job may sit under any number of paths;
/// the tree never owns jobs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobTree {
    /// Normalized path to the ids filed there. Always contains `/`.
    dirs: BTreeMap<String, Vec<u64>>,
}

impl Default for JobTree {
    fn default() -> Self {
        let mut dirs = BTreeMap::new();
        dirs.insert("/".to_string(), Vec::new());
        JobTree { dirs }
    }
}

/// Canonical form: leading slash, no empty or trailing segments.
pub fn normalize_path(path: &str) -> Result<String> {
    let mut parts = Vec::new();
    for seg in path.split('/').filter(|s| !s.is_empty()) {
        if seg == "." || seg == ".." {
            return Err(Error::PathMissing(path.to_string()));
        }
        parts.push(seg);
    }
    Ok(format!("/{}", parts.join("/")))
}

fn parent(path: &str) -> Option<&str> {
    if path == "/" {
        return None;
    }
    match path.rfind('/') {
        Some(0) => Some("/"),
        Some(i) => Some(&path[..i]),
        None => None,
    }
}

fn is_below(path: &str, dir: &str) -> bool {
    if dir == "/" {
        return path != "/";
    }
    path.len() > dir.len() && path.starts_with(dir) && path.as_bytes()[dir.len()] == b'/'
}

impl JobTree {
    /// Creates `path` and any missing parents.
    pub fn mkdir(&mut self, path: &str) -> Result<()> {
        let p = normalize_path(path)?;
        if self.dirs.contains_key(&p) {
            return Err(Error::PathExists(p));
        }
        let mut cur = Some(p.as_str());
        while let Some(c) = cur {
            self.dirs.entry(c.to_string()).or_default();
            cur = parent(c);
        }
        Ok(())
    }

    pub fn add(&mut self, path: &str, job_id: u64) -> Result<()> {
        let p = normalize_path(path)?;
        let ids = self.dirs.get_mut(&p).ok_or(Error::PathMissing(p))?;
        if !ids.contains(&job_id) {
            ids.push(job_id);
        }
        Ok(())
    }

    pub fn list(&self, path: &str) -> Result<JobTreeNode> {
        let p = normalize_path(path)?;
        let ids = self.dirs.get(&p).ok_or_else(|| Error::PathMissing(p.clone()))?;
        let children = self
            .dirs
            .keys()
            .filter(|k| parent(k) == Some(p.as_str()))
            .map(|k| k.rsplit('/').next().unwrap_or_default().to_string())
            .collect();
        Ok(JobTreeNode {
            path: p,
            children,
            job_ids: ids.clone(),
        })
    }

    /// Removes a directory. A non-empty one needs `recursive`. Removing `/`
    /// empties the tree.
    pub fn rm(&mut self, path: &str, recursive: bool) -> Result<()> {
        let p = normalize_path(path)?;
        let ids = self.dirs.get(&p).ok_or_else(|| Error::PathMissing(p.clone()))?;
        let has_children = self.dirs.keys().any(|k| is_below(k, &p));
        if !recursive && (has_children || !ids.is_empty()) {
            return Err(Error::NotEmpty(p));
        }
        self.dirs.retain(|k, _| !is_below(k, &p));
        if p == "/" {
            self.dirs.insert(p, Vec::new());
        } else {
            self.dirs.remove(&p);
        }
        Ok(())
    }

    /// Drops `job_id` from every path. Returns whether it was filed anywhere.
    pub fn forget_job(&mut self, job_id: u64) -> bool {
        let mut found = false;
        for ids in self.dirs.values_mut() {
            let before = ids.len();
            ids.retain(|&i| i != job_id);
            found |= ids.len() != before;
        }
        found
    }

    /// Every path that lists `job_id`.
    pub fn paths_of(&self, job_id: u64) -> Vec<String> {
        self.dirs
            .iter()
            .filter(|(_, ids)| ids.contains(&job_id))
            .map(|(k, _)| k.clone())
            .collect()
    }
}
