use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::hash::{Hash, Hasher};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::job::{Job, JobTemplate};
use crate::plugins::PluginRegistry;

use super::jobtree::JobTree;
use super::migration::{migrate_record, needs_migration};
use super::record::{JobRecord, RecordMetadata};
use super::select::JobFilter;

const RECORD_FILE: &str = "record.toml";
const INDEX_FILE: &str = "index.log";
const COUNTER_FILE: &str = "next_id";
const TEMPLATE_COUNTER_FILE: &str = "next_template_id";
const TREE_FILE: &str = "jobtree.toml";

/// One line of `index.log`, JSON encoded. The log is append-only while a
/// session runs and compacted when a session opens the repository.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum IndexLine {
    Put { id: u64, meta: RecordMetadata },
    Del { id: u64 },
}

#[derive(Debug, Serialize, Deserialize)]
struct TemplateFile {
    template_id: u64,
    name: String,
    record: JobRecord,
}

/// What opening a repository found.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    pub migrated: Vec<u64>,
    /// Loaded read-only because a migration step is missing.
    pub read_only: Vec<u64>,
    /// Unreadable records, left on disk untouched.
    pub unreadable: Vec<(u64, String)>,
    pub index_rebuilt: bool,
    pub temp_files_removed: usize,
}

/// The job repository: one directory per job holding its record, plus a
/// metadata index for selection.
///
/// ```text
/// <root>/jobs/<id>/record.toml
/// <root>/templates/<template_id>.toml
/// <root>/index.log
/// <root>/jobtree.toml
/// <root>/next_id
/// <root>/next_template_id
/// ```
///
/// All jobs are loaded eagerly. Every file is replaced by writing a
/// temporary sibling and renaming it over the original, so an interrupted
/// write leaves the previous version intact.
pub struct Repository {
    root: PathBuf,
    registry: Arc<PluginRegistry>,
    jobs: BTreeMap<u64, Job>,
    index: BTreeMap<u64, RecordMetadata>,
    written: HashMap<u64, u64>,
    index_log: File,
    next_id: u64,
    templates: BTreeMap<u64, JobTemplate>,
    next_template_id: u64,
    tree: JobTree,
    /// Test hook: the n-th next record write stops before its rename.
    crash_countdown: Option<u64>,
}

fn hash_text(s: &str) -> u64 {
    let mut h = DefaultHasher::new();
    s.hash(&mut h);
    h.finish()
}

/// Writes `data` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, data: &[u8]) -> io::Result<()> {
    let tmp = tmp_path(path);
    fs::write(&tmp, data)?;
    fs::rename(&tmp, path)
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn read_counter(path: &Path) -> u64 {
    fs::read_to_string(path)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(0)
}

/// Turns a parsed record into a job, migrating when needed. A missing
/// migration step yields a read-only job.
fn record_to_job(record: &JobRecord, registry: &PluginRegistry) -> Result<(Job, bool)> {
    if !needs_migration(record, registry) {
        return record.to_job(registry).map(|j| (j, false));
    }
    match migrate_record(record, registry) {
        Ok(m) => m.to_job(registry).map(|j| (j, true)),
        Err(Error::MigrationGap { plugin, from }) => {
            log::warn!(
                "job {}: no migration for {plugin} from version {from}; loading read-only",
                record.job_id
            );
            let mut job = record.to_job_unchecked()?;
            job.read_only = true;
            for sj in &mut job.subjobs {
                sj.read_only = true;
            }
            Ok((job, false))
        }
        Err(e) => Err(e),
    }
}

impl Repository {
    pub fn open(root: &Path, registry: Arc<PluginRegistry>) -> Result<(Self, LoadReport)> {
        let jobs_dir = root.join("jobs");
        fs::create_dir_all(&jobs_dir)?;
        fs::create_dir_all(root.join("templates"))?;
        let mut report = LoadReport::default();
        let mut jobs = BTreeMap::new();

        for entry in fs::read_dir(&jobs_dir)? {
            let entry = entry?;
            let Some(id) = entry.file_name().to_str().and_then(|s| s.parse::<u64>().ok()) else {
                continue;
            };
            let dir = entry.path();
            let tmp = tmp_path(&dir.join(RECORD_FILE));
            if tmp.exists() {
                fs::remove_file(&tmp)?;
                report.temp_files_removed += 1;
            }
            let text = match fs::read_to_string(dir.join(RECORD_FILE)) {
                Ok(t) => t,
                // Directory created but the first write never landed.
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(e.into()),
            };
            let loaded = JobRecord::parse(&text).and_then(|rec| {
                if rec.job_id != id {
                    return Err(Error::StorageError(format!("record in directory {id} has id {}", rec.job_id)));
                }
                record_to_job(&rec, &registry)
            });
            match loaded {
                Ok((job, migrated)) => {
                    if migrated {
                        report.migrated.push(id);
                    }
                    if job.read_only {
                        report.read_only.push(id);
                    }
                    jobs.insert(id, job);
                }
                Err(e) => {
                    log::error!("cannot load job {id}: {e}");
                    report.unreadable.push((id, e.to_string()));
                }
            }
        }
        report.loaded = jobs.len();

        let index: BTreeMap<u64, RecordMetadata> = jobs.iter().map(|(id, j)| (*id, RecordMetadata::of(j))).collect();
        let index_path = root.join(INDEX_FILE);
        let on_disk = Self::read_index(&index_path);
        if on_disk.as_ref() != Some(&index) {
            report.index_rebuilt = true;
            let mut text = String::new();
            for (id, meta) in &index {
                let line = IndexLine::Put { id: *id, meta: meta.clone() };
                text.push_str(&serde_json::to_string(&line).map_err(Error::storage)?);
                text.push('\n');
            }
            write_atomic(&index_path, text.as_bytes())?;
        }
        let index_log = OpenOptions::new().append(true).create(true).open(&index_path)?;

        let max_id = jobs.keys().next_back().map_or(0, |m| m + 1);
        let next_id = read_counter(&root.join(COUNTER_FILE)).max(max_id);

        let mut templates = BTreeMap::new();
        for entry in fs::read_dir(root.join("templates"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("toml") {
                if path.extension().and_then(|e| e.to_str()) == Some("tmp") {
                    let _ = fs::remove_file(&path);
                }
                continue;
            }
            let text = fs::read_to_string(&path)?;
            let parsed: TemplateFile = toml::from_str(&text).map_err(Error::storage)?;
            let (payload, _) = record_to_job(&parsed.record, &registry)?;
            templates.insert(
                parsed.template_id,
                JobTemplate {
                    template_id: parsed.template_id,
                    name: parsed.name,
                    payload,
                },
            );
        }
        let next_template_id = read_counter(&root.join(TEMPLATE_COUNTER_FILE))
            .max(templates.keys().next_back().map_or(0, |m| m + 1));

        let tree = match fs::read_to_string(root.join(TREE_FILE)) {
            Ok(t) => toml::from_str(&t).map_err(Error::storage)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => JobTree::default(),
            Err(e) => return Err(e.into()),
        };

        let repo = Repository {
            root: root.to_path_buf(),
            registry,
            jobs,
            index,
            written: HashMap::new(),
            index_log,
            next_id,
            templates,
            next_template_id,
            tree,
            crash_countdown: None,
        };
        Ok((repo, report))
    }

    fn read_index(path: &Path) -> Option<BTreeMap<u64, RecordMetadata>> {
        let f = File::open(path).ok()?;
        let mut out = BTreeMap::new();
        for line in BufReader::new(f).lines() {
            let line = line.ok()?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<IndexLine>(&line).ok()? {
                IndexLine::Put { id, meta } => {
                    out.insert(id, meta);
                }
                IndexLine::Del { id } => {
                    out.remove(&id);
                }
            }
        }
        Some(out)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn registry(&self) -> &Arc<PluginRegistry> {
        &self.registry
    }

    fn record_path(&self, id: u64) -> PathBuf {
        self.root.join("jobs").join(id.to_string()).join(RECORD_FILE)
    }

    /// Reserves the next job id. Ids are never reused, even after removal.
    pub fn allocate_id(&mut self) -> Result<u64> {
        let id = self.next_id;
        self.next_id += 1;
        write_atomic(&self.root.join(COUNTER_FILE), format!("{}\n", self.next_id).as_bytes())?;
        Ok(id)
    }

    pub fn get(&self, id: u64) -> Result<&Job> {
        self.jobs.get(&id).ok_or_else(|| Error::UnknownJob(id.to_string()))
    }

    pub fn contains(&self, id: u64) -> bool {
        self.jobs.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }

    pub fn jobs(&self) -> impl Iterator<Item = &Job> {
        self.jobs.values()
    }

    pub fn metadata(&self, id: u64) -> Option<&RecordMetadata> {
        self.index.get(&id)
    }

    /// Makes the `n`-th next record write (1-based) fail after writing its
    /// temporary file and before renaming it, as a crash at that point
    /// would.
    pub fn inject_crash_before_rename(&mut self, n: u64) {
        self.crash_countdown = Some(n);
    }

    /// Writes `job`. Saving an unchanged job does not touch the disk.
    pub fn save(&mut self, job: &Job) -> Result<()> {
        if job.read_only {
            return Err(Error::ReadOnly(job.id.to_string()));
        }
        let record = JobRecord::from_job(job, &self.registry)?;
        let text = record.to_toml()?;
        let h = hash_text(&text);
        if self.written.get(&job.id) == Some(&h) && self.jobs.contains_key(&job.id) {
            return Ok(());
        }
        let path = self.record_path(job.id);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = tmp_path(&path);
        fs::write(&tmp, &text)?;
        if let Some(n) = self.crash_countdown.as_mut() {
            *n -= 1;
            if *n == 0 {
                self.crash_countdown = None;
                return Err(Error::StorageError("injected crash before rename".into()));
            }
        }
        fs::rename(&tmp, &path)?;
        self.written.insert(job.id, h);
        if self.index.get(&job.id) != Some(&record.metadata) {
            let line = IndexLine::Put {
                id: job.id,
                meta: record.metadata.clone(),
            };
            self.append_index(&line)?;
            self.index.insert(job.id, record.metadata);
        }
        self.jobs.insert(job.id, job.clone());
        Ok(())
    }

    fn append_index(&mut self, line: &IndexLine) -> Result<()> {
        let mut s = serde_json::to_string(line).map_err(Error::storage)?;
        s.push('\n');
        self.index_log.write_all(s.as_bytes())?;
        Ok(())
    }

    /// Deletes the record, its index entry and its jobtree labels.
    pub fn remove(&mut self, id: u64) -> Result<Job> {
        let job = self.jobs.remove(&id).ok_or_else(|| Error::UnknownJob(id.to_string()))?;
        match fs::remove_dir_all(self.root.join("jobs").join(id.to_string())) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        self.index.remove(&id);
        self.written.remove(&id);
        self.append_index(&IndexLine::Del { id })?;
        if self.tree.forget_job(id) {
            self.save_tree()?;
        }
        Ok(job)
    }

    /// Ids matching `filter`, ascending, resolved through the index.
    pub fn select_ids(&self, filter: &JobFilter) -> Result<Vec<u64>> {
        let f = filter.compile()?;
        Ok(self
            .index
            .iter()
            .filter(|(id, meta)| f.matches(**id, meta))
            .map(|(id, _)| *id)
            .collect())
    }

    pub fn select(&self, filter: &JobFilter) -> Result<Vec<&Job>> {
        Ok(self
            .select_ids(filter)?
            .into_iter()
            .filter_map(|id| self.jobs.get(&id))
            .collect())
    }

    pub fn save_template(&mut self, name: &str, payload: Job) -> Result<JobTemplate> {
        let template_id = self.next_template_id;
        let template = JobTemplate {
            template_id,
            name: name.to_string(),
            payload,
        };
        let file = TemplateFile {
            template_id,
            name: template.name.clone(),
            record: JobRecord::from_job(&template.payload, &self.registry)?,
        };
        let text = toml::to_string(&file).map_err(Error::storage)?;
        write_atomic(
            &self.root.join("templates").join(format!("{template_id}.toml")),
            text.as_bytes(),
        )?;
        self.next_template_id += 1;
        write_atomic(
            &self.root.join(TEMPLATE_COUNTER_FILE),
            format!("{}\n", self.next_template_id).as_bytes(),
        )?;
        self.templates.insert(template_id, template.clone());
        Ok(template)
    }

    pub fn template(&self, id: u64) -> Result<&JobTemplate> {
        self.templates.get(&id).ok_or(Error::UnknownTemplate(id))
    }

    pub fn templates(&self) -> impl Iterator<Item = &JobTemplate> {
        self.templates.values()
    }

    pub fn tree(&self) -> &JobTree {
        &self.tree
    }

    /// Applies `f` to the job tree and persists the result if it succeeds.
    pub fn update_tree<T>(&mut self, f: impl FnOnce(&mut JobTree) -> Result<T>) -> Result<T> {
        let mut t = self.tree.clone();
        let out = f(&mut t)?;
        self.tree = t;
        self.save_tree()?;
        Ok(out)
    }

    fn save_tree(&self) -> Result<()> {
        let text = toml::to_string(&self.tree).map_err(Error::storage)?;
        write_atomic(&self.root.join(TREE_FILE), text.as_bytes())?;
        Ok(())
    }
}
