//! Layered TOML configuration: site < workgroup < user < command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use jobfront::backends::wrapper::SensorConfig;
use jobfront::backends::BackendsConfig;
use jobfront::lifecycle::{CredentialConfig, MonitorConfig};
use jobfront::persistence::DEFAULT_SANDBOX_WARN_BYTES;
use jobfront::{Category, SessionConfig};
use serde::{Deserialize, Serialize};

pub const SITE_ENV: &str = "JOBFRONT_SITE_CONFIG";
pub const WORKGROUP_ENV: &str = "JOBFRONT_WORKGROUP_CONFIG";
pub const USER_ENV: &str = "JOBFRONT_USER_CONFIG";
const SITE_DEFAULT: &str = "/etc/jobfront/config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HttpConfig {
    pub bind: String,
    pub port: u16,
    /// Bearer token required on every request, if set.
    pub token: Option<String>,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            bind: "127.0.0.1".into(),
            port: 8470,
            token: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub repository_root: PathBuf,
    pub workspace_root: Option<PathBuf>,
    pub enabled_plugins: BTreeMap<Category, Vec<String>>,
    pub monitor: MonitorConfig,
    pub backends: BackendsConfig,
    pub credential: CredentialConfig,
    pub sensor: SensorConfig,
    pub sandbox_warn_bytes: u64,
    pub event_retention: usize,
    pub event_log: Option<PathBuf>,
    pub verbose: bool,
    pub http: HttpConfig,
}

fn default_repository() -> PathBuf {
    match std::env::var_os("HOME") {
        Some(h) => Path::new(&h).join(".jobfront"),
        None => PathBuf::from(".jobfront"),
    }
}

impl Default for ConfigFile {
    fn default() -> Self {
        let s = SessionConfig::default();
        ConfigFile {
            repository_root: default_repository(),
            workspace_root: None,
            enabled_plugins: BTreeMap::new(),
            monitor: s.monitor,
            backends: s.backends,
            credential: s.credential,
            sensor: s.sensor,
            sandbox_warn_bytes: DEFAULT_SANDBOX_WARN_BYTES,
            event_retention: s.event_retention,
            event_log: None,
            verbose: false,
            http: HttpConfig::default(),
        }
    }
}

impl ConfigFile {
    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            repository_root: self.repository_root.clone(),
            workspace_root: self.workspace_root.clone(),
            enabled_plugins: self.enabled_plugins.clone(),
            monitor: self.monitor.clone(),
            backends: self.backends.clone(),
            credential: self.credential.clone(),
            sensor: self.sensor.clone(),
            sandbox_warn_bytes: self.sandbox_warn_bytes,
            event_retention: self.event_retention,
            event_log: self.event_log.clone(),
        }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}:{}", self.http.bind, self.http.port)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    /// File path, or `flags`.
    pub origin: String,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
    pub suggestion: Option<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.origin)?;
        if let (Some(l), Some(c)) = (self.line, self.column) {
            write!(f, ":{l}:{c}")?;
        }
        write!(f, ": {}", self.message)?;
        if let Some(s) = &self.suggestion {
            write!(f, "; did you mean `{s}`?")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

fn backticked(msg: &str) -> Vec<&str> {
    msg.split('`').skip(1).step_by(2).collect()
}

/// Smallest edit distance between `key` and any window of `candidate`
/// of similar length, so `pol_rate` is close to `default_poll_rate_s`.
fn closeness(key: &str, candidate: &str) -> usize {
    let c: Vec<char> = candidate.chars().collect();
    let n = key.chars().count();
    let mut best = strsim::levenshtein(key, candidate);
    for len in n.saturating_sub(1)..=n + 1 {
        if len == 0 || len > c.len() {
            continue;
        }
        for start in 0..=c.len() - len {
            let w: String = c[start..start + len].iter().collect();
            best = best.min(strsim::levenshtein(key, &w));
        }
    }
    best
}

pub fn nearest<'a>(key: &str, candidates: &[&'a str]) -> Option<&'a str> {
    candidates
        .iter()
        .map(|c| (closeness(key, c), strsim::levenshtein(key, c), *c))
        .filter(|(d, _, _)| *d <= key.chars().count().div_ceil(2))
        .min()
        .map(|(_, _, c)| c)
}

fn de_error(origin: &str, text: &str, e: toml::de::Error) -> ConfigError {
    let (line, column) = match e.span() {
        Some(span) => {
            let (l, c) = line_col(text, span.start);
            (Some(l), Some(c))
        }
        None => (None, None),
    };
    let msg = e.message().trim().to_string();
    let mut suggestion = None;
    if msg.starts_with("unknown field") {
        let ticks = backticked(&msg);
        if let Some((key, expected)) = ticks.split_first() {
            suggestion = nearest(key, expected).map(str::to_string);
        }
    }
    ConfigError {
        origin: origin.to_string(),
        line,
        column,
        message: msg,
        suggestion,
    }
}

/// Parses one layer and checks it on its own, so errors point into the
/// file that caused them.
pub fn parse_layer(origin: &str, text: &str) -> Result<toml::Table, ConfigError> {
    let table: toml::Table = toml::from_str(text).map_err(|e| de_error(origin, text, e))?;
    toml::from_str::<ConfigFile>(text).map_err(|e| de_error(origin, text, e))?;
    Ok(table)
}

pub fn merge(base: &mut toml::Table, upper: toml::Table) {
    for (k, v) in upper {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Turns `a.b.c=value` into a nested table. The value is read as TOML when
/// it parses, as a string otherwise.
pub fn flag_override(assignment: &str) -> Result<toml::Table, ConfigError> {
    let err = |m: String| ConfigError {
        origin: "flags".into(),
        line: None,
        column: None,
        message: m,
        suggestion: None,
    };
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| err(format!("`{assignment}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(err(format!("bad key `{path}`")));
    }
    let last = keys.pop().expect("split yields one item");
    let mut table = toml::Table::new();
    table.insert(last.to_string(), value);
    for k in keys.into_iter().rev() {
        let mut outer = toml::Table::new();
        outer.insert(k.to_string(), toml::Value::Table(table));
        table = outer;
    }
    Ok(table)
}

/// Merges the layers in order (later wins) and validates the result.
pub fn load(layers: &[(String, String)], flags: &[toml::Table]) -> Result<ConfigFile, ConfigError> {
    let mut merged = toml::Table::new();
    for (origin, text) in layers {
        merge(&mut merged, parse_layer(origin, text)?);
    }
    for f in flags {
        let text = toml::to_string(f).unwrap_or_default();
        merge(&mut merged, parse_layer("flags", &text)?);
    }
    let cfg: ConfigFile = merged.try_into().map_err(|e: toml::de::Error| ConfigError {
        origin: "merged configuration".into(),
        line: None,
        column: None,
        message: e.message().to_string(),
        suggestion: None,
    })?;
    cfg.monitor.validate().map_err(|e| ConfigError {
        origin: "merged configuration".into(),
        line: None,
        column: None,
        message: e.to_string(),
        suggestion: None,
    })?;
    Ok(cfg)
}

/// Existing site, workgroup and user files, in that order.
pub fn standard_files() -> Vec<PathBuf> {
    let env = |k: &str| std::env::var_os(k).map(PathBuf::from);
    let user = env(USER_ENV).or_else(|| {
        let base = env("XDG_CONFIG_HOME").or_else(|| env("HOME").map(|h| h.join(".config")))?;
        Some(base.join("jobfront").join("config.toml"))
    });
    [
        Some(env(SITE_ENV).unwrap_or_else(|| PathBuf::from(SITE_DEFAULT))),
        env(WORKGROUP_ENV),
        user,
    ]
    .into_iter()
    .flatten()
    .filter(|p| p.is_file())
    .collect()
}

pub fn read_layers(paths: &[PathBuf]) -> Result<Vec<(String, String)>, ConfigError> {
    paths
        .iter()
        .map(|p| {
            let origin = p.display().to_string();
            std::fs::read_to_string(p)
                .map(|t| (origin.clone(), t))
                .map_err(|e| ConfigError {
                    origin,
                    line: None,
                    column: None,
                    message: e.to_string(),
                    suggestion: None,
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_are_one_based() {
        assert_eq!(line_col("a\nbc", 3), (2, 2));
        assert_eq!(line_col("x", 0), (1, 1));
    }

    #[test]
    fn flag_values_parse_as_toml_or_string() {
        let t = flag_override("monitor.default_poll_rate_s=0.5").unwrap();
        assert_eq!(t["monitor"]["default_poll_rate_s"].as_float(), Some(0.5));
        let t = flag_override("repository_root=/tmp/x").unwrap();
        assert_eq!(t["repository_root"].as_str(), Some("/tmp/x"));
    }

    #[test]
    fn nearest_prefers_embedded_match() {
        let keys = ["pool_size", "default_poll_rate_s", "per_backend_poll_rate_s", "poll_timeout_s"];
        assert_eq!(nearest("pol_rate", &keys), Some("default_poll_rate_s"));
        assert_eq!(nearest("pool_sise", &keys), Some("pool_size"));
        assert_eq!(nearest("zzzzzzzzzzzz", &keys), None);
    }
}
