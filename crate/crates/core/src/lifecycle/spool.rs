use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use chrono::{DateTime, Utc};

use crate::job::JobRef;

use super::events::EventKind;

/// One event written by the job wrapper.
#[derive(Debug, Clone, PartialEq)]
pub struct SpoolLine {
    pub timestamp: DateTime<Utc>,
    pub kind: EventKind,
    pub payload: BTreeMap<String, String>,
}

/// Parses `<iso8601>\t<kind>\t<payload>`. An `output_line` payload is kept
/// verbatim under `line`; others are space separated `key=value` pairs.
pub fn parse_spool_line(line: &str) -> Option<SpoolLine> {
    let mut parts = line.splitn(3, '\t');
    let timestamp = parts.next()?.parse::<DateTime<Utc>>().ok()?;
    let kind = EventKind::parse(parts.next()?)?;
    let rest = parts.next().unwrap_or("");
    let mut payload = BTreeMap::new();
    if kind == EventKind::OutputLine {
        payload.insert("line".to_string(), rest.to_string());
    } else {
        for kv in rest.split_whitespace() {
            if let Some((k, v)) = kv.split_once('=') {
                payload.insert(k.to_string(), v.to_string());
            }
        }
    }
    Some(SpoolLine {
        timestamp,
        kind,
        payload,
    })
}

/// Incrementally reads wrapper spools, remembering how far each job's
/// spool has been consumed.
#[derive(Debug, Default)]
pub struct SpoolReader {
    offsets: HashMap<JobRef, u64>,
}

impl SpoolReader {
    pub fn new() -> Self {
        Self::default()
    }

    /// New complete lines since the last call. A partial last line is left
    /// for the next call.
    pub fn read_new(&mut self, job: JobRef, path: &Path) -> Vec<SpoolLine> {
        let offset = self.offsets.get(&job).copied().unwrap_or(0);
        let Ok(mut f) = File::open(path) else {
            return Vec::new();
        };
        if f.seek(SeekFrom::Start(offset)).is_err() {
            return Vec::new();
        }
        let mut buf = Vec::new();
        if f.read_to_end(&mut buf).is_err() {
            return Vec::new();
        }
        let Some(end) = buf.iter().rposition(|&b| b == b'\n') else {
            return Vec::new();
        };
        self.offsets.insert(job, offset + end as u64 + 1);
        String::from_utf8_lossy(&buf[..end])
            .lines()
            .filter_map(|l| {
                let parsed = parse_spool_line(l);
                if parsed.is_none() {
                    log::debug!("ignoring malformed spool line for {job}: {l:?}");
                }
                parsed
            })
            .collect()
    }

    /// Restarts reading a job's spool from the beginning.
    pub fn reset(&mut self, job: JobRef) {
        self.offsets.remove(&job);
    }

    pub fn forget(&mut self, id: u64) {
        self.offsets.retain(|r, _| r.id != id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn parses_lines() {
        let l = parse_spool_line("2024-01-01T00:00:00Z\tcompleted\texit_code=3").unwrap();
        assert_eq!(l.kind, EventKind::Completed);
        assert_eq!(l.payload["exit_code"], "3");
        let o = parse_spool_line("2024-01-01T00:00:00Z\toutput_line\ta b\tc").unwrap();
        assert_eq!(o.payload["line"], "a b\tc");
        assert!(parse_spool_line("garbage").is_none());
    }

    #[test]
    fn reads_incrementally() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("__events__");
        let mut f = File::create(&p).unwrap();
        write!(f, "2024-01-01T00:00:00Z\tstarted\thost=x\n2024-01-01T00:00:01Z\theart").unwrap();
        f.flush().unwrap();
        let mut r = SpoolReader::new();
        let j = JobRef::master(1);
        assert_eq!(r.read_new(j, &p).len(), 1);
        write!(f, "beat\telapsed_ms=1000\n").unwrap();
        f.flush().unwrap();
        let next = r.read_new(j, &p);
        assert_eq!(next.len(), 1);
        assert_eq!(next[0].kind, EventKind::Heartbeat);
        assert!(r.read_new(j, &p).is_empty());
    }
}
