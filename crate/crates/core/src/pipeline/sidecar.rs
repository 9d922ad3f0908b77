//! Append-only per-stage status log.
//!
//! ```text
//! {"header":{"config_digest":"…","stage":"detect"}}
//! {"entry":{"digest":"…","id":"img-001","outcome":{"state":"done","delta":{…}}}}
//! …
//! {"complete":{"count":20}}
//! ```
//!
//! An entry records what the stage produced for one input record, keyed by
//! the digest of the fields the stage consumed. Replaying deltas over the
//! current input rebuilds the stage output without calling any model.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::datamodel::{to_canonical, Digest128, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum Outcome {
    /// Fields to set on the input record.
    Done { delta: Map<String, Value> },
    /// The record is carried forward with a failure marker.
    Failed { reason: String },
    /// The record is dropped from the output (curation filters).
    Rejected { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    pub digest: Digest128,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Line {
    Header { stage: Stage, config_digest: Digest128 },
    Entry(Entry),
    Complete { count: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SidecarState {
    pub stage: Stage,
    pub config_digest: Digest128,
    /// Latest entry per record id.
    pub entries: HashMap<String, (Digest128, Outcome)>,
    /// The last line is a completion footer.
    pub complete: bool,
}

impl SidecarState {
    /// Reads a sidecar, tolerating a torn final line. `Ok(None)` when the
    /// file is absent or has no header.
    pub fn load(path: &Path) -> std::io::Result<Option<SidecarState>> {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        let mut state: Option<SidecarState> = None;
        for line in BufReader::new(file).lines() {
            let line = line?;
            let parsed: Line = match serde_json::from_str(&line) {
                Ok(l) => l,
                Err(e) => {
                    tracing::warn!(path = %path.display(), error = %e, "ignoring unreadable status line");
                    continue;
                }
            };
            match (parsed, state.as_mut()) {
                (Line::Header { stage, config_digest }, None) => {
                    state = Some(SidecarState { stage, config_digest, entries: HashMap::new(), complete: false });
                }
                (Line::Header { .. }, Some(_)) => {
                    tracing::warn!(path = %path.display(), "ignoring repeated status header");
                }
                (Line::Entry(e), Some(s)) => {
                    s.entries.insert(e.id, (e.digest, e.outcome));
                    s.complete = false;
                }
                (Line::Complete { .. }, Some(s)) => s.complete = true,
                (_, None) => {}
            }
        }
        Ok(state)
    }
}

pub struct SidecarWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl SidecarWriter {
    /// Truncates and writes a fresh header.
    pub fn create(path: &Path, stage: Stage, config_digest: Digest128) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = SidecarWriter { path: path.to_path_buf(), out: BufWriter::new(File::create(path)?) };
        w.write(&Line::Header { stage, config_digest })?;
        Ok(w)
    }

    /// Opens for appending; a torn last line is terminated first so the
    /// next entry starts on a line of its own.
    pub fn append(path: &Path) -> std::io::Result<Self> {
        let mut file = OpenOptions::new().read(true).append(true).open(path)?;
        let mut last = *b"\n";
        if file.metadata()?.len() > 0 {
            file.seek(SeekFrom::End(-1))?;
            file.read_exact(&mut last)?;
        }
        let torn = last[0] != b'\n';
        if torn {
            file.write_all(b"\n")?;
        }
        Ok(SidecarWriter { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    /// Writes and flushes one line.
    pub fn write(&mut self, line: &Line) -> std::io::Result<()> {
        let text = to_canonical(line).map_err(std::io::Error::other)?;
        writeln!(self.out, "{text}")?;
        self.out.flush()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Atomically replaces the sidecar with a compact, complete version.
pub fn rewrite_complete(path: &Path, stage: Stage, config_digest: Digest128, entries: &[Entry]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!("jsonl.tmp{}", std::process::id()));
    {
        let mut w = SidecarWriter::create(&tmp, stage, config_digest)?;
        for e in entries {
            w.write(&Line::Entry(e.clone()))?;
        }
        w.write(&Line::Complete { count: entries.len() })?;
    }
    std::fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, n: u8) -> Entry {
        Entry { id: id.into(), digest: Digest128([n; 16]), outcome: Outcome::Failed { reason: format!("r{n}") } }
    }

    #[test]
    fn round_trip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("detect.status.jsonl");
        assert!(SidecarState::load(&path).unwrap().is_none());
        let d = Digest128([9; 16]);
        {
            let mut w = SidecarWriter::create(&path, Stage::Detect, d).unwrap();
            w.write(&Line::Entry(entry("a", 1))).unwrap();
            w.write(&Line::Entry(entry("a", 2))).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        write!(f, "{{\"entry\":{{\"id\":\"b\"").unwrap();
        let s = SidecarState::load(&path).unwrap().unwrap();
        assert_eq!(s.config_digest, d);
        assert!(!s.complete);
        assert_eq!(s.entries.len(), 1);
        assert_eq!(s.entries["a"].0, Digest128([2; 16]));

        rewrite_complete(&path, Stage::Detect, d, &[entry("a", 2)]).unwrap();
        let s = SidecarState::load(&path).unwrap().unwrap();
        assert!(s.complete);
        SidecarWriter::append(&path).unwrap().write(&Line::Entry(entry("c", 3))).unwrap();
        assert!(!SidecarState::load(&path).unwrap().unwrap().complete);
    }
}
