//! JSONL manifests: one canonical JSON record per line, closed by a
//! terminator line `{"__end__":true,"count":N}`. A file without the
//! terminator is the remains of a crashed write.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;
use thiserror::Error;

use super::{to_canonical, ImageRecord};

pub const TERMINATOR_KEY: &str = "__end__";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{path}: record {id:?}: {message}")]
    Invariant { path: PathBuf, id: String, message: String },
    #[error("{path}: incomplete manifest (no terminator line)")]
    Incomplete { path: PathBuf },
    #[error("{path}: terminator claims {claimed} records, found {found}")]
    CountMismatch { path: PathBuf, claimed: usize, found: usize },
}

impl ManifestError {
    fn io(path: &Path, source: io::Error) -> Self {
        ManifestError::Io { path: path.to_path_buf(), source }
    }

    /// Line number for parse errors.
    pub fn line(&self) -> Option<usize> {
        match self {
            ManifestError::Malformed { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// Writes `records` followed by the terminator. Returns the record count.
pub fn write_manifest<'a, I>(records: I, path: &Path) -> Result<usize, ManifestError>
where
    I: IntoIterator<Item = &'a ImageRecord>,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| ManifestError::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| ManifestError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut count = 0usize;
    for record in records {
        let line = to_canonical(record).map_err(|e| ManifestError::io(path, io::Error::other(e)))?;
        writeln!(out, "{line}").map_err(|e| ManifestError::io(path, e))?;
        count += 1;
    }
    writeln!(out, "{{\"{TERMINATOR_KEY}\":true,\"count\":{count}}}").map_err(|e| ManifestError::io(path, e))?;
    out.flush().map_err(|e| ManifestError::io(path, e))?;
    Ok(count)
}

/// Reads a complete manifest, validating every record.
pub fn read_manifest(path: &Path) -> Result<Vec<ImageRecord>, ManifestError> {
    read_impl(path, true)
}

/// Like [`read_manifest`] but accepts a missing terminator, for hand-written
/// source manifests.
pub fn read_manifest_lenient(path: &Path) -> Result<Vec<ImageRecord>, ManifestError> {
    read_impl(path, false)
}

fn read_impl(path: &Path, require_terminator: bool) -> Result<Vec<ImageRecord>, ManifestError> {
    let file = File::open(path).map_err(|e| ManifestError::io(path, e))?;
    let reader = BufReader::new(file);
    let malformed = |line: usize, message: String| ManifestError::Malformed { path: path.to_path_buf(), line, message };

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut terminator: Option<(usize, usize)> = None;

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| ManifestError::io(path, e))?;
        let trimmed = line.trim_end();
        if let Some((term_line, _)) = terminator {
            if trimmed.is_empty() {
                continue;
            }
            return Err(malformed(lineno, format!("data after terminator on line {term_line}")));
        }
        if trimmed.is_empty() {
            return Err(malformed(lineno, "empty line".into()));
        }
        let value: Value = serde_json::from_str(trimmed).map_err(|e| malformed(lineno, e.to_string()))?;
        if value.get(TERMINATOR_KEY).is_some() {
            let count = value
                .get("count")
                .and_then(Value::as_u64)
                .ok_or_else(|| malformed(lineno, "terminator without count".into()))?;
            terminator = Some((lineno, count as usize));
            continue;
        }
        let record: ImageRecord = serde_json::from_value(value).map_err(|e| malformed(lineno, e.to_string()))?;
        record.validate().map_err(|message| ManifestError::Invariant {
            path: path.to_path_buf(),
            id: record.id.clone(),
            message,
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(ManifestError::Invariant {
                path: path.to_path_buf(),
                id: record.id.clone(),
                message: format!("duplicate id on line {lineno}"),
            });
        }
        records.push(record);
    }

    match terminator {
        Some((_, claimed)) if claimed != records.len() => {
            Err(ManifestError::CountMismatch { path: path.to_path_buf(), claimed, found: records.len() })
        }
        None if require_terminator => Err(ManifestError::Incomplete { path: path.to_path_buf() }),
        _ => Ok(records),
    }
}

/// True when the file exists and ends with a valid terminator.
pub fn is_complete(path: &Path) -> bool {
    read_manifest(path).is_ok()
}
