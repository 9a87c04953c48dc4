//! On-disk formats. Every pipeline artifact is line-delimited JSON with a
//! one-line header carrying `format` and `version` (plus format-specific
//! fields), so files are self-describing and grep/`jq`-friendly. Analysis
//! reports are single pretty-printed JSON documents.
//!
//! Floats are written in shortest-round-trip form, so a write/read cycle
//! reproduces every score and norm bit for bit.

mod corpus;
mod dump;
mod manifest;
mod scores;

pub use corpus::{read_trajectory_corpus, write_trajectory_corpus, LoadedCorpus, TrajectoryRecord};
pub use dump::{read_gradient_dump, write_gradient_dump};
pub use manifest::{
    read_partition_manifest, verify_manifest_against_scores, write_partition_manifest,
    PartitionManifest,
};
pub use scores::{read_scores, write_scores};

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::metrics::ScoreSet;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: expected a {expected} header, found {found}")]
    WrongFormat {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },
    #[error("{path}: {format} version {version} is not supported (this build reads {supported})")]
    Version {
        path: PathBuf,
        format: String,
        version: u32,
        supported: u32,
    },
    #[error("{path}: file has no header line")]
    Empty { path: PathBuf },
    #[error("{0}")]
    Inconsistent(String),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// A parsed line-delimited document: the raw header line plus the remaining
/// non-blank lines with their 1-based numbers.
#[derive(Debug)]
pub(crate) struct RawDoc {
    pub header_line: String,
    pub rows: Vec<(usize, String)>,
}

/// Reads a line-delimited file and checks its header against `expected`.
/// Blank lines are ignored everywhere.
pub(crate) fn read_doc(path: &Path, expected: &'static str) -> Result<RawDoc, IoError> {
    let content = fs::read_to_string(path).map_err(file_err(path))?;
    let mut lines = content
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());

    let (header_no, header_line) = lines.next().ok_or_else(|| IoError::Empty {
        path: path.to_path_buf(),
    })?;
    let header: serde_json::Value =
        serde_json::from_str(header_line).map_err(|e| IoError::Malformed {
            path: path.to_path_buf(),
            line: header_no,
            message: format!("bad header: {e}"),
        })?;
    let found = header
        .get("format")
        .and_then(|v| v.as_str())
        .unwrap_or("<missing>")
        .to_string();
    if found != expected {
        return Err(IoError::WrongFormat {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let version = header.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(IoError::Version {
            path: path.to_path_buf(),
            format: found,
            version,
            supported: FORMAT_VERSION,
        });
    }

    Ok(RawDoc {
        header_line: header_line.to_string(),
        rows: lines.map(|(no, l)| (no, l.to_string())).collect(),
    })
}

pub(crate) fn malformed(path: &Path, line: usize, message: impl Into<String>) -> IoError {
    IoError::Malformed {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn encode_err(e: serde_json::Error) -> IoError {
    IoError::Inconsistent(format!("cannot encode line: {e}"))
}

/// Writes header + rows, each as one JSON line.
pub(crate) fn write_doc<H, R, I>(path: &Path, header: &H, rows: I) -> Result<(), IoError>
where
    H: Serialize,
    R: Serialize,
    I: IntoIterator<Item = R>,
{
    let file = fs::File::create(path).map_err(file_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    let mut put = |line: String| -> Result<(), IoError> {
        w.write_all(line.as_bytes()).map_err(file_err(path))?;
        w.write_all(b"\n").map_err(file_err(path))
    };
    put(serde_json::to_string(header).map_err(encode_err)?)?;
    for row in rows {
        put(serde_json::to_string(&row).map_err(encode_err)?)?;
    }
    w.flush().map_err(file_err(path))
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Order-independent digest of a scored corpus: XOR of per-record FNV-1a
/// hashes over the id bytes followed by the score bits. Catches a changed
/// id, a changed score, or a missing record regardless of file ordering.
pub fn corpus_checksum(scores: &ScoreSet) -> u64 {
    scores.entries.iter().fold(0u64, |acc, (id, score)| {
        let mut h = FNV_OFFSET;
        for &b in id.as_bytes() {
            h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
        }
        for b in score.to_bits().to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
        }
        acc ^ h
    })
}

pub fn checksum_hex(checksum: u64) -> String {
    format!("{checksum:016x}")
}

/// Writes an analysis report as a pretty-printed JSON document.
pub fn write_json_report<T: Serialize>(path: &Path, report: &T) -> Result<(), IoError> {
    let body = serde_json::to_string_pretty(report)
        .map_err(|e| IoError::Inconsistent(format!("cannot encode report: {e}")))?;
    let mut file = fs::File::create(path).map_err(file_err(path))?;
    file.write_all(body.as_bytes()).map_err(file_err(path))?;
    file.write_all(b"\n").map_err(file_err(path))?;
    Ok(())
}

pub fn read_json_report<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let content = fs::read_to_string(path).map_err(file_err(path))?;
    serde_json::from_str(&content).map_err(|e| malformed(path, e.line(), e.to_string()))
}
