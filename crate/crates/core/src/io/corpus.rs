//! `trajectory-corpus` files: raw token sequences with a response offset.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{malformed, read_doc, write_doc, IoError, FORMAT_VERSION};
use crate::probe::{prepare_trajectory, ProbeError, Trajectory};

pub(super) const FORMAT: &str = "trajectory-corpus";

/// One corpus line, exactly as stored: untruncated tokens plus the index of
/// the first response token. Truncation/padding to the probe context happens
/// at load time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub trajectory_id: String,
    pub tokens: Vec<u32>,
    pub response_start: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedCorpus {
    pub trajectories: Vec<Trajectory>,
    /// Ids whose whole response span fell past the context cut. They are
    /// unusable for probing but not an input error.
    pub skipped_ids: Vec<String>,
}

/// Loads a corpus and prepares every record for a probe with the given
/// vocabulary and context length. Records whose response is entirely
/// truncated away are skipped with a warning; anything else wrong is a
/// line-numbered hard error.
pub fn read_trajectory_corpus(
    path: &Path,
    vocab_size: usize,
    context_length: usize,
) -> Result<LoadedCorpus, IoError> {
    let doc = read_doc(path, FORMAT)?;
    let mut trajectories = Vec::with_capacity(doc.rows.len());
    let mut skipped_ids = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, text) in &doc.rows {
        let record: TrajectoryRecord =
            serde_json::from_str(text).map_err(|e| malformed(path, *line, e.to_string()))?;
        if record.trajectory_id.is_empty() {
            return Err(malformed(path, *line, "empty trajectory_id"));
        }
        if !seen.insert(record.trajectory_id.clone()) {
            return Err(malformed(
                path,
                *line,
                format!("duplicate trajectory_id {}", record.trajectory_id),
            ));
        }
        if let Some(pos) = record.tokens.iter().position(|&t| t as usize >= vocab_size) {
            return Err(malformed(
                path,
                *line,
                format!(
                    "token {} at position {pos} is outside the vocabulary (size {vocab_size})",
                    record.tokens[pos]
                ),
            ));
        }
        match prepare_trajectory(
            &record.trajectory_id,
            &record.tokens,
            record.response_start,
            context_length,
        ) {
            Ok(mut t) => {
                t.metadata = record.metadata;
                trajectories.push(t);
            }
            Err(ProbeError::EmptyResponse { id }) => {
                log::warn!(
                    "{}:{line}: skipping {id}: response starts at {} but only {context_length} \
                     tokens fit the context",
                    path.display(),
                    record.response_start,
                );
                skipped_ids.push(id);
            }
            Err(e) => return Err(malformed(path, *line, e.to_string())),
        }
    }
    if !skipped_ids.is_empty() {
        log::warn!(
            "{}: skipped {} of {} records as fully truncated",
            path.display(),
            skipped_ids.len(),
            doc.rows.len()
        );
    }
    Ok(LoadedCorpus {
        trajectories,
        skipped_ids,
    })
}

/// Writes records verbatim (no truncation). Ids must be unique.
pub fn write_trajectory_corpus(path: &Path, records: &[TrajectoryRecord]) -> Result<(), IoError> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(&r.trajectory_id) {
            return Err(IoError::Inconsistent(format!(
                "duplicate trajectory_id {} in corpus",
                r.trajectory_id
            )));
        }
    }
    write_doc(
        path,
        &Header {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
        },
        records.iter(),
    )
}
