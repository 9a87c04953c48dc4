//! `score-set` files: one concentration score per trajectory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{malformed, read_doc, write_doc, IoError, FORMAT_VERSION};
use crate::metrics::{Metric, ScoreSet};

pub(super) const FORMAT: &str = "score-set";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    metric: Metric,
    normalized: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Serialize, Deserialize)]
struct Row {
    trajectory_id: String,
    score: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    degenerate: bool,
}

pub fn write_scores(path: &Path, scores: &ScoreSet) -> Result<(), IoError> {
    for (id, score) in &scores.entries {
        if !score.is_finite() {
            return Err(IoError::Inconsistent(format!(
                "{id}: non-finite score {score}"
            )));
        }
    }
    write_doc(
        path,
        &Header {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            metric: scores.metric,
            normalized: scores.normalized,
        },
        scores.entries.iter().map(|(id, score)| Row {
            trajectory_id: id.clone(),
            score: *score,
            degenerate: scores.degenerate_ids.contains(id),
        }),
    )
}

pub fn read_scores(path: &Path) -> Result<ScoreSet, IoError> {
    let doc = read_doc(path, FORMAT)?;
    let header: Header = serde_json::from_str(&doc.header_line)
        .map_err(|e| malformed(path, 1, format!("bad header: {e}")))?;
    let mut set = ScoreSet {
        metric: header.metric,
        normalized: header.normalized,
        entries: Default::default(),
        degenerate_ids: Default::default(),
    };
    for (line, text) in &doc.rows {
        let row: Row =
            serde_json::from_str(text).map_err(|e| malformed(path, *line, e.to_string()))?;
        if row.trajectory_id.is_empty() {
            return Err(malformed(path, *line, "empty trajectory_id"));
        }
        if !row.score.is_finite() {
            return Err(malformed(
                path,
                *line,
                format!("non-finite score {}", row.score),
            ));
        }
        if set
            .entries
            .insert(row.trajectory_id.clone(), row.score)
            .is_some()
        {
            return Err(malformed(
                path,
                *line,
                format!("duplicate trajectory_id {}", row.trajectory_id),
            ));
        }
        if row.degenerate {
            set.degenerate_ids.insert(row.trajectory_id);
        }
    }
    Ok(set)
}
