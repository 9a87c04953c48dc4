//! `partition-manifest` files: the routing verdict plus enough provenance
//! (rule, threshold, corpus checksum, tool version) to audit it later.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    checksum_hex, corpus_checksum, malformed, read_doc, write_doc, IoError, FORMAT_VERSION,
};
use crate::metrics::ScoreSet;
use crate::router::{Partition, RoutingRule};

pub(super) const FORMAT: &str = "partition-manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub partition: Partition,
    /// Hex digest of the (id, score) pairs the partition was derived from;
    /// see [`corpus_checksum`].
    pub corpus_checksum: String,
    pub tool_version: String,
}

impl PartitionManifest {
    pub fn new(partition: Partition, scores: &ScoreSet) -> Self {
        PartitionManifest {
            partition,
            corpus_checksum: checksum_hex(corpus_checksum(scores)),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    metric: String,
    rule: RoutingRule,
    threshold: f64,
    degenerate: bool,
    corpus_size: usize,
    corpus_checksum: String,
    tool_version: String,
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq, Debug)]
#[serde(rename_all = "lowercase")]
enum Assignment {
    Sft,
    Rl,
}

#[derive(Serialize, Deserialize)]
struct Row {
    trajectory_id: String,
    assignment: Assignment,
}

pub fn write_partition_manifest(path: &Path, manifest: &PartitionManifest) -> Result<(), IoError> {
    let p = &manifest.partition;
    if !p.threshold.is_finite() {
        return Err(IoError::Inconsistent(format!(
            "non-finite threshold {}",
            p.threshold
        )));
    }
    if let Some(id) = p.sft_ids.intersection(&p.rl_ids).next() {
        return Err(IoError::Inconsistent(format!(
            "{id} appears in both sides of the partition"
        )));
    }
    let header = Header {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        metric: p.metric_name.clone(),
        rule: p.rule.clone(),
        threshold: p.threshold,
        degenerate: p.degenerate,
        corpus_size: p.sft_ids.len() + p.rl_ids.len(),
        corpus_checksum: manifest.corpus_checksum.clone(),
        tool_version: manifest.tool_version.clone(),
    };
    // one row per trajectory, in id order across both sides
    let rows = p.all_ids().into_iter().map(|id| Row {
        assignment: if p.rl_ids.contains(&id) {
            Assignment::Rl
        } else {
            Assignment::Sft
        },
        trajectory_id: id,
    });
    write_doc(path, &header, rows)
}

pub fn read_partition_manifest(path: &Path) -> Result<PartitionManifest, IoError> {
    let doc = read_doc(path, FORMAT)?;
    let header: Header = serde_json::from_str(&doc.header_line)
        .map_err(|e| malformed(path, 1, format!("bad header: {e}")))?;
    let mut sft_ids = BTreeSet::new();
    let mut rl_ids = BTreeSet::new();
    for (line, text) in &doc.rows {
        let row: Row =
            serde_json::from_str(text).map_err(|e| malformed(path, *line, e.to_string()))?;
        let duplicate = match row.assignment {
            Assignment::Sft => {
                rl_ids.contains(&row.trajectory_id) || !sft_ids.insert(row.trajectory_id.clone())
            }
            Assignment::Rl => {
                sft_ids.contains(&row.trajectory_id) || !rl_ids.insert(row.trajectory_id.clone())
            }
        };
        if duplicate {
            return Err(malformed(
                path,
                *line,
                format!("duplicate trajectory_id {}", row.trajectory_id),
            ));
        }
    }
    if sft_ids.len() + rl_ids.len() != header.corpus_size {
        return Err(IoError::Inconsistent(format!(
            "{}: header says corpus_size {} but the file lists {} trajectories",
            path.display(),
            header.corpus_size,
            sft_ids.len() + rl_ids.len()
        )));
    }
    Ok(PartitionManifest {
        partition: Partition {
            metric_name: header.metric,
            rule: header.rule,
            threshold: header.threshold,
            sft_ids,
            rl_ids,
            degenerate: header.degenerate,
        },
        corpus_checksum: header.corpus_checksum,
        tool_version: header.tool_version,
    })
}

/// Strips `inverse_of` wrappers, tracking whether the sides are swapped.
fn effective_rule(rule: &RoutingRule) -> (&RoutingRule, bool) {
    let mut flipped = false;
    let mut r = rule;
    while let RoutingRule::InverseOf { inner } = r {
        flipped = !flipped;
        r = inner;
    }
    (r, flipped)
}

/// Checks that a manifest really describes this score set: same ids, same
/// checksum, and every score on the side of the threshold its rule demands.
pub fn verify_manifest_against_scores(
    manifest: &PartitionManifest,
    scores: &ScoreSet,
) -> Result<(), IoError> {
    let p = &manifest.partition;
    let ids = p.all_ids();
    if !ids.iter().eq(scores.entries.keys()) {
        return Err(IoError::Inconsistent(format!(
            "manifest covers {} trajectories, scores cover {}, or the ids differ",
            ids.len(),
            scores.len()
        )));
    }
    let expected = checksum_hex(corpus_checksum(scores));
    if manifest.corpus_checksum != expected {
        return Err(IoError::Inconsistent(format!(
            "corpus checksum mismatch: manifest has {}, scores hash to {expected}",
            manifest.corpus_checksum
        )));
    }

    let (base, flipped) = effective_rule(&p.rule);
    let (low, high) = if flipped {
        (&p.rl_ids, &p.sft_ids)
    } else {
        (&p.sft_ids, &p.rl_ids)
    };
    let t = p.threshold;
    for id in low {
        let s = scores.entries[id];
        if s > t {
            return Err(IoError::Inconsistent(format!(
                "{id} scored {s}, above the threshold {t}, yet sits on the low side"
            )));
        }
    }
    for id in high {
        let s = scores.entries[id];
        // the quantile threshold is the lowest admitted score, so equality
        // is legitimate there; the median rule admits strictly-above only
        let bad = match base {
            RoutingRule::Median => s <= t,
            RoutingRule::Quantile { .. } => s < t,
            RoutingRule::InverseOf { .. } => unreachable!("stripped above"),
        };
        if bad {
            return Err(IoError::Inconsistent(format!(
                "{id} scored {s}, not above the threshold {t}, yet sits on the high side"
            )));
        }
    }
    Ok(())
}
