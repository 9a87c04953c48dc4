//! Concentration statistics over per-group gradient norm vectors.
//!
//! Every operator sorts its input before accumulating, which makes the
//! results bitwise permutation-invariant. Denominators that could vanish on
//! degenerate input are floored at [`EPSILON`] (`max(x, EPSILON)`), so the
//! guard is inert on any vector whose scale exceeds it and the analytic
//! values on small integer vectors come out exact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probe::GradientVector;

/// Floor applied to otherwise-vanishing denominators.
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("need at least {need} entries, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("entry {index} is {value}, expected finite and non-negative")]
    BadEntry { index: usize, value: f64 },
    #[error("entry {index} is {value}, expected finite")]
    NonFinite { index: usize, value: f64 },
    #[error("norms length {norms} does not match counts length {counts}")]
    LengthMismatch { norms: usize, counts: usize },
    #[error("group {index} has zero parameter count")]
    ZeroCount { index: usize },
    #[error("record {index} ({id}): group names differ from the first record")]
    GroupMismatch { index: usize, id: String },
    #[error("record {index} ({id}): {message}")]
    BadRecord {
        index: usize,
        id: String,
        message: String,
    },
    #[error("duplicate trajectory id {0}")]
    DuplicateId(String),
    #[error("empty corpus")]
    EmptyCorpus,
}

/// The concentration statistic used to score a norm vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Gini,
    Kurtosis,
    Cv,
    L2Magnitude,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Gini,
        Metric::Kurtosis,
        Metric::Cv,
        Metric::L2Magnitude,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Gini => "gini",
            Metric::Kurtosis => "kurtosis",
            Metric::Cv => "cv",
            Metric::L2Magnitude => "l2_magnitude",
        }
    }

    /// Applies the metric with the default [`EPSILON`] guard.
    pub fn apply(self, g: &[f64]) -> Result<f64, MetricsError> {
        self.apply_eps(g, EPSILON)
    }

    pub(crate) fn apply_eps(self, g: &[f64], eps: f64) -> Result<f64, MetricsError> {
        match self {
            Metric::Gini => gini_eps(g, eps),
            Metric::Kurtosis => kurtosis_eps(g, eps),
            Metric::Cv => cv_eps(g, eps),
            Metric::L2Magnitude => l2_magnitude(g),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gini" => Ok(Metric::Gini),
            "kurtosis" => Ok(Metric::Kurtosis),
            "cv" => Ok(Metric::Cv),
            "l2" | "l2_magnitude" => Ok(Metric::L2Magnitude),
            other => Err(format!(
                "unknown metric {other:?}, expected one of gini|kurtosis|cv|l2"
            )),
        }
    }
}

fn checked_sorted(g: &[f64], nonneg: bool) -> Result<Vec<f64>, MetricsError> {
    if g.len() < 2 {
        return Err(MetricsError::TooShort {
            need: 2,
            got: g.len(),
        });
    }
    for (index, &value) in g.iter().enumerate() {
        if !value.is_finite() {
            return Err(MetricsError::NonFinite { index, value });
        }
        if nonneg && value < 0.0 {
            return Err(MetricsError::BadEntry { index, value });
        }
    }
    let mut sorted = g.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

/// Gini coefficient of a non-negative vector, in `[0, (N-1)/N]`. Zero means
/// perfectly even; a one-hot vector reaches the upper bound.
pub fn gini(g: &[f64]) -> Result<f64, MetricsError> {
    gini_eps(g, EPSILON)
}

fn gini_eps(g: &[f64], eps: f64) -> Result<f64, MetricsError> {
    let s = checked_sorted(g, true)?;
    let n = s.len() as f64;
    let sum: f64 = s.iter().sum();
    let mut weighted = 0.0;
    for (j, &v) in s.iter().enumerate() {
        weighted += (2.0 * (j + 1) as f64 - n - 1.0) * v;
    }
    // rounding can leave a near-constant vector a hair below zero
    Ok((weighted / (n * sum).max(eps)).max(0.0))
}

/// Brute-force Gini via the mean-absolute-difference identity,
/// `sum_ij |g_i - g_j| / (2 N^2 mean)`, with no sorting. O(N^2); used only
/// to cross-check `gini`.
pub fn gini_oracle(g: &[f64]) -> Result<f64, MetricsError> {
    checked_sorted(g, true)?;
    let n = g.len() as f64;
    let mean = g.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Ok(0.0);
    }
    let mut abs_diff = 0.0;
    for &a in g {
        for &b in g {
            abs_diff += (a - b).abs();
        }
    }
    Ok(abs_diff / (2.0 * n * n * mean))
}

/// Population excess kurtosis; -3 for a constant vector (flagged degenerate
/// by [`score_corpus`]). Entries may be negative.
pub fn kurtosis(g: &[f64]) -> Result<f64, MetricsError> {
    kurtosis_eps(g, EPSILON)
}

fn kurtosis_eps(g: &[f64], eps: f64) -> Result<f64, MetricsError> {
    let s = checked_sorted(g, false)?;
    if s[0] == s[s.len() - 1] {
        return Ok(-3.0);
    }
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sigma = var.sqrt().max(eps);
    let m4 = s
        .iter()
        .map(|v| {
            let z = (v - mean) / sigma;
            z * z * z * z
        })
        .sum::<f64>()
        / n;
    Ok(m4 - 3.0)
}

/// Coefficient of variation (population std over mean) of a non-negative
/// vector; zero for a constant vector.
pub fn cv(g: &[f64]) -> Result<f64, MetricsError> {
    cv_eps(g, EPSILON)
}

fn cv_eps(g: &[f64], eps: f64) -> Result<f64, MetricsError> {
    let s = checked_sorted(g, true)?;
    if s[0] == s[s.len() - 1] {
        return Ok(0.0);
    }
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt() / mean.max(eps))
}

/// Euclidean magnitude of the norm vector: the scale-sensitive baseline.
/// No stability guard; exactly homogeneous under scaling.
pub fn l2_magnitude(g: &[f64]) -> Result<f64, MetricsError> {
    let s = checked_sorted(g, true)?;
    Ok(s.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Divides each group norm by the square root of its parameter count.
pub fn normalize_by_size(g: &[f64], counts: &[u64]) -> Result<Vec<f64>, MetricsError> {
    if g.len() != counts.len() {
        return Err(MetricsError::LengthMismatch {
            norms: g.len(),
            counts: counts.len(),
        });
    }
    for (index, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(MetricsError::ZeroCount { index });
        }
    }
    Ok(g.iter()
        .zip(counts)
        .map(|(&v, &c)| v / (c as f64).sqrt())
        .collect())
}

fn is_constant(g: &[f64]) -> bool {
    g.windows(2).all(|w| w[0] == w[1])
}

/// One scored corpus: trajectory id -> concentration score, iterated in id
/// order everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub metric: Metric,
    pub normalized: bool,
    pub entries: BTreeMap<String, f64>,
    /// Trajectories whose norm vector was constant, where kurtosis pins the
    /// score at -3 by convention rather than by measurement.
    pub degenerate_ids: BTreeSet<String>,
}

impl ScoreSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }
}

/// Scores every gradient vector with one metric, optionally after parameter
/// count normalization. All records must share the group-name layout of the
/// first one.
pub fn score_corpus(
    vectors: &[GradientVector],
    metric: Metric,
    normalized: bool,
) -> Result<ScoreSet, MetricsError> {
    score_corpus_eps(vectors, metric, normalized, EPSILON)
}

/// [`score_corpus`] with an explicit denominator floor, for configurations
/// that override the default.
pub fn score_corpus_eps(
    vectors: &[GradientVector],
    metric: Metric,
    normalized: bool,
    epsilon: f64,
) -> Result<ScoreSet, MetricsError> {
    let first = vectors.first().ok_or(MetricsError::EmptyCorpus)?;
    let mut entries = BTreeMap::new();
    let mut degenerate_ids = BTreeSet::new();
    for (index, vector) in vectors.iter().enumerate() {
        if let Err(message) = vector.validate() {
            return Err(MetricsError::BadRecord {
                index,
                id: vector.trajectory_id.clone(),
                message,
            });
        }
        if vector.group_names != first.group_names {
            return Err(MetricsError::GroupMismatch {
                index,
                id: vector.trajectory_id.clone(),
            });
        }
        let g = if normalized {
            normalize_by_size(&vector.norms, &vector.group_param_counts)?
        } else {
            vector.norms.clone()
        };
        if metric == Metric::Kurtosis && is_constant(&g) {
            degenerate_ids.insert(vector.trajectory_id.clone());
        }
        let score = metric.apply_eps(&g, epsilon)?;
        if entries
            .insert(vector.trajectory_id.clone(), score)
            .is_some()
        {
            return Err(MetricsError::DuplicateId(vector.trajectory_id.clone()));
        }
    }
    Ok(ScoreSet {
        metric,
        normalized,
        entries,
        degenerate_ids,
    })
}
