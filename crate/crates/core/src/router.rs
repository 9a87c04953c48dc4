//! Routes scored trajectories into an SFT half and an RL half.
//!
//! Median rule: scores at or below the median go to SFT, strictly above to
//! RL, so ties always land on the SFT side. Quantile rule: the
//! `ceil(rl_fraction * n)` highest-scoring trajectories go to RL, ties at
//! the cut resolved by ascending trajectory id. Both rules are pure
//! functions of the score multiset, and quantile partitions nest as the
//! fraction grows.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::ScoreSet;

#[derive(Debug, Error, PartialEq)]
pub enum RouterError {
    #[error("cannot split an empty score set")]
    EmptyCorpus,
    #[error("rl_fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoutingRule {
    Median,
    Quantile { rl_fraction: f64 },
    InverseOf { inner: Box<RoutingRule> },
}

impl fmt::Display for RoutingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoutingRule::Median => f.write_str("median"),
            RoutingRule::Quantile { rl_fraction } => write!(f, "quantile({rl_fraction})"),
            RoutingRule::InverseOf { inner } => write!(f, "inverse-of({inner})"),
        }
    }
}

/// A disjoint, exhaustive split of one scored corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub metric_name: String,
    pub rule: RoutingRule,
    /// Highest score still routed to SFT under the median rule; lowest score
    /// admitted to RL under the quantile rule.
    pub threshold: f64,
    pub sft_ids: BTreeSet<String>,
    pub rl_ids: BTreeSet<String>,
    /// True when one side ended up empty (e.g. every score equal).
    pub degenerate: bool,
}

impl Partition {
    pub fn corpus_size(&self) -> usize {
        self.sft_ids.len() + self.rl_ids.len()
    }

    /// Union of both sides; equals the scored corpus by construction.
    pub fn all_ids(&self) -> BTreeSet<String> {
        self.sft_ids.union(&self.rl_ids).cloned().collect()
    }
}

/// Splits at the median score: `score <= median` routes to SFT, anything
/// strictly above to RL. An even count takes the mean of the two central
/// order statistics. If every trajectory ties (RL empty), the partition is
/// flagged degenerate and a warning is logged.
pub fn median_split(scores: &ScoreSet) -> Result<Partition, RouterError> {
    if scores.is_empty() {
        return Err(RouterError::EmptyCorpus);
    }
    let mut values: Vec<f64> = scores.entries.values().copied().collect();
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let threshold = if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    };

    let mut sft_ids = BTreeSet::new();
    let mut rl_ids = BTreeSet::new();
    for (id, &score) in &scores.entries {
        if score <= threshold {
            sft_ids.insert(id.clone());
        } else {
            rl_ids.insert(id.clone());
        }
    }
    let degenerate = sft_ids.is_empty() || rl_ids.is_empty();
    if degenerate {
        log::warn!(
            "median split of {} trajectories is one-sided (threshold {threshold}); \
             every trajectory routed to SFT",
            n
        );
    }
    Ok(Partition {
        metric_name: scores.metric.name().to_string(),
        rule: RoutingRule::Median,
        threshold,
        sft_ids,
        rl_ids,
        degenerate,
    })
}

/// Routes the `ceil(rl_fraction * n)` highest-scoring trajectories to RL.
/// Ties at the cut break by ascending trajectory id, so partitions for
/// growing fractions nest.
pub fn quantile_split(scores: &ScoreSet, rl_fraction: f64) -> Result<Partition, RouterError> {
    if !(rl_fraction > 0.0 && rl_fraction < 1.0) {
        return Err(RouterError::BadFraction(rl_fraction));
    }
    if scores.is_empty() {
        return Err(RouterError::EmptyCorpus);
    }
    let n = scores.len();
    let rl_count = ((rl_fraction * n as f64).ceil() as usize).min(n);

    let mut order: Vec<(&String, f64)> = scores.entries.iter().map(|(id, &s)| (id, s)).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let rl_ids: BTreeSet<String> = order[..rl_count]
        .iter()
        .map(|(id, _)| (*id).clone())
        .collect();
    let sft_ids: BTreeSet<String> = order[rl_count..]
        .iter()
        .map(|(id, _)| (*id).clone())
        .collect();
    let threshold = order[rl_count - 1].1;
    let degenerate = sft_ids.is_empty() || rl_ids.is_empty();
    if degenerate {
        log::warn!("quantile split at {rl_fraction} routed all {n} trajectories to one side");
    }
    Ok(Partition {
        metric_name: scores.metric.name().to_string(),
        rule: RoutingRule::Quantile { rl_fraction },
        threshold,
        sft_ids,
        rl_ids,
        degenerate,
    })
}

/// Swaps the two sides, e.g. to train on the allocation a metric argues
/// against. Applying it twice returns the original partition.
pub fn inverse_partition(partition: &Partition) -> Partition {
    let rule = match &partition.rule {
        RoutingRule::InverseOf { inner } => (**inner).clone(),
        other => RoutingRule::InverseOf {
            inner: Box::new(other.clone()),
        },
    };
    Partition {
        metric_name: partition.metric_name.clone(),
        rule,
        threshold: partition.threshold,
        sft_ids: partition.rl_ids.clone(),
        rl_ids: partition.sft_ids.clone(),
        degenerate: partition.degenerate,
    }
}
