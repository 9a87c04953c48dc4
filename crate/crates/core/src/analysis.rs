//! Agreement and robustness analysis across metrics and partitions.
//!
//! Consensus reports carry the RL-intersection under two normalizations,
//! because both are in routine use: dividing by the mean RL size answers
//! "how much of the RL half is shared" (1.0 for identical partitions),
//! while dividing by the corpus size matches the analytic expectation for
//! independent splits (`prod f_i`, 0.125 for three fair halves).

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{score_corpus, Metric, MetricsError, ScoreSet};
use crate::probe::GradientVector;
use crate::router::{quantile_split, Partition, RouterError};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("need at least two partitions, got {0}")]
    TooFewPartitions(usize),
    #[error("partition {index} ({name}) covers a different corpus than the first")]
    CorpusMismatch { index: usize, name: String },
    #[error("duplicate partition name {0}")]
    DuplicateName(String),
    #[error("partitions cover an empty corpus")]
    EmptyCorpus,
    #[error("score sets cover different trajectory ids")]
    IdMismatch,
    #[error("need at least two paired scores, got {0}")]
    TooFewPairs(usize),
    #[error("all ranks tied on one side; rank correlation is undefined")]
    DegenerateRanks,
    #[error("fractions list is empty")]
    NoFractions,
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Cross-metric overlap of RL halves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub partition_names: Vec<String>,
    pub corpus_size: usize,
    pub rl_sizes: BTreeMap<String, usize>,
    /// Jaccard overlap of RL sets per partition pair, keyed `"a|b"`.
    pub pairwise_rl_jaccard: BTreeMap<String, f64>,
    /// Trajectories routed to RL by every partition.
    pub rl_intersection_count: usize,
    /// Intersection over the mean RL size: exactly 1.0 when all partitions
    /// agree, whatever the split fraction.
    pub rl_intersection_fraction_of_rl: f64,
    /// Intersection over the corpus size; independent fair halves give
    /// 0.125 in expectation for three partitions.
    pub rl_intersection_fraction_of_corpus: f64,
    /// Analytic independent-split expectation of the `of_rl` fraction.
    pub random_baseline_of_rl: f64,
    /// Analytic independent-split expectation of the `of_corpus` fraction:
    /// the product of the observed RL fractions.
    pub random_baseline_of_corpus: f64,
}

/// Measures how consistently the partitions route the same trajectories to
/// RL. All partitions must cover the same corpus.
pub fn consensus(partitions: &[(String, Partition)]) -> Result<ConsensusReport, AnalysisError> {
    if partitions.len() < 2 {
        return Err(AnalysisError::TooFewPartitions(partitions.len()));
    }
    let mut seen = BTreeSet::new();
    for (name, _) in partitions {
        if !seen.insert(name.clone()) {
            return Err(AnalysisError::DuplicateName(name.clone()));
        }
    }
    let corpus = partitions[0].1.all_ids();
    if corpus.is_empty() {
        return Err(AnalysisError::EmptyCorpus);
    }
    for (index, (name, p)) in partitions.iter().enumerate().skip(1) {
        if p.all_ids() != corpus {
            return Err(AnalysisError::CorpusMismatch {
                index,
                name: name.clone(),
            });
        }
    }
    let n = corpus.len();

    let mut pairwise_rl_jaccard = BTreeMap::new();
    for (i, (name_a, pa)) in partitions.iter().enumerate() {
        for (name_b, pb) in &partitions[i + 1..] {
            let inter = pa.rl_ids.intersection(&pb.rl_ids).count();
            let union = pa.rl_ids.union(&pb.rl_ids).count();
            let jaccard = if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            };
            pairwise_rl_jaccard.insert(format!("{name_a}|{name_b}"), jaccard);
        }
    }

    let mut intersection: BTreeSet<&String> = partitions[0].1.rl_ids.iter().collect();
    for (_, p) in &partitions[1..] {
        intersection.retain(|id| p.rl_ids.contains(*id));
    }
    let rl_intersection_count = intersection.len();

    let rl_sizes: BTreeMap<String, usize> = partitions
        .iter()
        .map(|(name, p)| (name.clone(), p.rl_ids.len()))
        .collect();
    let mean_rl = partitions
        .iter()
        .map(|(_, p)| p.rl_ids.len() as f64)
        .sum::<f64>()
        / partitions.len() as f64;
    let rl_intersection_fraction_of_rl = if mean_rl > 0.0 {
        rl_intersection_count as f64 / mean_rl
    } else {
        0.0
    };
    let rl_intersection_fraction_of_corpus = rl_intersection_count as f64 / n as f64;

    let fractions: Vec<f64> = partitions
        .iter()
        .map(|(_, p)| p.rl_ids.len() as f64 / n as f64)
        .collect();
    let product: f64 = fractions.iter().product();
    let mean_fraction = fractions.iter().sum::<f64>() / fractions.len() as f64;
    let random_baseline_of_rl = if mean_fraction > 0.0 {
        product / mean_fraction
    } else {
        0.0
    };

    Ok(ConsensusReport {
        partition_names: partitions.iter().map(|(name, _)| name.clone()).collect(),
        corpus_size: n,
        rl_sizes,
        pairwise_rl_jaccard,
        rl_intersection_count,
        rl_intersection_fraction_of_rl,
        rl_intersection_fraction_of_corpus,
        random_baseline_of_rl,
        random_baseline_of_corpus: product,
    })
}

/// Monte-Carlo companion to the analytic baselines in [`ConsensusReport`]:
/// draws `trials` rounds of independent random subsets with the given RL
/// fractions and averages the intersection fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McBaseline {
    pub trials: u32,
    pub mean_intersection_fraction_of_rl: f64,
    pub mean_intersection_fraction_of_corpus: f64,
}

pub fn random_split_baseline(
    corpus_size: usize,
    rl_fractions: &[f64],
    trials: u32,
    seed: u64,
) -> McBaseline {
    assert!(corpus_size > 0, "corpus_size must be positive");
    assert!(trials > 0, "trials must be positive");
    assert!(
        rl_fractions.iter().all(|f| *f > 0.0 && *f < 1.0),
        "fractions must lie in (0, 1)"
    );
    let n = corpus_size;
    let counts: Vec<usize> = rl_fractions
        .iter()
        .map(|f| ((f * n as f64).ceil() as usize).min(n))
        .collect();
    let mean_rl = counts.iter().sum::<usize>() as f64 / counts.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<u32> = (0..n as u32).collect();
    let mut hits = vec![0u8; n];
    let mut sum_of_rl = 0.0;
    let mut sum_of_corpus = 0.0;
    for _ in 0..trials {
        hits.fill(0);
        for &count in &counts {
            // partial Fisher-Yates: the first `count` entries become the subset
            for i in 0..count {
                let j = rng.gen_range(i..n);
                idx.swap(i, j);
                hits[idx[i] as usize] += 1;
            }
        }
        let inter = hits.iter().filter(|&&h| h as usize == counts.len()).count();
        sum_of_rl += inter as f64 / mean_rl;
        sum_of_corpus += inter as f64 / n as f64;
    }
    McBaseline {
        trials,
        mean_intersection_fraction_of_rl: sum_of_rl / trials as f64,
        mean_intersection_fraction_of_corpus: sum_of_corpus / trials as f64,
    }
}

/// Average ranks (1-based; ties share the mean of their run). Average ranks
/// of a run of consecutive integers are half-integers, so they are exact.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &original in &order[i..=j] {
            ranks[original] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Exact 1.0 / -1.0
/// on identical or reversed rankings; errors if either side has all ranks
/// tied.
pub fn spearman(a: &ScoreSet, b: &ScoreSet) -> Result<f64, AnalysisError> {
    if a.entries.len() != b.entries.len() || !a.entries.keys().eq(b.entries.keys()) {
        return Err(AnalysisError::IdMismatch);
    }
    let n = a.entries.len();
    if n < 2 {
        return Err(AnalysisError::TooFewPairs(n));
    }
    let va: Vec<f64> = a.entries.values().copied().collect();
    let vb: Vec<f64> = b.entries.values().copied().collect();
    let ra = average_ranks(&va);
    let rb = average_ranks(&vb);

    let flat = |r: &[f64]| r.iter().all(|&x| x == r[0]);
    if flat(&ra) || flat(&rb) {
        return Err(AnalysisError::DegenerateRanks);
    }
    if ra == rb {
        return Ok(1.0);
    }
    let mirror = (n + 1) as f64;
    if ra.iter().zip(&rb).all(|(&x, &y)| x + y == mirror) {
        return Ok(-1.0);
    }

    let mean = mirror / 2.0; // rank sum is always n(n+1)/2
    let mut s_ab = 0.0;
    let mut s_aa = 0.0;
    let mut s_bb = 0.0;
    for (&x, &y) in ra.iter().zip(&rb) {
        let dx = x - mean;
        let dy = y - mean;
        s_ab += dx * dy;
        s_aa += dx * dx;
        s_bb += dy * dy;
    }
    // sqrt of the product, not the product of sqrts: the sums are exact
    // quarter-integers, so perfect squares stay perfect
    Ok((s_ab / (s_aa * s_bb).sqrt()).clamp(-1.0, 1.0))
}

/// One row of a routing-ratio sweep. `downstream_score` stays empty here;
/// external evaluation pipelines fill it in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rl_fraction: f64,
    pub sft_size: usize,
    pub rl_size: usize,
    pub threshold: f64,
    pub downstream_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub metric_name: String,
    pub corpus_size: usize,
    pub rows: Vec<SweepRow>,
    /// Checked during the sweep: every smaller fraction's RL set is
    /// contained in the next one's.
    pub nesting_verified: bool,
}

/// Quantile-splits the same scores at each fraction, ascending. Fractions
/// must lie strictly in (0, 1).
pub fn ratio_sweep(scores: &ScoreSet, fractions: &[f64]) -> Result<SweepReport, AnalysisError> {
    if fractions.is_empty() {
        return Err(AnalysisError::NoFractions);
    }
    for &f in fractions {
        if !(f > 0.0 && f < 1.0) {
            return Err(AnalysisError::Router(RouterError::BadFraction(f)));
        }
    }
    let mut ordered = fractions.to_vec();
    ordered.sort_by(f64::total_cmp);

    let mut rows = Vec::with_capacity(ordered.len());
    let mut nesting_verified = true;
    let mut previous: Option<Partition> = None;
    for &rl_fraction in &ordered {
        let p = quantile_split(scores, rl_fraction)?;
        if let Some(prev) = &previous {
            nesting_verified &= prev.rl_ids.is_subset(&p.rl_ids);
        }
        rows.push(SweepRow {
            rl_fraction,
            sft_size: p.sft_ids.len(),
            rl_size: p.rl_ids.len(),
            threshold: p.threshold,
            downstream_score: None,
        });
        previous = Some(p);
    }
    Ok(SweepReport {
        metric_name: scores.metric.name().to_string(),
        corpus_size: scores.len(),
        rows,
        nesting_verified,
    })
}

/// Rank agreement between raw and parameter-count-normalized scores under
/// one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub metric: Metric,
    pub corpus_size: usize,
    /// None when the ranking collapsed to ties on either side.
    pub rho: Option<f64>,
    pub degenerate: bool,
}

/// Scores the corpus twice (raw and normalized) and reports the Spearman
/// correlation of the two rankings.
pub fn normalization_robustness(
    vectors: &[GradientVector],
    metric: Metric,
) -> Result<RobustnessReport, AnalysisError> {
    let raw = score_corpus(vectors, metric, false)?;
    let normalized = score_corpus(vectors, metric, true)?;
    match spearman(&raw, &normalized) {
        Ok(rho) => Ok(RobustnessReport {
            metric,
            corpus_size: raw.len(),
            rho: Some(rho),
            degenerate: false,
        }),
        Err(AnalysisError::DegenerateRanks) => Ok(RobustnessReport {
            metric,
            corpus_size: raw.len(),
            rho: None,
            degenerate: true,
        }),
        Err(other) => Err(other),
    }
}
