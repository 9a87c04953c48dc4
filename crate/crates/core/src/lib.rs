//! Gradient-concentration scoring and data routing for post-training corpora.
//!
//! The pipeline has three stages:
//!
//! 1. [`probe`] runs a single backward pass per trajectory on a small
//!    decoder-only transformer and records one Frobenius norm per projection
//!    matrix (7 per layer), without touching the model parameters.
//! 2. [`metrics`] condenses each norm vector into a scalar concentration
//!    score (Gini, excess kurtosis, coefficient of variation, or a plain
//!    L2-magnitude baseline).
//! 3. [`router`] splits the scored corpus into a low-conflict half (suited
//!    to supervised fine-tuning) and a high-conflict half (suited to RL),
//!    by median or by an explicit quantile.
//!
//! [`analysis`] adds cross-metric consensus, rank-correlation robustness and
//! ratio sweeps; [`io`] defines the line-delimited interchange formats.

pub mod analysis;
pub mod io;
pub mod metrics;
pub mod probe;
pub mod router;

pub use analysis::{ConsensusReport, RobustnessReport, SweepReport, SweepRow};
pub use metrics::{Metric, ScoreSet};
pub use probe::{GradientVector, ProbeModel, ProbeModelConfig, Trajectory};
pub use router::{Partition, RoutingRule};
