//! One function per subcommand, all returning [`CliError`] so `main` can map
//! outcomes onto the documented exit codes.

use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use gradsift_core::analysis::{
    consensus, normalization_robustness, random_split_baseline, ratio_sweep, spearman,
    AnalysisError, ConsensusReport, McBaseline,
};
use gradsift_core::io::{
    read_gradient_dump, read_partition_manifest, read_scores, read_trajectory_corpus,
    write_gradient_dump, write_json_report, write_partition_manifest, write_scores,
    PartitionManifest,
};
use gradsift_core::metrics::{score_corpus_eps, Metric, EPSILON};
use gradsift_core::probe::{init_model, probe_gradients};
use gradsift_core::router::{inverse_partition, median_split, quantile_split};

use crate::config::{resolve_path, PipelineConfig};
use crate::{AnalyzeCommand, CliError, Command, ProbeArgs, RouteArgs, ScoreArgs};

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Probe(args) => cmd_probe(args),
        Command::Score(args) => cmd_score(args),
        Command::Route(args) => cmd_route(args),
        Command::Analyze(args) => cmd_analyze(args),
    }
}

/// The library writers do not invent directories; the CLI does, as a courtesy.
fn ensure_parent(path: &std::path::Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("{}: {e}", dir.display()))),
        _ => Ok(()),
    }
}

/// Worker count comes from GRADSIFT_WORKERS when set, else rayon's default.
fn worker_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var("GRADSIFT_WORKERS") {
        let workers: usize = raw.parse().map_err(|_| {
            CliError::Validation(format!(
                "GRADSIFT_WORKERS must be a positive integer, got {raw:?}"
            ))
        })?;
        if workers == 0 {
            return Err(CliError::Validation(
                "GRADSIFT_WORKERS must be a positive integer, got 0".into(),
            ));
        }
        builder = builder.num_threads(workers);
    }
    builder
        .build()
        .map_err(|e| CliError::Validation(format!("cannot build worker pool: {e}")))
}

fn cmd_probe(args: ProbeArgs) -> Result<(), CliError> {
    let config = PipelineConfig::load(&args.config)?;
    let corpus_path = resolve_path(
        args.corpus,
        config.paths.corpus.as_ref(),
        "corpus",
        "corpus",
    )?;
    let out = resolve_path(args.out, config.paths.dump.as_ref(), "dump output", "dump")?;

    let started = Instant::now();
    let loaded =
        read_trajectory_corpus(&corpus_path, config.model.vocab_size, config.context_length)?;
    if loaded.trajectories.is_empty() {
        return Err(CliError::Validation(format!(
            "{}: no usable trajectories ({} skipped as fully truncated)",
            corpus_path.display(),
            loaded.skipped_ids.len()
        )));
    }

    let model = init_model(config.model_config(args.seed))?;
    // results land in corpus order no matter how the pool schedules them
    let vectors = worker_pool()?.install(|| {
        loaded
            .trajectories
            .par_iter()
            .map(|t| probe_gradients(&model, t))
            .collect::<Result<Vec<_>, _>>()
    })?;
    ensure_parent(&out)?;
    write_gradient_dump(&out, &vectors)?;
    println!(
        "probed {} trajectories ({} skipped) in {:.2}s -> {}",
        vectors.len(),
        loaded.skipped_ids.len(),
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<(), CliError> {
    let config = args
        .config
        .as_deref()
        .map(PipelineConfig::load)
        .transpose()?;
    let paths = config.as_ref().map(|c| &c.paths);
    let dump_path = resolve_path(
        args.dump,
        paths.and_then(|p| p.dump.as_ref()),
        "gradient dump",
        "dump",
    )?;
    let out = resolve_path(
        args.out,
        paths.and_then(|p| p.scores.as_ref()),
        "score output",
        "scores",
    )?;
    let metric = match args.metric {
        Some(m) => m,
        // config strings were already validated at load time
        None => config
            .as_ref()
            .and_then(|c| c.routing.metric.as_deref())
            .map(|name| Metric::from_str(name).expect("validated at load"))
            .unwrap_or(Metric::Gini),
    };
    let normalized = args.normalized || config.as_ref().is_some_and(|c| c.routing.normalized);
    let epsilon = config.as_ref().map_or(EPSILON, |c| c.epsilon);

    let vectors = read_gradient_dump(&dump_path)?;
    let scores = score_corpus_eps(&vectors, metric, normalized, epsilon)?;
    if !scores.degenerate_ids.is_empty() {
        log::warn!(
            "{} trajectories had constant norm vectors; their kurtosis is pinned at -3",
            scores.degenerate_ids.len()
        );
    }
    ensure_parent(&out)?;
    write_scores(&out, &scores)?;
    println!(
        "scored {} trajectories with {}{} -> {}",
        scores.len(),
        metric,
        if normalized { " (normalized)" } else { "" },
        out.display()
    );
    Ok(())
}

fn cmd_route(args: RouteArgs) -> Result<(), CliError> {
    let config = args
        .config
        .as_deref()
        .map(PipelineConfig::load)
        .transpose()?;
    let paths = config.as_ref().map(|c| &c.paths);
    let scores_path = resolve_path(
        args.scores,
        paths.and_then(|p| p.scores.as_ref()),
        "score file",
        "scores",
    )?;
    let out = resolve_path(
        args.out,
        paths.and_then(|p| p.manifest.as_ref()),
        "manifest output",
        "manifest",
    )?;
    let routing = config.as_ref().map(|c| &c.routing);
    let rule = args
        .rule
        .or_else(|| routing.and_then(|r| r.rule.clone()))
        .unwrap_or_else(|| "median".to_string());
    let fraction = args
        .rl_fraction
        .or_else(|| routing.and_then(|r| r.rl_fraction));

    let scores = read_scores(&scores_path)?;
    let partition = match rule.as_str() {
        "median" => median_split(&scores)?,
        "quantile" => {
            let f = fraction.ok_or_else(|| {
                CliError::Validation("--rl-fraction is required with --rule quantile".into())
            })?;
            quantile_split(&scores, f)?
        }
        other => {
            return Err(CliError::Validation(format!(
                "unknown rule {other:?}, expected median|quantile"
            )))
        }
    };
    let partition = if args.inverse {
        inverse_partition(&partition)
    } else {
        partition
    };
    if partition.degenerate {
        log::warn!("degenerate split: one side is empty (all scores equal?)");
    }
    let manifest = PartitionManifest::new(partition, &scores);
    ensure_parent(&out)?;
    write_partition_manifest(&out, &manifest)?;
    println!(
        "routed {} trajectories: {} SFT / {} RL under {} (threshold {}) -> {}",
        manifest.partition.corpus_size(),
        manifest.partition.sft_ids.len(),
        manifest.partition.rl_ids.len(),
        manifest.partition.rule,
        manifest.partition.threshold,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ConsensusDocument {
    #[serde(flatten)]
    report: ConsensusReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    mc_baseline: Option<McBaseline>,
}

#[derive(Serialize)]
struct SpearmanDocument {
    left_metric: String,
    left_normalized: bool,
    right_metric: String,
    right_normalized: bool,
    corpus_size: usize,
    /// None when either ranking is all ties.
    rho: Option<f64>,
    degenerate: bool,
}

fn cmd_analyze(command: AnalyzeCommand) -> Result<(), CliError> {
    match command {
        AnalyzeCommand::Consensus {
            manifests,
            baseline_trials,
            seed,
            out,
        } => {
            let mut partitions = Vec::with_capacity(manifests.len());
            for (index, path) in manifests.iter().enumerate() {
                let manifest = read_partition_manifest(path)?;
                let base = manifest.partition.metric_name.clone();
                // two manifests may share a metric (raw vs normalized, say)
                let name = if partitions.iter().any(|(n, _)| *n == base) {
                    format!("{base}#{index}")
                } else {
                    base
                };
                partitions.push((name, manifest.partition));
            }
            let report = consensus(&partitions)?;
            let fractions: Vec<f64> = report
                .rl_sizes
                .values()
                .map(|&s| s as f64 / report.corpus_size as f64)
                .collect();
            let mc_baseline =
                if baseline_trials > 0 && fractions.iter().all(|f| *f > 0.0 && *f < 1.0) {
                    Some(random_split_baseline(
                        report.corpus_size,
                        &fractions,
                        baseline_trials,
                        seed,
                    ))
                } else {
                    if baseline_trials > 0 {
                        log::warn!("skipping Monte-Carlo baseline: a partition has an empty side");
                    }
                    None
                };
            println!(
                "consensus over {} partitions: intersection {} of {} ids ({:.4} of corpus, {:.4} of the RL half) -> {}",
                report.partition_names.len(),
                report.rl_intersection_count,
                report.corpus_size,
                report.rl_intersection_fraction_of_corpus,
                report.rl_intersection_fraction_of_rl,
                out.display()
            );
            ensure_parent(&out)?;
            write_json_report(
                &out,
                &ConsensusDocument {
                    report,
                    mc_baseline,
                },
            )?;
        }
        AnalyzeCommand::Spearman { left, right, out } => {
            let a = read_scores(&left)?;
            let b = read_scores(&right)?;
            let (rho, degenerate) = match spearman(&a, &b) {
                Ok(rho) => (Some(rho), false),
                Err(AnalysisError::DegenerateRanks) => (None, true),
                Err(other) => return Err(other.into()),
            };
            match rho {
                Some(rho) => println!(
                    "spearman rho = {rho} over {} trajectories -> {}",
                    a.len(),
                    out.display()
                ),
                None => println!("spearman undefined (all ranks tied) -> {}", out.display()),
            }
            ensure_parent(&out)?;
            write_json_report(
                &out,
                &SpearmanDocument {
                    left_metric: a.metric.name().to_string(),
                    left_normalized: a.normalized,
                    right_metric: b.metric.name().to_string(),
                    right_normalized: b.normalized,
                    corpus_size: a.len(),
                    rho,
                    degenerate,
                },
            )?;
        }
        AnalyzeCommand::Sweep {
            scores,
            fractions,
            out,
        } => {
            let set = read_scores(&scores)?;
            let report = ratio_sweep(&set, &fractions)?;
            println!(
                "swept {} fractions over {} trajectories (nesting {}) -> {}",
                report.rows.len(),
                report.corpus_size,
                if report.nesting_verified {
                    "verified"
                } else {
                    "BROKEN"
                },
                out.display()
            );
            ensure_parent(&out)?;
            write_json_report(&out, &report)?;
        }
        AnalyzeCommand::NormRobustness { dump, metric, out } => {
            let vectors = read_gradient_dump(&dump)?;
            let report = normalization_robustness(&vectors, metric)?;
            match report.rho {
                Some(rho) => println!(
                    "raw vs normalized {} ranks: rho = {rho} over {} trajectories -> {}",
                    metric,
                    report.corpus_size,
                    out.display()
                ),
                None => println!(
                    "raw vs normalized {} ranks degenerate (all ties) -> {}",
                    metric,
                    out.display()
                ),
            }
            ensure_parent(&out)?;
            write_json_report(&out, &report)?;
        }
    }
    Ok(())
}
