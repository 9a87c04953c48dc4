//! End-to-end checks against the built binary: repeat-run determinism,
//! exit-code discipline, and the analyze report surface.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gradsift_core::io::{write_trajectory_corpus, TrajectoryRecord};

const BIN: &str = env!("CARGO_BIN_EXE_gradsift");

fn gradsift(args: &[&str], workers: Option<&str>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    cmd.env_remove("GRADSIFT_WORKERS");
    if let Some(w) = workers {
        cmd.env("GRADSIFT_WORKERS", w);
    }
    cmd.output().expect("binary should run")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process should not be signalled")
}

const CONFIG: &str = "\
rng_seed = 3735928559
context_length = 16

[model]
num_layers = 2
model_dim = 16
num_heads = 2
ffn_hidden_dim = 24
vocab_size = 64
";

/// Ten trajectories over a 64-token vocabulary. The last one starts its
/// response beyond the 16-token context cut, so probing must skip it.
fn write_demo_corpus(path: &Path) {
    let mut records = Vec::new();
    for i in 0..10u32 {
        let len = if i == 9 { 24 } else { 8 + i as usize };
        let tokens: Vec<u32> = (0..len).map(|j| (i * 7 + j as u32 * 13 + 3) % 64).collect();
        records.push(TrajectoryRecord {
            trajectory_id: format!("t{i:02}"),
            tokens,
            response_start: if i == 9 { 20 } else { 2 + (i as usize % 3) },
            metadata: BTreeMap::new(),
        });
    }
    write_trajectory_corpus(path, &records).unwrap();
}

struct Workspace {
    _dir: tempfile::TempDir,
    config: PathBuf,
    corpus: PathBuf,
    root: PathBuf,
}

fn setup() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("pipeline.toml");
    let corpus = root.join("corpus.jsonl");
    fs::write(&config, CONFIG).unwrap();
    write_demo_corpus(&corpus);
    Workspace {
        _dir: dir,
        config,
        corpus,
        root,
    }
}

fn s(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

/// probe -> score -> route into `dir`, returning the three artifact paths.
fn run_pipeline(ws: &Workspace, dir: &str, workers: &str) -> (PathBuf, PathBuf, PathBuf) {
    let out_dir = ws.root.join(dir);
    fs::create_dir_all(&out_dir).unwrap();
    let dump = out_dir.join("dump.jsonl");
    let scores = out_dir.join("scores.jsonl");
    let manifest = out_dir.join("manifest.jsonl");

    let probe = gradsift(
        &[
            "probe",
            "--config",
            &s(&ws.config),
            "--corpus",
            &s(&ws.corpus),
            "--out",
            &s(&dump),
        ],
        Some(workers),
    );
    assert_ok(&probe);
    let stdout = String::from_utf8_lossy(&probe.stdout);
    assert!(
        stdout.contains("probed 9 trajectories (1 skipped)"),
        "probe summary should report the skip: {stdout}"
    );

    assert_ok(&gradsift(
        &["score", &s(&dump), "--metric", "gini", "--out", &s(&scores)],
        None,
    ));
    assert_ok(&gradsift(
        &["route", &s(&scores), "--out", &s(&manifest)],
        None,
    ));
    (dump, scores, manifest)
}

#[test]
fn criterion_11_repeat_runs_are_byte_identical() {
    let ws = setup();
    // different worker counts must not change a single byte of output
    let (dump_a, scores_a, manifest_a) = run_pipeline(&ws, "run-a", "1");
    let (dump_b, scores_b, manifest_b) = run_pipeline(&ws, "run-b", "4");

    for (left, right, what) in [
        (&dump_a, &dump_b, "gradient dump"),
        (&scores_a, &scores_b, "score file"),
        (&manifest_a, &manifest_b, "manifest"),
    ] {
        let a = fs::read(left).unwrap();
        let b = fs::read(right).unwrap();
        assert!(!a.is_empty(), "{what} should not be empty");
        assert_eq!(a, b, "{what} differs between identical runs");
    }
    println!(
        "PASS criterion 11: probe/score/route twice over 10 trajectories (1-worker vs 4-worker) \
         produced byte-identical dump, scores and manifest"
    );
}

#[test]
fn exit_codes_distinguish_usage_validation_and_io() {
    let ws = setup();

    // usage errors come from the argument parser
    assert_eq!(exit_code(&gradsift(&[], None)), 2);
    assert_eq!(
        exit_code(&gradsift(
            &["score", "dump.jsonl", "--metric", "bogus"],
            None
        )),
        2
    );

    // validation: config invariant broken before any file is touched
    let bad_config = ws.root.join("bad.toml");
    fs::write(
        &bad_config,
        CONFIG.replace("context_length = 16", "context_length = 1"),
    )
    .unwrap();
    let out = gradsift(
        &[
            "probe",
            "--config",
            &s(&bad_config),
            "--corpus",
            &s(&ws.corpus),
        ],
        None,
    );
    assert_eq!(
        exit_code(&out),
        3,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    // validation: quantile without a fraction
    let scores = ws.root.join("scores.jsonl");
    fs::write(
        &scores,
        concat!(
            "{\"format\":\"score-set\",\"version\":1,\"metric\":\"gini\",\"normalized\":false}\n",
            "{\"trajectory_id\":\"a\",\"score\":0.25}\n",
            "{\"trajectory_id\":\"b\",\"score\":0.5}\n",
            "{\"trajectory_id\":\"c\",\"score\":0.75}\n",
            "{\"trajectory_id\":\"d\",\"score\":0.9}\n",
        ),
    )
    .unwrap();
    let out = gradsift(
        &[
            "route",
            &s(&scores),
            "--rule",
            "quantile",
            "--out",
            &s(&ws.root.join("m.jsonl")),
        ],
        None,
    );
    assert_eq!(exit_code(&out), 3);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("--rl-fraction"),
        "error should point at the missing flag"
    );

    // I/O: config is fine but the corpus does not exist
    let out = gradsift(
        &[
            "probe",
            "--config",
            &s(&ws.config),
            "--corpus",
            &s(&ws.root.join("nope.jsonl")),
            "--out",
            &s(&ws.root.join("d.jsonl")),
        ],
        None,
    );
    assert_eq!(
        exit_code(&out),
        4,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn analyze_reports_cover_consensus_spearman_sweep_and_robustness() {
    let ws = setup();
    let (dump, scores_gini, _) = run_pipeline(&ws, "base", "2");

    // one manifest per metric over the same dump
    let mut manifests = Vec::new();
    for metric in ["gini", "kurtosis", "cv"] {
        let scores = ws.root.join(format!("{metric}.scores.jsonl"));
        let manifest = ws.root.join(format!("{metric}.manifest.jsonl"));
        assert_ok(&gradsift(
            &["score", &s(&dump), "--metric", metric, "--out", &s(&scores)],
            None,
        ));
        assert_ok(&gradsift(
            &["route", &s(&scores), "--out", &s(&manifest)],
            None,
        ));
        manifests.push(manifest);
    }

    let consensus_out = ws.root.join("consensus.json");
    let mut args = vec!["analyze".to_string(), "consensus".to_string()];
    args.extend(manifests.iter().map(|m| s(m)));
    args.extend([
        "--seed".into(),
        "7".into(),
        "--out".into(),
        s(&consensus_out),
    ]);
    let arg_refs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_ok(&gradsift(&arg_refs, None));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&consensus_out).unwrap()).unwrap();
    assert_eq!(report["corpus_size"], 9);
    assert_eq!(report["partition_names"].as_array().unwrap().len(), 3);
    assert!(report["rl_intersection_fraction_of_corpus"].is_number());
    assert!(report["mc_baseline"]["trials"].is_number());

    // raw vs normalized gini ranks
    let scores_norm = ws.root.join("gini-norm.scores.jsonl");
    assert_ok(&gradsift(
        &[
            "score",
            &s(&dump),
            "--metric",
            "gini",
            "--normalized",
            "--out",
            &s(&scores_norm),
        ],
        None,
    ));
    let spearman_out = ws.root.join("spearman.json");
    assert_ok(&gradsift(
        &[
            "analyze",
            "spearman",
            &s(&scores_gini),
            &s(&scores_norm),
            "--out",
            &s(&spearman_out),
        ],
        None,
    ));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&spearman_out).unwrap()).unwrap();
    assert_eq!(report["corpus_size"], 9);
    let rho = report["rho"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&rho), "rho out of range: {rho}");

    let sweep_out = ws.root.join("sweep.json");
    assert_ok(&gradsift(
        &[
            "analyze",
            "sweep",
            &s(&scores_gini),
            "--fractions",
            "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9",
            "--out",
            &s(&sweep_out),
        ],
        None,
    ));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&sweep_out).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 9);
    assert_eq!(report["nesting_verified"], true);

    let robustness_out = ws.root.join("robustness.json");
    assert_ok(&gradsift(
        &[
            "analyze",
            "norm-robustness",
            &s(&dump),
            "--metric",
            "gini",
            "--out",
            &s(&robustness_out),
        ],
        None,
    ));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&robustness_out).unwrap()).unwrap();
    assert_eq!(report["metric"], "gini");
    assert_eq!(report["corpus_size"], 9);
}
