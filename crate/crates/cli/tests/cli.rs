use std::fs;
use std::path::Path;
use std::process::Command;

use ipa_cli::config::{Algorithm, ExperimentConfig};
use ipa_cli::run::{read_jsonl, MetricRow};
use ipa_cli::{report, run_experiment};

const BIN: &str = env!("CARGO_BIN_EXE_ipa");

fn config(peers: usize) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!(
        r#"
[data]
source = "synthetic"
classes = 4
dims = 12
train_per_class = 100
test_per_class = 40
spread = 1.5
seed = 3

[model]
hidden = [10]

[partition]
kind = "dirichlet"
num_peers = {peers}
alpha = 0.5
seed = 1

[federation]
num_peers = {peers}
rounds = 5
seed = 4

[federation.align]
lambda = 0.01

[federation.sgd]
lr = 0.05
"#
    ))
    .unwrap()
}

const DETERMINISTIC: [&str; 6] = [
    "metrics.jsonl",
    "train.jsonl",
    "comparison.csv",
    "summary.json",
    "checkpoint.ipa",
    "config.toml",
];

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(3);
    run_experiment(&cfg, &dir.path().join("a")).unwrap();
    run_experiment(&cfg, &dir.path().join("b")).unwrap();
    for f in DETERMINISTIC {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn saved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&config(3), &dir.path().join("a")).unwrap();
    let saved = ExperimentConfig::load(&dir.path().join("a/config.toml")).unwrap();
    run_experiment(&saved, &dir.path().join("b")).unwrap();
    assert_eq!(
        fs::read(dir.path().join("a/metrics.jsonl")).unwrap(),
        fs::read(dir.path().join("b/metrics.jsonl")).unwrap()
    );
}

#[test]
fn unreached_target_reports_a_dash() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&config(3), dir.path()).unwrap();
    let r = report(dir.path(), &[99.99, 0.01]).unwrap();
    assert_eq!(r.rounds_to_target[0].1, None);
    assert_eq!(r.rounds_to_target[1].1, Some(1));
    let csv = fs::read_to_string(dir.path().join("report/rounds_to_target.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("99.99,—,—"), "{csv}");
    assert!(r.warnings.is_empty(), "{:?}", r.warnings);
}

#[test]
fn ten_peer_hamming_matrix_is_symmetric_with_zero_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(10);
    cfg.federation.rounds = 2;
    run_experiment(&cfg, dir.path()).unwrap();
    let r = report(dir.path(), &[]).unwrap();
    assert_eq!(r.hamming.len(), 10);
    for i in 0..10 {
        assert_eq!(r.hamming[i][i], 0);
        for j in 0..10 {
            assert_eq!(r.hamming[i][j], r.hamming[j][i]);
        }
    }
    assert_eq!(r.hamming_round, Some(2));
    let csv = fs::read_to_string(dir.path().join("report/hamming.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn fairness_is_recomputable_from_raw_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(4);
    cfg.metrics.fairness = Some(ipa_cli::config::FairnessConfig {
        window: (2, 4),
        criterion: ipa_core::metrics::Criterion::Loss,
    });
    let summary = run_experiment(&cfg, dir.path()).unwrap();

    let rows: Vec<MetricRow> = read_jsonl(&dir.path().join("metrics.jsonl")).unwrap();
    let xi: Vec<f64> = (0..4)
        .map(|p| {
            let w: Vec<f64> = rows
                .iter()
                .filter(|r| r.peer == p && (2..=4).contains(&r.round))
                .map(|r| -r.test_loss)
                .collect();
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect();
    let standalone = fs::read_to_string(dir.path().join("standalone.csv")).unwrap();
    let phi: Vec<f64> = (0..4)
        .map(|p| {
            standalone
                .lines()
                .skip(1)
                .map(|l| l.split(',').collect::<Vec<_>>())
                .find(|f| f[0] == p.to_string() && f[1] == "4")
                .map(|f| f[2].parse().unwrap())
                .unwrap()
        })
        .collect();
    let rho = 100.0 * pearson(&phi, &xi);
    assert!((summary.rho_scaled.unwrap() - rho).abs() < 1e-9);
    let r = report(dir.path(), &[]).unwrap();
    assert!((r.rho_scaled.unwrap() - rho).abs() < 1e-9);
}

#[test]
fn standalone_run_yields_one_score_per_peer() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(3);
    cfg.algorithm = Algorithm::Standalone;
    let s = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(s.final_accuracy.len(), 3);
    assert_eq!(s.rounds_run, 5);
}

#[test]
fn fedavg_run_records_the_global_model_for_every_peer() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(3);
    cfg.algorithm = Algorithm::Fedavg;
    let s = run_experiment(&cfg, dir.path()).unwrap();
    assert!(s.final_accuracy.iter().all(|&a| a == s.final_accuracy[0]));
}

#[test]
fn missing_summary_gives_a_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&config(3), dir.path()).unwrap();
    fs::remove_file(dir.path().join("summary.json")).unwrap();
    let r = report(dir.path(), &[]).unwrap();
    assert!(r.warnings.iter().any(|w| w.contains("partial")));
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn ring_mode_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(3);
    cfg.federation.order = ipa_core::federation::Order::RandomPermutation;
    let path = write_config(dir.path(), &cfg);
    for (mode, out) in [("ring", "ring"), ("inprocess", "local")] {
        let status = Command::new(BIN)
            .args(["run", "--mode", mode, "--config"])
            .arg(&path)
            .arg("--out")
            .arg(dir.path().join(out))
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        assert!(status.success(), "{mode} run failed");
    }
    for f in ["checkpoint.ipa", "metrics.jsonl", "summary.json"] {
        assert_eq!(
            fs::read(dir.path().join("ring").join(f)).unwrap(),
            fs::read(dir.path().join("local").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &config(3));
    let out = dir.path().join("o");
    let status = Command::new(BIN)
        .args(["run", "--algorithm", "fedavg", "--rounds", "2", "--seed", "11", "--lambda", "0.5", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success());
    let saved = ExperimentConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(saved.algorithm, Algorithm::Fedavg);
    assert_eq!(saved.federation.rounds, 2);
    assert_eq!((saved.federation.seed, saved.partition.seed), (11, 11));
    assert_eq!(saved.federation.align.lambda, 0.5);
}

#[test]
fn errors_exit_nonzero_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(3);
    // the partition still splits three ways
    cfg.federation.num_peers = 2;
    let path = write_config(dir.path(), &cfg);
    let out = Command::new(BIN)
        .args(["run", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("partition has 3 peers, federation has 2"), "{err}");
}

#[test]
fn data_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = config(3).data.load().unwrap();
    train
        .write_idx(&dir.path().join("train-images-idx3-ubyte"), &dir.path().join("train-labels-idx1-ubyte"))
        .unwrap();
    test.write_idx(&dir.path().join("t10k-images-idx3-ubyte"), &dir.path().join("t10k-labels-idx1-ubyte"))
        .unwrap();
    let mut cfg = config(3);
    cfg.data = ipa_cli::DataConfig::mnist();
    cfg.federation.rounds = 1;
    let path = write_config(dir.path(), &cfg);
    let status = Command::new(BIN)
        .args(["run", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("o"))
        .env("IPA_DATA_DIR", dir.path())
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success());
}
