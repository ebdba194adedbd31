//! In-process experiment execution and the files it leaves behind.
//!
//! A run directory holds:
//! - `config.toml` the resolved config (re-runnable as is)
//! - `metrics.jsonl` one row per (round, peer): `round, peer, test_accuracy, test_loss`
//! - `train.jsonl` one row per (round, peer): `round, peer, batches, train_loss, penalty`
//! - `timing.jsonl` wallclock seconds per (round, peer); the only nondeterministic file
//! - `partition.csv` `peer_id,class_id,count`
//! - `comparison.csv` `round,peer_i,peer_j,l1_param_dist,l2_param_dist,hamming,both_correct,both_incorrect,test_size`
//! - `standalone.csv` `peer,epoch,test_accuracy,test_loss` (fairness runs only)
//! - `fairness.json`, `summary.json`, `checkpoint.ipa`

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use ipa_core::alignment::PeerParameterStore;
use ipa_core::checkpoint::save_checkpoint;
use ipa_core::data::Dataset;
use ipa_core::federation::{
    early_stop_round, rounds_to_target, rounds_to_target_per_peer, run_fedavg, run_ipa, train_standalone,
    EarlyStop, LocalStats, PeerRecord, RoundHistory, RoundView,
};
use ipa_core::metrics::{compare_evaluated, evaluate, fairness_correlation, Evaluation, FairnessReport, ModelComparisonReport};
use ipa_core::nn::ParameterSet;
use ipa_core::partition::{partition, partition_stats};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, ExperimentConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: usize,
    pub peer: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub round: usize,
    pub peer: usize,
    pub batches: usize,
    pub train_loss: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub round: usize,
    pub peer_i: usize,
    pub peer_j: usize,
    #[serde(flatten)]
    pub report: ModelComparisonReport,
}

pub const COMPARISON_HEADER: &str =
    "round,peer_i,peer_j,l1_param_dist,l2_param_dist,hamming,both_correct,both_incorrect,test_size";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: Algorithm,
    pub num_peers: usize,
    pub rounds_run: usize,
    pub final_accuracy: Vec<f64>,
    pub final_loss: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    /// First round in which any peer reached the target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds_to_target: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rounds_to_target_per_peer: Vec<Option<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop: Option<EarlyStop>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_scaled: Option<f64>,
}

impl Summary {
    pub fn from_history(cfg: &ExperimentConfig, history: &RoundHistory) -> Self {
        let last = history.records.last();
        let target = cfg.federation.target_accuracy;
        Summary {
            algorithm: cfg.algorithm,
            num_peers: history.num_peers,
            rounds_run: history.rounds(),
            final_accuracy: last.map(|r| r.iter().map(|p| p.test_accuracy).collect()).unwrap_or_default(),
            final_loss: last.map(|r| r.iter().map(|p| p.test_loss).collect()).unwrap_or_default(),
            target_accuracy: target,
            rounds_to_target: target.and_then(|t| rounds_to_target(history, t)),
            rounds_to_target_per_peer: target.map(|t| rounds_to_target_per_peer(history, t)).unwrap_or_default(),
            early_stop: None,
            rho_scaled: None,
        }
    }
}

/// Everything a finished run produced, in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: Summary,
    pub history: RoundHistory,
    pub train: Vec<TrainRow>,
    pub comparisons: Vec<ComparisonRow>,
    pub final_store: PeerParameterStore,
    pub standalone: Vec<Vec<Evaluation>>,
    pub fairness: Option<FairnessReport>,
    pub partition_csv: String,
}

pub fn metric_rows(history: &RoundHistory) -> Vec<MetricRow> {
    history
        .records
        .iter()
        .flatten()
        .map(|r| MetricRow {
            round: r.round,
            peer: r.peer,
            test_accuracy: r.test_accuracy,
            test_loss: r.test_loss,
        })
        .collect()
}

/// Rebuild a history from metric rows (wallclock is not kept).
pub fn history_from_rows(num_peers: usize, rows: &[MetricRow]) -> Result<RoundHistory> {
    let mut history = RoundHistory::new(num_peers);
    for (r, chunk) in rows.chunks(num_peers).enumerate() {
        let records = chunk
            .iter()
            .map(|m| PeerRecord {
                round: m.round,
                peer: m.peer,
                test_accuracy: m.test_accuracy,
                test_loss: m.test_loss,
                wallclock: 0.0,
            })
            .collect();
        history
            .push((0..num_peers).collect(), records)
            .with_context(|| format!("metric rows for round {}", r + 1))?;
    }
    Ok(history)
}

fn compare_all(
    round: usize,
    params: &[&ParameterSet],
    evals: &[Evaluation],
    labels: &[usize],
) -> ipa_core::Result<Vec<ComparisonRow>> {
    let mut rows = Vec::new();
    for i in 0..params.len() {
        for j in i + 1..params.len() {
            let report = compare_evaluated(params[i], params[j], &evals[i].predictions, &evals[j].predictions, labels)?;
            rows.push(ComparisonRow {
                round,
                peer_i: i,
                peer_j: j,
                report,
            });
        }
    }
    Ok(rows)
}

fn comparison_rounds(cfg: &ExperimentConfig) -> BTreeSet<usize> {
    let mut set: BTreeSet<usize> = cfg.metrics.comparison_rounds.iter().copied().collect();
    if let Some(f) = &cfg.metrics.fairness {
        set.insert(f.window.1);
    }
    set
}

/// Train every peer alone for `epochs` epochs.
fn standalone_curves(
    cfg: &ExperimentConfig,
    dims: &[usize],
    parts: &[Dataset],
    test: &Dataset,
    epochs: usize,
) -> Result<(Vec<ParameterSet>, Vec<Vec<Evaluation>>)> {
    let mut finals = Vec::new();
    let mut curves = Vec::new();
    for (i, d) in parts.iter().enumerate() {
        let (p, evals) = train_standalone(i, dims, d, test, epochs, &cfg.federation)
            .with_context(|| format!("standalone training of peer {i}"))?;
        finals.push(p);
        curves.push(evals);
    }
    Ok((finals, curves))
}

/// Run the configured algorithm in this process. Nothing is written.
pub fn execute(cfg: &ExperimentConfig) -> Result<(RunOutput, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let (train, test) = cfg.data.load()?;
    let dims = cfg.dims(train.features(), train.num_classes);
    cfg.partition.validate(train.num_classes)?;
    let parts = partition(&train, &cfg.partition)?;
    let partition_csv = partition_stats(&parts).to_csv();
    let fed = &cfg.federation;
    let wanted = comparison_rounds(cfg);
    let mut comparisons = Vec::new();
    let mut train_rows = Vec::new();
    let mut seconds: Vec<Vec<f64>> = Vec::new();
    let labels = &test.labels;

    let mut on_round = |v: &RoundView<'_>| -> ipa_core::Result<()> {
        info!(
            "round {} accuracy {:?}",
            v.round,
            v.evals.iter().map(|e| (e.accuracy * 100.0).round() / 100.0).collect::<Vec<_>>()
        );
        for (peer, (s, _)) in v.stats.iter().enumerate() {
            train_rows.push(train_row(v.round, peer, s));
        }
        seconds.push(v.stats.iter().map(|s| s.1).collect());
        if cfg.algorithm == Algorithm::Ipa && wanted.contains(&v.round) {
            comparisons.extend(compare_all(v.round, &v.params, v.evals, labels)?);
        }
        Ok(())
    };

    let (history, final_store, final_params) = match cfg.algorithm {
        Algorithm::Ipa => {
            let (state, history) = run_ipa(fed, &dims, &parts, &test, &mut on_round)?;
            let params = state.peers.iter().map(|p| p.params.clone()).collect::<Vec<_>>();
            (history, state.store, params)
        }
        Algorithm::Fedavg => {
            let (state, history) = run_fedavg(fed, &dims, &parts, &test, &mut on_round)?;
            let store = PeerParameterStore::new(vec![state.global.clone()])?;
            (history, store, vec![state.global])
        }
        Algorithm::Standalone => {
            let epochs = fed.rounds * fed.local_epochs;
            let (finals, curves) = standalone_curves(cfg, &dims, &parts, &test, epochs)?;
            let mut history = RoundHistory::new(fed.num_peers);
            for r in 1..=fed.rounds {
                let records = curves
                    .iter()
                    .enumerate()
                    .map(|(peer, c)| {
                        let e = &c[r * fed.local_epochs - 1];
                        PeerRecord {
                            round: r,
                            peer,
                            test_accuracy: e.accuracy,
                            test_loss: e.loss,
                            wallclock: 0.0,
                        }
                    })
                    .collect();
                history.push((0..fed.num_peers).collect(), records)?;
            }
            (history, PeerParameterStore::new(finals.clone())?, finals)
        }
    };

    let rounds_run = history.rounds();
    if cfg.algorithm != Algorithm::Fedavg && !comparisons.iter().any(|c| c.round == rounds_run) {
        let evals = final_params.iter().map(|p| evaluate(p, &test)).collect::<ipa_core::Result<Vec<_>>>()?;
        let refs: Vec<&ParameterSet> = final_params.iter().collect();
        comparisons.extend(compare_all(rounds_run, &refs, &evals, labels)?);
    }

    let mut summary = Summary::from_history(cfg, &history);
    let mut standalone = Vec::new();
    let mut fairness = None;
    if let (Some(f), true) = (&cfg.metrics.fairness, cfg.algorithm != Algorithm::Standalone) {
        if rounds_run < f.window.1 {
            warn!("run stopped at round {rounds_run}, before the fairness window ended; no fairness report");
        } else {
            let stop = early_stop_round(&history, f.window, f.criterion)?;
            let epochs = f.window.1 * fed.local_epochs;
            let (_, curves) = standalone_curves(cfg, &dims, &parts, &test, epochs)?;
            let phi: Vec<f64> = curves.iter().map(|c| c[epochs - 1].accuracy).collect();
            let report = fairness_correlation(&phi, &stop.scores, f.criterion)?;
            summary.rho_scaled = Some(report.rho_scaled);
            summary.early_stop = Some(stop);
            standalone = curves;
            fairness = Some(report);
        }
    }

    Ok((
        RunOutput {
            summary,
            history,
            train: train_rows,
            comparisons,
            final_store,
            standalone,
            fairness,
            partition_csv,
        },
        seconds,
    ))
}

fn train_row(round: usize, peer: usize, s: &LocalStats) -> TrainRow {
    TrainRow {
        round,
        peer,
        batches: s.batches,
        train_loss: s.mean_loss,
        penalty: s.mean_penalty,
    }
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), n + 1)))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_comparisons(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for c in rows {
        let r = &c.report;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            c.round, c.peer_i, c.peer_j, r.l1_param_dist, r.l2_param_dist, r.hamming, r.both_correct, r.both_incorrect, r.test_size
        ));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// The config as run, minus the output directory it was written to.
pub(crate) fn write_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig {
        out: None,
        ..cfg.clone()
    };
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

pub(crate) fn write_summary(out: &Path, summary: &Summary) -> Result<()> {
    write_json(&out.join("summary.json"), summary)
}

pub(crate) fn write_metrics(out: &Path, history: &RoundHistory) -> Result<()> {
    write_jsonl(&out.join("metrics.jsonl"), &metric_rows(history))
}

/// Run in-process and write the run directory.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Summary> {
    let start = Instant::now();
    let (run, seconds) = execute(cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_config(cfg, out)?;
    fs::write(out.join("partition.csv"), &run.partition_csv)?;
    write_metrics(out, &run.history)?;
    write_jsonl(&out.join("train.jsonl"), &run.train)?;
    let timing: Vec<serde_json::Value> = seconds
        .iter()
        .enumerate()
        .flat_map(|(r, peers)| {
            peers.iter().enumerate().map(move |(p, s)| serde_json::json!({"round": r + 1, "peer": p, "seconds": s}))
        })
        .chain(std::iter::once(serde_json::json!({"total_seconds": start.elapsed().as_secs_f64()})))
        .collect();
    write_jsonl(&out.join("timing.jsonl"), &timing)?;
    write_comparisons(&out.join("comparison.csv"), &run.comparisons)?;
    if !run.standalone.is_empty() {
        let mut s = String::from("peer,epoch,test_accuracy,test_loss\n");
        for (p, curve) in run.standalone.iter().enumerate() {
            for (e, ev) in curve.iter().enumerate() {
                s.push_str(&format!("{},{},{},{}\n", p, e + 1, ev.accuracy, ev.loss));
            }
        }
        fs::write(out.join("standalone.csv"), s)?;
    }
    if let Some(f) = &run.fairness {
        write_json(&out.join("fairness.json"), f)?;
    }
    save_checkpoint(&run.final_store, &out.join("checkpoint.ipa"))?;
    write_summary(out, &run.summary)?;
    Ok(run.summary)
}
