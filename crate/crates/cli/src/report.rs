//! Tables recomputed from the raw files of a run directory. Output goes to
//! `<run>/report/`:
//! - `curves.csv` `round,peer_0..` test accuracy
//! - `loss_curves.csv` `round,peer_0..` test loss
//! - `rounds_to_target.csv` `target,first,peer_0..` with `—` for never
//! - `hamming.csv` N×N prediction Hamming distances at the last compared round
//! - `fairness.csv` `peer,standalone,federated` (fairness runs only)

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ipa_core::federation::{early_stop_round, rounds_to_target, rounds_to_target_per_peer, RoundHistory};
use ipa_core::metrics::fairness_correlation;

use crate::config::ExperimentConfig;
use crate::run::{history_from_rows, read_jsonl, MetricRow, COMPARISON_HEADER};

pub const NEVER: &str = "—";
pub const DEFAULT_TARGETS: [f64; 3] = [95.0, 97.0, 98.0];

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    pub warnings: Vec<String>,
    pub rounds_to_target: Vec<(f64, Option<usize>, Vec<Option<usize>>)>,
    /// Hamming matrix at `hamming_round`.
    pub hamming: Vec<Vec<usize>>,
    pub hamming_round: Option<usize>,
    pub rho_scaled: Option<f64>,
}

fn cell(r: Option<usize>) -> String {
    r.map_or_else(|| NEVER.to_string(), |v| v.to_string())
}

fn header(first: &str, n: usize) -> String {
    let mut h = first.to_string();
    for p in 0..n {
        let _ = write!(h, ",peer_{p}");
    }
    h.push('\n');
    h
}

fn curves(history: &RoundHistory, loss: bool) -> String {
    let mut s = header("round", history.num_peers);
    for row in &history.records {
        let _ = write!(s, "{}", row[0].round);
        for r in row {
            let _ = write!(s, ",{}", if loss { r.test_loss } else { r.test_accuracy });
        }
        s.push('\n');
    }
    s
}

/// `(round, i, j, hamming)` rows of a comparison file.
fn read_hamming(path: &Path) -> Result<Vec<(usize, usize, usize, usize)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(COMPARISON_HEADER) {
        bail!("{} has an unexpected header", path.display());
    }
    lines
        .enumerate()
        .map(|(k, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<usize> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .with_context(|| format!("{} line {}", path.display(), k + 2))
            };
            Ok((num(0)?, num(1)?, num(2)?, num(5)?))
        })
        .collect()
}

/// Standalone accuracy of each peer after `epoch` epochs.
fn read_standalone(path: &Path, n: usize, epoch: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut phi = vec![None; n];
    for (k, l) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = l.split(',').collect();
        let bad = || format!("{} line {}", path.display(), k + 1);
        let peer: usize = f.first().and_then(|v| v.parse().ok()).with_context(bad)?;
        let e: usize = f.get(1).and_then(|v| v.parse().ok()).with_context(bad)?;
        if e == epoch && peer < n {
            phi[peer] = Some(f.get(2).and_then(|v| v.parse::<f64>().ok()).with_context(bad)?);
        }
    }
    phi.into_iter()
        .enumerate()
        .map(|(p, v)| v.with_context(|| format!("no standalone accuracy for peer {p} at epoch {epoch}")))
        .collect()
}

pub fn report(run_dir: &Path, targets: &[f64]) -> Result<Report> {
    let mut warnings = Vec::new();
    let rows: Vec<MetricRow> = read_jsonl(&run_dir.join("metrics.jsonl"))?;
    let cfg = match ExperimentConfig::load(&run_dir.join("config.toml")) {
        Ok(c) => Some(c),
        Err(e) => {
            warnings.push(format!("no usable config.toml ({e:#})"));
            None
        }
    };
    if !run_dir.join("summary.json").is_file() {
        warnings.push("run incomplete: summary.json missing, report is partial".into());
    }
    let n = match &cfg {
        Some(c) => c.federation.num_peers,
        None => rows.iter().map(|r| r.peer + 1).max().unwrap_or(0),
    };
    if n == 0 {
        bail!("{} has no metric rows", run_dir.display());
    }
    let whole = rows.len() / n * n;
    if whole != rows.len() {
        warnings.push(format!("ignoring {} rows of an unfinished round", rows.len() - whole));
    }
    let history = history_from_rows(n, &rows[..whole])?;

    let out = run_dir.join("report");
    fs::create_dir_all(&out)?;
    fs::write(out.join("curves.csv"), curves(&history, false))?;
    fs::write(out.join("loss_curves.csv"), curves(&history, true))?;

    let mut targets = targets.to_vec();
    if targets.is_empty() {
        targets.extend(DEFAULT_TARGETS);
        if let Some(t) = cfg.as_ref().and_then(|c| c.federation.target_accuracy) {
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
    }
    let mut text = String::new();
    let _ = writeln!(text, "{} rounds, {} peers", history.rounds(), n);
    let mut rtt_csv = header("target,first", n);
    let mut rtt = Vec::new();
    let _ = writeln!(text, "\nrounds to target (first peer / each peer)");
    for &t in &targets {
        let first = rounds_to_target(&history, t);
        let per = rounds_to_target_per_peer(&history, t);
        let cells: Vec<String> = per.iter().map(|&r| cell(r)).collect();
        let _ = writeln!(rtt_csv, "{},{},{}", t, cell(first), cells.join(","));
        let _ = writeln!(text, "  {:>6.2}%  {:>4}  [{}]", t, cell(first), cells.join(" "));
        rtt.push((t, first, per));
    }
    fs::write(out.join("rounds_to_target.csv"), rtt_csv)?;

    let mut hamming = vec![vec![0; n]; n];
    let mut hamming_round = None;
    let cmp = run_dir.join("comparison.csv");
    if cmp.is_file() {
        let rows = read_hamming(&cmp)?;
        if let Some(last) = rows.iter().map(|r| r.0).max() {
            for &(_, i, j, h) in rows.iter().filter(|r| r.0 == last) {
                if i < n && j < n {
                    hamming[i][j] = h;
                    hamming[j][i] = h;
                }
            }
            hamming_round = Some(last);
            let mut csv = header("peer", n);
            let _ = writeln!(text, "\nprediction Hamming distance at round {last}");
            for (i, row) in hamming.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(csv, "peer_{i},{}", cells.join(","));
                let _ = writeln!(text, "  {}", cells.iter().map(|c| format!("{c:>6}")).collect::<String>());
            }
            fs::write(out.join("hamming.csv"), csv)?;
        }
    } else {
        warnings.push("no comparison.csv".into());
    }

    let mut rho = None;
    if let Some((f, le)) = cfg.as_ref().and_then(|c| c.metrics.fairness.map(|f| (f, c.federation.local_epochs))) {
        let standalone = run_dir.join("standalone.csv");
        if !standalone.is_file() || history.rounds() < f.window.1 {
            warnings.push("fairness configured but the run has no complete window".into());
        } else {
            let phi = read_standalone(&standalone, n, f.window.1 * le)?;
            let xi = early_stop_round(&history, f.window, f.criterion)?.scores;
            let r = fairness_correlation(&phi, &xi, f.criterion)?;
            let mut csv = String::from("peer,standalone,federated\n");
            for p in 0..n {
                let _ = writeln!(csv, "{p},{},{}", phi[p], xi[p]);
            }
            fs::write(out.join("fairness.csv"), csv)?;
            let _ = writeln!(
                text,
                "\nfairness over rounds {}-{}: rho = {:.2}",
                f.window.0, f.window.1, r.rho_scaled
            );
            rho = Some(r.rho_scaled);
        }
    }
    for w in &warnings {
        let _ = writeln!(text, "warning: {w}");
    }
    Ok(Report {
        text,
        warnings,
        rounds_to_target: rtt,
        hamming,
        hamming_round,
        rho_scaled: rho,
    })
}
