//! Launch an experiment as a TCP token ring of `ipa node` processes.

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use anyhow::{bail, ensure, Context, Result};
use ipa_core::checkpoint::load_checkpoint;
use ipa_core::federation::{PeerRecord, RoundHistory};
use ipa_core::metrics::evaluate;
use ipa_core::nn::ParameterSet;
use ipa_core::partition::{partition, partition_stats};
use ipa_core::transport::NodeConfig;
use log::info;

use crate::config::{Algorithm, ExperimentConfig};
use crate::run::{read_jsonl, write_comparisons, write_config, write_jsonl, write_metrics, write_summary, ComparisonRow, MetricRow, Summary};

/// Ports the OS hands out right now. Another process could grab one before
/// the node binds it; the node then fails to start and the launch errors.
fn free_ports(n: usize) -> Result<Vec<u16>> {
    let listeners = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<std::io::Result<Vec<_>>>()?;
    listeners.iter().map(|l| Ok(l.local_addr()?.port())).collect()
}

struct Nodes(Vec<Child>);

impl Drop for Nodes {
    fn drop(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

/// Write per-peer shards and node configs under `out/ring`, run one
/// `program node` process per peer and collect what they wrote.
pub fn run_ring(cfg: &ExperimentConfig, out: &Path, program: &Path) -> Result<Summary> {
    ensure!(cfg.algorithm == Algorithm::Ipa, "ring mode runs ipa only, not {}", cfg.algorithm);
    cfg.validate()?;
    let (train, test) = cfg.data.load()?;
    cfg.partition.validate(train.num_classes)?;
    let parts = partition(&train, &cfg.partition)?;
    let dims = cfg.dims(train.features(), train.num_classes);
    let n = cfg.federation.num_peers;

    let dir = out.join("ring");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_config(cfg, out)?;
    fs::write(out.join("partition.csv"), partition_stats(&parts).to_csv())?;
    let (test_images, test_labels) = (dir.join("test-images.idx"), dir.join("test-labels.idx"));
    test.write_idx(&test_images, &test_labels)?;

    let ports = free_ports(n)?;
    let addr = |i: usize| format!("127.0.0.1:{}", ports[i]);
    let mut children = Nodes(Vec::new());
    let mut files = Vec::new();
    for (i, shard) in parts.iter().enumerate() {
        let (images, labels) = (dir.join(format!("peer{i}-images.idx")), dir.join(format!("peer{i}-labels.idx")));
        shard.write_idx(&images, &labels)?;
        let node = NodeConfig {
            peer: i,
            listen: addr(i),
            successor: addr((i + 1) % n),
            dims: dims.clone(),
            federation: cfg.federation.clone(),
            shard_images: images,
            shard_labels: labels,
            test_images: test_images.clone(),
            test_labels: test_labels.clone(),
            checkpoint: dir.join(format!("checkpoint{i}.ipa")),
            timeout_secs: 3600,
            connect_retries: 400,
        };
        let node_path = dir.join(format!("node{i}.toml"));
        fs::write(&node_path, toml::to_string(&node)?)?;
        let records = dir.join(format!("records{i}.jsonl"));
        let child = Command::new(program)
            .arg("node")
            .arg("--config")
            .arg(&node_path)
            .arg("--records")
            .arg(&records)
            .spawn()
            .with_context(|| format!("starting node {i} with {}", program.display()))?;
        children.0.push(child);
        files.push((records, node.checkpoint));
    }
    info!("started {n} nodes on ports {ports:?}");

    let mut failed = Vec::new();
    for (i, c) in children.0.iter_mut().enumerate() {
        let status = c.wait()?;
        if !status.success() {
            failed.push(format!("node {i} exited with {status}"));
        }
    }
    if !failed.is_empty() {
        bail!("ring run failed: {}", failed.join(", "));
    }

    let ckpt_bytes = fs::read(&files[0].1)?;
    for (i, (_, ckpt)) in files.iter().enumerate().skip(1) {
        ensure!(fs::read(ckpt)? == ckpt_bytes, "node {i} finished with a different checkpoint from node 0");
    }
    fs::write(out.join("checkpoint.ipa"), &ckpt_bytes)?;

    let per_peer: Vec<Vec<MetricRow>> = files.iter().map(|(r, _)| read_jsonl(r)).collect::<Result<_>>()?;
    let history = merge_records(n, &per_peer)?;
    write_metrics(out, &history)?;

    // The checkpoint holds what peers shared, which is the trained model
    // unless noise was added before sharing.
    let store = load_checkpoint(&out.join("checkpoint.ipa"))?;
    let params: Vec<&ParameterSet> = store.peers().iter().collect();
    let evals = params.iter().map(|p| evaluate(p, &test)).collect::<ipa_core::Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            rows.push(ComparisonRow {
                round: history.rounds(),
                peer_i: i,
                peer_j: j,
                report: ipa_core::metrics::compare_evaluated(
                    params[i],
                    params[j],
                    &evals[i].predictions,
                    &evals[j].predictions,
                    &test.labels,
                )?,
            });
        }
    }
    write_comparisons(&out.join("comparison.csv"), &rows)?;
    let summary = Summary::from_history(cfg, &history);
    write_summary(out, &summary)?;
    Ok(summary)
}

fn merge_records(n: usize, per_peer: &[Vec<MetricRow>]) -> Result<RoundHistory> {
    let rounds = per_peer[0].len();
    let mut history = RoundHistory::new(n);
    for r in 0..rounds {
        let records = per_peer
            .iter()
            .enumerate()
            .map(|(p, rows)| {
                let m = rows.get(r).with_context(|| format!("node {p} recorded {} rounds, node 0 {rounds}", rows.len()))?;
                ensure!(m.round == r + 1 && m.peer == p, "node {p} row {} is out of order", r + 1);
                Ok(PeerRecord {
                    round: m.round,
                    peer: p,
                    test_accuracy: m.test_accuracy,
                    test_loss: m.test_loss,
                    wallclock: 0.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        history.push((0..n).collect(), records)?;
    }
    Ok(history)
}

/// Body of the `node` subcommand.
pub fn run_node(config: &Path, records: Option<&PathBuf>) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let node: NodeConfig = toml::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    let outcome = ipa_core::transport::run_peer_node(&node).with_context(|| format!("peer {}", node.peer))?;
    if let Some(path) = records {
        let rows: Vec<MetricRow> = outcome
            .records
            .iter()
            .map(|r| MetricRow {
                round: r.round,
                peer: r.peer,
                test_accuracy: r.test_accuracy,
                test_loss: r.test_loss,
            })
            .collect();
        write_jsonl(path, &rows)?;
    }
    Ok(())
}
