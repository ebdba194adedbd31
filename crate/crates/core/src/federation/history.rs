use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Criterion;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerRecord {
    pub round: usize,
    pub peer: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    /// Seconds spent in this peer's local training during the round.
    pub wallclock: f64,
}

/// Append-only per-round records. Round numbers start at 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundHistory {
    pub num_peers: usize,
    /// `records[r - 1][peer]`.
    pub records: Vec<Vec<PeerRecord>>,
    pub orders: Vec<Vec<usize>>,
}

impl RoundHistory {
    pub fn new(num_peers: usize) -> Self {
        Self {
            num_peers,
            records: Vec::new(),
            orders: Vec::new(),
        }
    }

    pub fn rounds(&self) -> usize {
        self.records.len()
    }

    /// Append the next round; `records` must be indexed by peer.
    pub fn push(&mut self, order: Vec<usize>, records: Vec<PeerRecord>) -> Result<()> {
        let round = self.rounds() + 1;
        if records.len() != self.num_peers
            || records
                .iter()
                .enumerate()
                .any(|(p, r)| r.peer != p || r.round != round)
        {
            return Err(Error::Data(format!(
                "round {round} records are not one per peer in peer order"
            )));
        }
        self.records.push(records);
        self.orders.push(order);
        Ok(())
    }

    pub fn get(&self, round: usize, peer: usize) -> Option<&PeerRecord> {
        self.records.get(round.checked_sub(1)?)?.get(peer)
    }

    pub fn accuracy_series(&self, peer: usize) -> Vec<f64> {
        self.records.iter().map(|r| r[peer].test_accuracy).collect()
    }

    pub fn final_accuracies(&self) -> Vec<f64> {
        self.records
            .last()
            .map(|r| r.iter().map(|p| p.test_accuracy).collect())
            .unwrap_or_default()
    }
}

/// First round in which any peer reaches `target` percent.
pub fn rounds_to_target(history: &RoundHistory, target: f64) -> Option<usize> {
    history
        .records
        .iter()
        .position(|r| r.iter().any(|p| p.test_accuracy >= target))
        .map(|k| k + 1)
}

/// First round in which each peer individually reaches `target`.
pub fn rounds_to_target_per_peer(history: &RoundHistory, target: f64) -> Vec<Option<usize>> {
    (0..history.num_peers)
        .map(|p| {
            history
                .records
                .iter()
                .position(|r| r[p].test_accuracy >= target)
                .map(|k| k + 1)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub round: usize,
    /// Per-peer mean of the criterion over the window.
    pub scores: Vec<f64>,
}

/// Stop at the end of `window` (inclusive, 1-based) and score each peer by
/// its mean accuracy or mean test loss over the window.
pub fn early_stop_round(
    history: &RoundHistory,
    window: (usize, usize),
    criterion: Criterion,
) -> Result<EarlyStop> {
    let (start, end) = window;
    if start == 0 || start > end {
        return Err(Error::Config(format!("empty fairness window {start}..={end}")));
    }
    if end > history.rounds() {
        return Err(Error::Config(format!(
            "fairness window ends at round {end}, history has {}",
            history.rounds()
        )));
    }
    let len = (end - start + 1) as f64;
    let scores = (0..history.num_peers)
        .map(|p| {
            history.records[start - 1..end]
                .iter()
                .map(|r| match criterion {
                    Criterion::Accuracy => r[p].test_accuracy,
                    Criterion::Loss => r[p].test_loss,
                })
                .sum::<f64>()
                / len
        })
        .collect();
    Ok(EarlyStop { round: end, scores })
}
