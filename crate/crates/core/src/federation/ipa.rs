use std::time::Instant;

use super::{
    apply_dp_noise, train_epochs, visit_order, FederationConfig, LocalStats, PeerRecord, RoundHistory,
};
use crate::alignment::PeerParameterStore;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Evaluation};
use crate::nn::{ParameterSet, Sgd};

/// What a peer keeps privately: its clean parameters and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerState {
    pub params: ParameterSet,
    pub sgd: Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpaState {
    pub peers: Vec<PeerState>,
    /// What every peer has shared so far (noised when DP is on).
    pub store: PeerParameterStore,
    /// Completed rounds.
    pub round: usize,
}

/// The copy of `theta` that leaves peer `i` after `round` (0 = initial share).
pub fn shared_copy(theta: &ParameterSet, cfg: &FederationConfig, i: usize, round: usize) -> Result<ParameterSet> {
    match &cfg.dp {
        Some(dp) => apply_dp_noise(theta, dp, i, round),
        None => Ok(theta.clone()),
    }
}

pub fn init_ipa(cfg: &FederationConfig, dims: &[usize]) -> Result<IpaState> {
    cfg.validate()?;
    if cfg.num_peers < 2 {
        return Err(Error::Config(format!(
            "parameter alignment needs at least 2 peers, got {}",
            cfg.num_peers
        )));
    }
    let mut peers = Vec::with_capacity(cfg.num_peers);
    let mut shared = Vec::with_capacity(cfg.num_peers);
    for i in 0..cfg.num_peers {
        let params = cfg.init_params(dims, i)?;
        shared.push(shared_copy(&params, cfg, i, 0)?);
        peers.push(PeerState {
            sgd: Sgd::new(cfg.sgd, &params),
            params,
        });
    }
    Ok(IpaState {
        peers,
        store: PeerParameterStore::new(shared)?,
        round: 0,
    })
}

/// Peer `i`'s local epochs for `round` against the frozen view `store`.
/// Only `peer` changes; the store is read-only here.
pub fn train_local_ipa(
    peer: &mut PeerState,
    i: usize,
    store: &PeerParameterStore,
    data: &Dataset,
    round: usize,
    cfg: &FederationConfig,
) -> Result<LocalStats> {
    if round == 0 {
        return Err(Error::Config("rounds are numbered from 1".into()));
    }
    let first_epoch = (round - 1) * cfg.local_epochs;
    train_epochs(
        &mut peer.params,
        &mut peer.sgd,
        data,
        i,
        round,
        first_epoch,
        cfg,
        Some((store, &cfg.align)),
    )
}

/// One full visitation. On error the state is left as it was.
/// Returns the visit order and each peer's (stats, seconds), indexed by peer.
pub fn run_ipa_round(
    state: &mut IpaState,
    data: &[Dataset],
    cfg: &FederationConfig,
) -> Result<(Vec<usize>, Vec<(LocalStats, f64)>)> {
    cfg.check_data(data)?;
    let round = state.round + 1;
    let order = visit_order(cfg, round);
    let mut next = state.clone();
    let mut stats = vec![(LocalStats::default(), 0.0); cfg.num_peers];
    for &i in &order {
        let t = Instant::now();
        let s = train_local_ipa(&mut next.peers[i], i, &next.store, &data[i], round, cfg)?;
        let share = shared_copy(&next.peers[i].params, cfg, i, round)?;
        next.store.replace(i, share)?;
        stats[i] = (s, t.elapsed().as_secs_f64());
    }
    next.round = round;
    *state = next;
    Ok((order, stats))
}

/// Everything a caller may want to look at after a round.
pub struct RoundView<'a> {
    pub round: usize,
    pub params: Vec<&'a ParameterSet>,
    pub evals: &'a [Evaluation],
    pub stats: &'a [(LocalStats, f64)],
}

pub(crate) fn record_round(
    history: &mut RoundHistory,
    order: Vec<usize>,
    round: usize,
    evals: &[Evaluation],
    stats: &[(LocalStats, f64)],
) -> Result<()> {
    let records = evals
        .iter()
        .zip(stats)
        .enumerate()
        .map(|(peer, (e, (_, secs)))| PeerRecord {
            round,
            peer,
            test_accuracy: e.accuracy,
            test_loss: e.loss,
            wallclock: *secs,
        })
        .collect();
    history.push(order, records)
}

/// Run rounds until `cfg.rounds` or the target, evaluating every peer's
/// clean parameters on `test` at the end of each round.
pub fn run_ipa(
    cfg: &FederationConfig,
    dims: &[usize],
    data: &[Dataset],
    test: &Dataset,
    mut on_round: impl FnMut(&RoundView<'_>) -> Result<()>,
) -> Result<(IpaState, RoundHistory)> {
    let mut state = init_ipa(cfg, dims)?;
    cfg.check_data(data)?;
    let mut history = RoundHistory::new(cfg.num_peers);
    for _ in 0..cfg.rounds {
        let (order, stats) = run_ipa_round(&mut state, data, cfg)?;
        let evals = state
            .peers
            .iter()
            .map(|p| evaluate(&p.params, test))
            .collect::<Result<Vec<_>>>()?;
        record_round(&mut history, order, state.round, &evals, &stats)?;
        on_round(&RoundView {
            round: state.round,
            params: state.peers.iter().map(|p| &p.params).collect(),
            evals: &evals,
            stats: &stats,
        })?;
        if cfg.target_hit(evals.iter().map(|e| e.accuracy)) {
            break;
        }
    }
    Ok((state, history))
}
