//! Round engines: sequential IPA visits, the FedAvg baseline and standalone
//! training, plus DP noise and convergence bookkeeping.
//!
//! Every random choice is keyed off `FederationConfig::seed`:
//! peer `i`'s data order in its `e`-th local epoch (counted across rounds)
//! comes from stream `(SHUFFLE, i, e)`, so an IPA peer with `lambda = 0`
//! follows exactly the standalone trajectory.

mod fedavg;
mod history;
mod ipa;

pub use fedavg::{fedavg_aggregate, run_fedavg, run_fedavg_round, FedAvgState};
pub use history::{early_stop_round, rounds_to_target, rounds_to_target_per_peer, EarlyStop, PeerRecord, RoundHistory};
pub use ipa::{init_ipa, run_ipa, run_ipa_round, shared_copy, train_local_ipa, IpaState, PeerState, RoundView};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::alignment::{accumulate_alignment, AlignmentConfig, PeerParameterStore};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Evaluation};
use crate::nn::{backward, init_mlp, ParameterSet, Sgd, SgdConfig};
use crate::seed::{derive_seed, rng_for, STREAM_DP, STREAM_INIT, STREAM_ORDER, STREAM_SHUFFLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    #[default]
    Ring,
    RandomPermutation,
}

/// Whether peers start from one shared initialization or each from its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    Distinct,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    #[serde(default)]
    pub mu: f32,
    #[serde(default = "default_sigma")]
    pub sigma: f32,
    #[serde(default)]
    pub noise_seed: u64,
}

fn default_sigma() -> f32 {
    0.0005
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            mu: 0.0,
            sigma: default_sigma(),
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub num_peers: usize,
    pub rounds: usize,
    #[serde(default = "one")]
    pub local_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub order: Order,
    #[serde(default)]
    pub init: InitMode,
    #[serde(default)]
    pub align: AlignmentConfig,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<DpConfig>,
    /// Percent accuracy; with `stop_at_target`, training ends at the first
    /// round in which some peer reaches it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    #[serde(default = "yes")]
    pub stop_at_target: bool,
    /// Reshuffle local data every epoch; off means fixed data order.
    #[serde(default = "yes")]
    pub shuffle: bool,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_batch() -> usize {
    32
}

impl FederationConfig {
    pub fn new(num_peers: usize, rounds: usize, seed: u64) -> Self {
        Self {
            num_peers,
            rounds,
            local_epochs: 1,
            batch_size: default_batch(),
            order: Order::Ring,
            init: InitMode::Distinct,
            align: AlignmentConfig::default(),
            sgd: SgdConfig::default(),
            dp: None,
            target_accuracy: None,
            stop_at_target: true,
            shuffle: true,
            seed,
        }
    }

    /// Checks shared by every engine; IPA additionally needs two peers.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_peers == 0 {
            return bad("num_peers must be positive".into());
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Some(t) = self.target_accuracy {
            if !(t > 0.0 && t <= 100.0) {
                return bad(format!("target_accuracy must lie in (0, 100], got {t}"));
            }
        }
        if let Some(dp) = &self.dp {
            if !(dp.sigma >= 0.0 && dp.sigma.is_finite() && dp.mu.is_finite()) {
                return bad(format!("dp sigma must be finite and >= 0, got {}", dp.sigma));
            }
        }
        self.align.validate()?;
        self.sgd.validate()
    }

    pub fn init_seed(&self, peer: usize) -> u64 {
        match self.init {
            InitMode::Distinct => derive_seed(self.seed, &[STREAM_INIT, peer as u64]),
            InitMode::Shared => derive_seed(self.seed, &[STREAM_INIT]),
        }
    }

    pub fn init_params(&self, dims: &[usize], peer: usize) -> Result<ParameterSet> {
        init_mlp(dims, self.init_seed(peer))
    }

    fn check_data(&self, data: &[Dataset]) -> Result<()> {
        if data.len() != self.num_peers {
            return Err(Error::Config(format!(
                "{} peer datasets for {} peers",
                data.len(),
                self.num_peers
            )));
        }
        Ok(())
    }

    fn target_hit(&self, accuracies: impl IntoIterator<Item = f64>) -> bool {
        match self.target_accuracy {
            Some(t) if self.stop_at_target => accuracies.into_iter().any(|a| a >= t),
            _ => false,
        }
    }
}

/// Visit sequence for a round (1-based `round`).
pub fn visit_order(cfg: &FederationConfig, round: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cfg.num_peers).collect();
    if cfg.order == Order::RandomPermutation {
        order.shuffle(&mut rng_for(cfg.seed, &[STREAM_ORDER, round as u64]));
    }
    order
}

/// `theta + eta`, `eta ~ Normal(mu, sigma)` elementwise. The stream is keyed
/// by `(noise_seed, peer, round)`.
pub fn apply_dp_noise(theta: &ParameterSet, dp: &DpConfig, peer: usize, round: usize) -> Result<ParameterSet> {
    if !(dp.sigma >= 0.0) {
        return Err(Error::Config(format!("dp sigma must be >= 0, got {}", dp.sigma)));
    }
    let mut out = theta.clone();
    if dp.sigma == 0.0 && dp.mu == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(dp.mu, dp.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = rng_for(dp.noise_seed, &[STREAM_DP, peer as u64, round as u64]);
    for t in out.tensors_mut() {
        for v in t.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LocalStats {
    pub batches: usize,
    pub mean_loss: f64,
    pub mean_penalty: f64,
}

/// `epochs` passes over `data`, starting at local epoch index `first_epoch`.
/// With `align` set, every minibatch adds the full alignment term.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_epochs(
    params: &mut ParameterSet,
    sgd: &mut Sgd,
    data: &Dataset,
    peer: usize,
    round: usize,
    first_epoch: usize,
    cfg: &FederationConfig,
    align: Option<(&PeerParameterStore, &AlignmentConfig)>,
) -> Result<LocalStats> {
    let mut stats = LocalStats::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let align = align.filter(|(_, a)| a.lambda != 0.0);
    for e in first_epoch..first_epoch + cfg.local_epochs {
        if cfg.shuffle {
            order.sort_unstable();
            order.shuffle(&mut rng_for(cfg.seed, &[STREAM_SHUFFLE, peer as u64, e as u64]));
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.batch(chunk)?;
            let (loss, mut grads) = backward(params, &batch)?;
            let penalty = match align {
                Some((store, a)) => accumulate_alignment(params, peer, store, a, &mut grads)?,
                None => 0.0,
            };
            let nonfinite = |detail: String| Error::NonFinite {
                round,
                peer,
                batch: stats.batches,
                detail,
            };
            if !(loss + penalty).is_finite() {
                return Err(nonfinite(format!("loss {loss}, alignment penalty {penalty}")));
            }
            sgd.step(params, &grads)?;
            if !params.all_finite() {
                return Err(nonfinite("parameters became non-finite after the update".into()));
            }
            stats.batches += 1;
            stats.mean_loss += loss as f64;
            stats.mean_penalty += penalty as f64;
        }
    }
    if stats.batches > 0 {
        stats.mean_loss /= stats.batches as f64;
        stats.mean_penalty /= stats.batches as f64;
    }
    Ok(stats)
}

/// Plain local training from the peer's configured initialization. Returns
/// the model and its test evaluation after each epoch.
pub fn train_standalone(
    i: usize,
    dims: &[usize],
    data: &Dataset,
    test: &Dataset,
    epochs: usize,
    cfg: &FederationConfig,
) -> Result<(ParameterSet, Vec<Evaluation>)> {
    cfg.validate()?;
    let mut params = cfg.init_params(dims, i)?;
    let mut sgd = Sgd::new(cfg.sgd, &params);
    let one_epoch = FederationConfig {
        local_epochs: 1,
        ..cfg.clone()
    };
    let mut evals = Vec::with_capacity(epochs);
    for e in 0..epochs {
        train_epochs(&mut params, &mut sgd, data, i, e + 1, e, &one_epoch, None)?;
        evals.push(evaluate(&params, test)?);
    }
    Ok((params, evals))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_and_permutation_orders() {
        let mut cfg = FederationConfig::new(3, 1, 5);
        assert_eq!(visit_order(&cfg, 1), vec![0, 1, 2]);
        assert_eq!(visit_order(&cfg, 7), vec![0, 1, 2]);
        cfg.num_peers = 8;
        cfg.order = Order::RandomPermutation;
        let orders: Vec<_> = (1..=20).map(|r| visit_order(&cfg, r)).collect();
        for o in &orders {
            let mut s = o.clone();
            s.sort_unstable();
            assert_eq!(s, (0..8).collect::<Vec<_>>());
        }
        assert_eq!(orders[3], visit_order(&cfg, 4));
        assert!(orders.iter().any(|o| o != &orders[0]));
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let p = init_mlp(&[5, 4, 3], 1).unwrap();
        let dp = DpConfig {
            sigma: 0.0,
            ..DpConfig::default()
        };
        assert!(apply_dp_noise(&p, &dp, 0, 1).unwrap().bit_eq(&p));
    }

    #[test]
    fn noise_is_reproducible_per_peer_and_round() {
        let p = init_mlp(&[5, 4, 3], 1).unwrap();
        let dp = DpConfig::default();
        let a = apply_dp_noise(&p, &dp, 0, 1).unwrap();
        assert!(a.bit_eq(&apply_dp_noise(&p, &dp, 0, 1).unwrap()));
        assert!(!a.bit_eq(&apply_dp_noise(&p, &dp, 1, 1).unwrap()));
        assert!(!a.bit_eq(&apply_dp_noise(&p, &dp, 0, 2).unwrap()));
        assert!(!a.bit_eq(&p));
    }

    #[test]
    fn config_validation() {
        let mut cfg = FederationConfig::new(2, 3, 0);
        cfg.validate().unwrap();
        cfg.local_epochs = 0;
        assert!(cfg.validate().is_err());
        cfg.local_epochs = 1;
        cfg.target_accuracy = Some(0.0);
        assert!(cfg.validate().is_err());
        cfg.target_accuracy = None;
        cfg.dp = Some(DpConfig {
            sigma: -1.0,
            ..DpConfig::default()
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn distinct_and_shared_init() {
        let mut cfg = FederationConfig::new(3, 1, 9);
        assert_ne!(cfg.init_seed(0), cfg.init_seed(1));
        cfg.init = InitMode::Shared;
        assert_eq!(cfg.init_seed(0), cfg.init_seed(2));
    }
}
