use std::time::Instant;

use super::ipa::{record_round, RoundView};
use super::{apply_dp_noise, train_epochs, FederationConfig, LocalStats, RoundHistory};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::nn::{ParameterSet, Sgd};

/// `sum_i (|D_i| / |D|) * theta_i`, accumulated in f64.
pub fn fedavg_aggregate(params: &[ParameterSet], sizes: &[usize]) -> Result<ParameterSet> {
    let first = params
        .first()
        .ok_or_else(|| Error::Config("nothing to aggregate".into()))?;
    if params.len() != sizes.len() {
        return Err(Error::Config(format!(
            "{} parameter sets but {} sizes",
            params.len(),
            sizes.len()
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::Config("client dataset sizes must be positive".into()));
    }
    let sig = first.signature();
    if let Some(k) = params.iter().position(|p| p.signature() != sig) {
        return Err(Error::Protocol(format!(
            "client {k} does not match client 0's shape signature"
        )));
    }
    let total: f64 = sizes.iter().map(|&s| s as f64).sum();
    let mut acc = vec![0.0f64; sig.num_params()];
    for (p, &s) in params.iter().zip(sizes) {
        let w = s as f64 / total;
        let mut k = 0;
        for t in p.tensors() {
            for &v in t.data() {
                acc[k] += w * v as f64;
                k += 1;
            }
        }
    }
    let flat: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
    ParameterSet::from_flat(&sig, &flat, first.seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedAvgState {
    pub global: ParameterSet,
    pub round: usize,
}

/// Every client trains from the global model with a fresh optimizer, then
/// the size-weighted average becomes the new global model.
pub fn run_fedavg_round(
    state: &mut FedAvgState,
    data: &[Dataset],
    cfg: &FederationConfig,
) -> Result<Vec<(LocalStats, f64)>> {
    cfg.check_data(data)?;
    let round = state.round + 1;
    let first_epoch = (round - 1) * cfg.local_epochs;
    let mut locals = Vec::with_capacity(data.len());
    let mut stats = Vec::with_capacity(data.len());
    for (i, d) in data.iter().enumerate() {
        let t = Instant::now();
        let mut params = state.global.clone();
        let mut sgd = Sgd::new(cfg.sgd, &params);
        let s = train_epochs(&mut params, &mut sgd, d, i, round, first_epoch, cfg, None)?;
        locals.push(match &cfg.dp {
            Some(dp) => apply_dp_noise(&params, dp, i, round)?,
            None => params,
        });
        stats.push((s, t.elapsed().as_secs_f64()));
    }
    let sizes: Vec<usize> = data.iter().map(Dataset::len).collect();
    state.global = fedavg_aggregate(&locals, &sizes)?;
    state.round = round;
    Ok(stats)
}

/// FedAvg rounds from a shared-seed initialization. Each round records the
/// global model's test scores under every client id.
pub fn run_fedavg(
    cfg: &FederationConfig,
    dims: &[usize],
    data: &[Dataset],
    test: &Dataset,
    mut on_round: impl FnMut(&RoundView<'_>) -> Result<()>,
) -> Result<(FedAvgState, RoundHistory)> {
    cfg.validate()?;
    cfg.check_data(data)?;
    let global = crate::nn::init_mlp(dims, cfg.init_seed(0))?;
    let mut state = FedAvgState { global, round: 0 };
    let mut history = RoundHistory::new(cfg.num_peers);
    for _ in 0..cfg.rounds {
        let stats = run_fedavg_round(&mut state, data, cfg)?;
        let e = evaluate(&state.global, test)?;
        let evals = vec![e; cfg.num_peers];
        record_round(&mut history, (0..cfg.num_peers).collect(), state.round, &evals, &stats)?;
        on_round(&RoundView {
            round: state.round,
            params: vec![&state.global; cfg.num_peers],
            evals: &evals,
            stats: &stats,
        })?;
        if cfg.target_hit([evals[0].accuracy]) {
            break;
        }
    }
    Ok((state, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_mlp, ShapeSignature};

    #[test]
    fn weighted_mean_example() {
        let sig = ShapeSignature(vec![(vec![1, 1], vec![0])]);
        let a = ParameterSet::from_flat(&sig, &[2.0], 0).unwrap();
        let b = ParameterSet::from_flat(&sig, &[4.0], 0).unwrap();
        let m = fedavg_aggregate(&[a, b], &[1, 3]).unwrap();
        assert_eq!(m.to_flat(), vec![3.5]);
    }

    #[test]
    fn identical_inputs_are_a_fixed_point() {
        let p = init_mlp(&[6, 5, 3], 2).unwrap();
        let m = fedavg_aggregate(&[p.clone(), p.clone(), p.clone()], &[1, 5, 7]).unwrap();
        assert!(m.bit_eq(&p));
    }

    #[test]
    fn rejects_mismatches() {
        let a = init_mlp(&[6, 5, 3], 2).unwrap();
        let b = init_mlp(&[6, 4, 3], 2).unwrap();
        assert!(matches!(fedavg_aggregate(&[a.clone(), b], &[1, 1]), Err(Error::Protocol(_))));
        assert!(fedavg_aggregate(&[a.clone()], &[0]).is_err());
        assert!(fedavg_aggregate(&[a], &[1, 2]).is_err());
        assert!(fedavg_aggregate(&[], &[]).is_err());
    }
}
