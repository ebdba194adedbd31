//! The parameter-alignment penalty and its gradient.
//!
//! For peer `i` the penalty is `lambda * sum_tensors sum_{n != i} d_p(theta_i, theta_n)`
//! where `d_1` is the sum of absolute differences and `d_2` the sum of squared
//! differences (no square root). Biases are included. Only `theta_i` receives
//! gradient; every other peer's parameters are constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, ParameterSet, ShapeSignature};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    /// 1 for absolute-error alignment, 2 for squared-error alignment.
    #[serde(default = "default_p")]
    pub p: u8,
    #[serde(default = "default_lambda")]
    pub lambda: f32,
    /// Divide the penalty by `N - 1`.
    #[serde(default)]
    pub normalize: bool,
}

fn default_p() -> u8 {
    2
}

fn default_lambda() -> f32 {
    1.0
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            p: default_p(),
            lambda: default_lambda(),
            normalize: false,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p != 1 && self.p != 2 {
            return Err(Error::Config(format!("alignment p must be 1 or 2, got {}", self.p)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "alignment lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    fn scale(&self, peers: usize) -> f32 {
        if self.normalize && peers > 1 {
            self.lambda / (peers - 1) as f32
        } else {
            self.lambda
        }
    }
}

/// Every peer's latest shared parameters, indexed by peer id.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerParameterStore {
    peers: Vec<ParameterSet>,
    /// How many times each slot has been replaced.
    versions: Vec<u64>,
}

impl PeerParameterStore {
    pub fn new(peers: Vec<ParameterSet>) -> Result<Self> {
        let versions = vec![0; peers.len()];
        Self::with_versions(peers, versions)
    }

    pub fn with_versions(peers: Vec<ParameterSet>, versions: Vec<u64>) -> Result<Self> {
        if peers.is_empty() {
            return Err(Error::Config("parameter store needs at least one peer".into()));
        }
        if versions.len() != peers.len() {
            return Err(Error::Config(format!(
                "{} versions for {} peers",
                versions.len(),
                peers.len()
            )));
        }
        let sig = peers[0].signature();
        if let Some((n, _)) = peers.iter().enumerate().find(|(_, p)| p.signature() != sig) {
            return Err(Error::Protocol(format!(
                "peer {n} has a different shape signature from peer 0"
            )));
        }
        Ok(Self { peers, versions })
    }

    pub fn len(&self) -> usize {
        self.peers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }

    pub fn signature(&self) -> ShapeSignature {
        self.peers[0].signature()
    }

    pub fn get(&self, i: usize) -> &ParameterSet {
        &self.peers[i]
    }

    pub fn peers(&self) -> &[ParameterSet] {
        &self.peers
    }

    pub fn versions(&self) -> &[u64] {
        &self.versions
    }

    /// Overwrite slot `i` with newly shared parameters.
    pub fn replace(&mut self, i: usize, params: ParameterSet) -> Result<()> {
        if i >= self.peers.len() {
            return Err(Error::Config(format!("peer {i} out of range")));
        }
        if params.signature() != self.signature() {
            return Err(Error::Protocol(format!(
                "replacement for peer {i} has a different shape signature"
            )));
        }
        self.peers[i] = params;
        self.versions[i] += 1;
        Ok(())
    }

    pub fn into_peers(self) -> Vec<ParameterSet> {
        self.peers
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.versions == other.versions
            && self.peers.len() == other.peers.len()
            && self
                .peers
                .iter()
                .zip(&other.peers)
                .all(|(a, b)| a.seed == b.seed && a.bit_eq(b))
    }
}

#[inline]
fn sign(d: f32) -> f32 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_target(theta: &ParameterSet, i: usize, store: &PeerParameterStore) -> Result<()> {
    if i >= store.len() {
        return Err(Error::Config(format!(
            "peer {i} out of range for a store of {}",
            store.len()
        )));
    }
    if theta.signature() != store.signature() {
        return Err(Error::Protocol(format!(
            "peer {i} parameters do not match the store's shape signature"
        )));
    }
    Ok(())
}

/// Add the alignment gradient of `theta` (acting as peer `i`) into `grads`
/// and return the penalty value. This is the per-minibatch training kernel.
pub fn accumulate_alignment(
    theta: &ParameterSet,
    i: usize,
    store: &PeerParameterStore,
    cfg: &AlignmentConfig,
    grads: &mut Gradients,
) -> Result<f32> {
    check_target(theta, i, store)?;
    crate::nn::check_same(&theta.signature(), &grads.signature())
        .map_err(|e| Error::Protocol(e.to_string()))?;
    let lambda = cfg.scale(store.len());
    let mut penalty = 0.0f64;
    for (n, other) in store.peers().iter().enumerate() {
        if n == i {
            continue;
        }
        for ((t, o), g) in theta.tensors().zip(other.tensors()).zip(grads.tensors_mut()) {
            let mut partial = 0.0f32;
            let g = g.data_mut();
            if cfg.p == 1 {
                for ((&x, &y), g) in t.data().iter().zip(o.data()).zip(g.iter_mut()) {
                    let d = x - y;
                    partial += d.abs();
                    *g += lambda * sign(d);
                }
            } else {
                for ((&x, &y), g) in t.data().iter().zip(o.data()).zip(g.iter_mut()) {
                    let d = x - y;
                    partial += d * d;
                    *g += 2.0 * lambda * d;
                }
            }
            penalty += partial as f64;
        }
    }
    Ok((lambda as f64 * penalty) as f32)
}

/// Penalty of `theta` acting as peer `i` against every other slot of `store`.
pub fn align_penalty_for(
    theta: &ParameterSet,
    i: usize,
    store: &PeerParameterStore,
    cfg: &AlignmentConfig,
) -> Result<f64> {
    check_target(theta, i, store)?;
    let lambda = cfg.scale(store.len()) as f64;
    let mut total = 0.0f64;
    for (n, other) in store.peers().iter().enumerate() {
        if n == i {
            continue;
        }
        for (t, o) in theta.tensors().zip(other.tensors()) {
            for (&x, &y) in t.data().iter().zip(o.data()) {
                let d = x as f64 - y as f64;
                total += if cfg.p == 1 { d.abs() } else { d * d };
            }
        }
    }
    Ok(lambda * total)
}

pub fn align_penalty(i: usize, store: &PeerParameterStore, cfg: &AlignmentConfig) -> Result<f64> {
    if i >= store.len() {
        return Err(Error::Config(format!("peer {i} out of range")));
    }
    align_penalty_for(store.get(i), i, store, cfg)
}

pub fn align_gradient_for(
    theta: &ParameterSet,
    i: usize,
    store: &PeerParameterStore,
    cfg: &AlignmentConfig,
) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(theta);
    accumulate_alignment(theta, i, store, cfg, &mut grads)?;
    Ok(grads)
}

/// Gradient of [`align_penalty`] with respect to peer `i`'s slot only.
pub fn align_gradient(
    i: usize,
    store: &PeerParameterStore,
    cfg: &AlignmentConfig,
) -> Result<Gradients> {
    if i >= store.len() {
        return Err(Error::Config(format!("peer {i} out of range")));
    }
    align_gradient_for(store.get(i), i, store, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_mlp;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn single(values: &[f32]) -> ParameterSet {
        let sig = ShapeSignature(vec![(vec![1, values.len()], vec![0])]);
        let mut p = ParameterSet::zeros(&sig);
        p.layers[0].weight = Tensor::new(vec![1, values.len()], values.to_vec()).unwrap();
        p
    }

    fn example_store() -> PeerParameterStore {
        PeerParameterStore::new(vec![single(&[1.0, -2.0]), single(&[0.0, 0.0]), single(&[1.0, 1.0])])
            .unwrap()
    }

    fn cfg(p: u8, lambda: f32) -> AlignmentConfig {
        AlignmentConfig { p, lambda, normalize: false }
    }

    #[test]
    fn identical_peers_have_zero_penalty_and_gradient() {
        let p = init_mlp(&[4, 3, 2], 9).unwrap();
        let store = PeerParameterStore::new(vec![p.clone(), p.clone(), p]).unwrap();
        for q in [1, 2] {
            assert_eq!(align_penalty(1, &store, &cfg(q, 1.0)).unwrap(), 0.0);
            let g = align_gradient(1, &store, &cfg(q, 1.0)).unwrap();
            assert!(g.to_flat().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn worked_example_l1() {
        let store = example_store();
        assert_eq!(align_penalty(0, &store, &cfg(1, 1.0)).unwrap(), 6.0);
        let g = align_gradient(0, &store, &cfg(1, 1.0)).unwrap();
        assert_eq!(g.layers[0].weight.data(), &[1.0, -2.0]);
    }

    #[test]
    fn worked_example_l2() {
        let store = example_store();
        assert_eq!(align_penalty(0, &store, &cfg(2, 1.0)).unwrap(), 14.0);
        let g = align_gradient(0, &store, &cfg(2, 1.0)).unwrap();
        // 2*(1-0) + 2*(1-1), 2*(-2-0) + 2*(-2-1)
        assert_eq!(g.layers[0].weight.data(), &[2.0, -10.0]);
    }

    #[test]
    fn normalize_divides_by_other_peer_count() {
        let store = example_store();
        let c = AlignmentConfig { p: 1, lambda: 1.0, normalize: true };
        assert_eq!(align_penalty(0, &store, &c).unwrap(), 3.0);
    }

    #[test]
    fn sign_of_zero_is_zero() {
        let store = PeerParameterStore::new(vec![single(&[0.5]), single(&[0.5])]).unwrap();
        let g = align_gradient(0, &store, &cfg(1, 3.0)).unwrap();
        assert_eq!(g.layers[0].weight.data(), &[0.0]);
    }

    #[test]
    fn signature_mismatch_is_protocol_error() {
        let a = init_mlp(&[4, 3], 0).unwrap();
        let b = init_mlp(&[4, 2], 0).unwrap();
        assert!(matches!(
            PeerParameterStore::new(vec![a.clone(), b.clone()]),
            Err(Error::Protocol(_))
        ));
        let store = PeerParameterStore::new(vec![a.clone(), a]).unwrap();
        assert!(matches!(
            align_penalty_for(&b, 0, &store, &cfg(2, 1.0)),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(cfg(3, 1.0).validate().is_err());
        assert!(cfg(1, -0.1).validate().is_err());
        assert!(cfg(2, 0.0).validate().is_ok());
    }

    #[test]
    fn replace_bumps_version() {
        let mut store = example_store();
        store.replace(2, single(&[4.0, 4.0])).unwrap();
        assert_eq!(store.versions(), &[0, 0, 1]);
        assert!(store.replace(3, single(&[0.0, 0.0])).is_err());
    }

    fn random_store(seed: u64, peers: usize) -> PeerParameterStore {
        PeerParameterStore::new(
            (0..peers)
                .map(|n| init_mlp(&[3, 4, 2], seed * 31 + n as u64).unwrap())
                .collect(),
        )
        .unwrap()
    }

    /// Central differences of the f64 penalty, perturbing only peer `i`.
    fn fd_gradient(i: usize, store: &PeerParameterStore, c: &AlignmentConfig, eps: f32) -> Vec<f64> {
        let theta = store.get(i);
        let sig = theta.signature();
        let flat = theta.to_flat();
        (0..flat.len())
            .map(|k| {
                let mut plus = flat.clone();
                plus[k] += eps;
                let mut minus = flat.clone();
                minus[k] -= eps;
                let p = ParameterSet::from_flat(&sig, &plus, 0).unwrap();
                let m = ParameterSet::from_flat(&sig, &minus, 0).unwrap();
                let h = (plus[k] as f64) - (minus[k] as f64);
                (align_penalty_for(&p, i, store, c).unwrap() - align_penalty_for(&m, i, store, c).unwrap()) / h
            })
            .collect()
    }

    #[test]
    fn l2_gradient_matches_finite_differences() {
        let store = random_store(3, 4);
        let c = cfg(2, 0.7);
        let analytic = align_gradient(2, &store, &c).unwrap().to_flat();
        let numeric = fd_gradient(2, &store, &c, 1e-2);
        let err = crate::nn::max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn l1_gradient_matches_finite_differences_away_from_kinks() {
        let store = random_store(5, 3);
        let c = cfg(1, 1.3);
        let eps = 1e-3f32;
        let theta = store.get(0).to_flat();
        let others: Vec<Vec<f32>> = (1..3).map(|n| store.get(n).to_flat()).collect();
        let analytic = align_gradient(0, &store, &c).unwrap().to_flat();
        let numeric = fd_gradient(0, &store, &c, eps);
        let mut checked = 0;
        for k in 0..theta.len() {
            if others.iter().any(|o| (theta[k] - o[k]).abs() < 10.0 * eps) {
                continue;
            }
            checked += 1;
            let rel = (analytic[k] as f64 - numeric[k]).abs() / numeric[k].abs().max(1e-8);
            assert!(rel < 1e-4, "param {k}: {} vs {}", analytic[k], numeric[k]);
        }
        assert!(checked > 0);
    }

    proptest! {
        #[test]
        fn penalty_properties(seed in 0u64..500, peers in 2usize..5, p in 1u8..3, lambda in 0.01f32..5.0) {
            let store = random_store(seed, peers);
            // symmetry of the pairwise distance
            let two = PeerParameterStore::new(vec![store.get(0).clone(), store.get(1).clone()]).unwrap();
            let c = cfg(p, lambda);
            let d01 = align_penalty(0, &two, &c).unwrap();
            let d10 = align_penalty(1, &two, &c).unwrap();
            prop_assert!((d01 - d10).abs() <= 1e-9 * d01.max(1.0));
            prop_assert!(d01 > 0.0);

            // linearity in lambda
            let i = peers - 1;
            let base = align_penalty(i, &store, &c).unwrap();
            let doubled = align_penalty(i, &store, &cfg(p, 2.0 * lambda)).unwrap();
            prop_assert!((doubled - 2.0 * base).abs() <= 1e-5 * base.max(1.0));
            let g1 = align_gradient(i, &store, &c).unwrap().to_flat();
            let g2 = align_gradient(i, &store, &cfg(p, 2.0 * lambda)).unwrap().to_flat();
            for (a, b) in g1.iter().zip(&g2) {
                prop_assert!((b - 2.0 * a).abs() <= 1e-5 * a.abs().max(1.0));
            }

            // the store is read-only
            let before = store.clone();
            let _ = align_gradient(i, &store, &c).unwrap();
            prop_assert!(store.bit_eq(&before));
        }
    }
}
