//! Analytic gradients against central finite differences for the
//! architectures the acceptance gate names.

use ipa_core::nn::{backward, check_gradients, finite_diff_check, init_mlp, Batch, ParameterSet};
use ipa_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOLERANCE: f64 = 1e-4;

/// Smallest |hidden pre-activation| over the batch, in f64.
fn min_abs_preactivation(p: &ParameterSet, batch: &Batch) -> f64 {
    let mut min = f64::INFINITY;
    for r in 0..batch.len() {
        let mut act: Vec<f64> = batch.inputs.row(r).iter().map(|&v| v as f64).collect();
        for layer in &p.layers[..p.layers.len() - 1] {
            let (fi, fo) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            let z: Vec<f64> = (0..fo)
                .map(|o| {
                    layer.bias.data()[o] as f64
                        + (0..fi)
                            .map(|i| act[i] * layer.weight.data()[i * fo + o] as f64)
                            .sum::<f64>()
                })
                .collect();
            min = z.iter().fold(min, |m, v| m.min(v.abs()));
            act = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    min
}

/// A random net and batch whose hidden units all sit at least `margin` from
/// the ReLU kink, so a central difference never straddles it.
fn kink_free_case(dims: &[usize], rows: usize, margin: f64, salt: u64) -> (ParameterSet, Batch) {
    for seed in salt..salt + 10_000 {
        let mut p = init_mlp(dims, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        for l in &mut p.layers {
            l.bias
                .data_mut()
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
        let x = (0..rows * dims[0]).map(|_| rng.random_range(0.0..1.0)).collect();
        let y = (0..rows)
            .map(|_| rng.random_range(0..*dims.last().unwrap()))
            .collect();
        let batch = Batch::new(Tensor::new(vec![rows, dims[0]], x).unwrap(), y).unwrap();
        if min_abs_preactivation(&p, &batch) > margin {
            return (p, batch);
        }
    }
    panic!("no kink-free case found for {dims:?}");
}

fn check_arch(dims: &[usize]) {
    for salt in [0, 1000] {
        let (p, b) = kink_free_case(dims, 4, 0.02, salt);
        for eps in [1e-3, 1e-4] {
            let err = finite_diff_check(&p, &b, eps).unwrap();
            assert!(err < TOLERANCE, "{dims:?} eps={eps}: {err:e}");
        }
    }
}

#[test]
fn tiny_net_2_8_2() {
    check_arch(&[2, 8, 2]);
}

#[test]
fn mid_net_20_16_4() {
    check_arch(&[20, 16, 4]);
}

#[test]
fn mnist_shaped_net_784_32_10() {
    check_arch(&[784, 32, 10]);
}

#[test]
fn deeper_net() {
    check_arch(&[6, 5, 5, 3]);
}

#[test]
fn scaled_gradients_are_rejected() {
    let (p, b) = kink_free_case(&[20, 16, 4], 4, 0.02, 7);
    let (_, mut g) = backward(&p, &b).unwrap();
    let good = check_gradients(&p, &b, &g, 1e-3).unwrap();
    g.scale(2.0);
    let bad = check_gradients(&p, &b, &g, 1e-3).unwrap();
    assert!(good < 1e-3, "{good}");
    assert!((bad - 0.5).abs() < 1e-2, "{bad}");
}
