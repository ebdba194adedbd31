use rand::Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed::{rng_for, STREAM_SYNTH};
use crate::tensor::Tensor;

/// Gaussian blobs: each class gets a center drawn from N(0, 1) per
/// dimension, samples are `center + spread * N(0, 1)`. Samples are stored
/// class by class.
pub fn synth_blobs(
    num_classes: usize,
    dims: usize,
    n_per_class: usize,
    spread: f32,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || dims == 0 || n_per_class == 0 {
        return Err(Error::Config(
            "synthetic blobs need positive classes, dims and samples".into(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!("spread must be >= 0, got {spread}")));
    }
    let mut rng = rng_for(seed, &[STREAM_SYNTH]);
    let centers: Vec<f32> = (0..num_classes * dims)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    let n = num_classes * n_per_class;
    let mut x = Vec::with_capacity(n * dims);
    let mut y = Vec::with_capacity(n);
    for c in 0..num_classes {
        let center = &centers[c * dims..(c + 1) * dims];
        for _ in 0..n_per_class {
            x.extend(
                center
                    .iter()
                    .map(|&m| m + spread * rng.sample::<f32, _>(StandardNormal)),
            );
            y.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, dims], x)?, y, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_seeded() {
        let a = synth_blobs(3, 4, 5, 0.5, 1).unwrap();
        assert_eq!(a, synth_blobs(3, 4, 5, 0.5, 1).unwrap());
        assert_ne!(a, synth_blobs(3, 4, 5, 0.5, 2).unwrap());
        assert_eq!(a.class_counts(), vec![5, 5, 5]);
    }

    #[test]
    fn rejects_empty_shapes() {
        assert!(synth_blobs(0, 4, 5, 0.5, 1).is_err());
        assert!(synth_blobs(2, 4, 5, -1.0, 1).is_err());
    }
}
