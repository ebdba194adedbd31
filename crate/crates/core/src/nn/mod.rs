//! Multilayer perceptron with ReLU hidden layers and a linear output layer.
//!
//! Weights are stored `(in_dim, out_dim)` row-major so a batch forward is a
//! single `inputs · W` product. Every op here is a pure function of its
//! arguments; nothing reads global state.

mod gradcheck;
pub(crate) mod kernel;
mod loss;
mod optim;

pub use gradcheck::{check_gradients, finite_diff_check, max_relative_error, numerical_gradient};
pub(crate) use loss::check_labels;
pub use loss::{cross_entropy, per_sample_cross_entropy};
pub use optim::{sgd_step, Sgd, SgdConfig};

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;
use kernel::LayerView;

/// Numerator of the fan-in scaled uniform bound: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub const INIT_GAIN: f32 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Shapes of every `(weight, bias)` pair, in layer order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeSignature(pub Vec<(Vec<usize>, Vec<usize>)>);

impl ShapeSignature {
    pub fn num_params(&self) -> usize {
        self.0
            .iter()
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum()
    }

    /// Recover `[in, hidden..., out]` from a chain-compatible signature.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.0.iter().map(|(w, _)| w[0]).collect();
        if let Some((w, _)) = self.0.last() {
            dims.push(w[1]);
        }
        dims
    }
}

/// One model's full parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub layers: Vec<LayerParams>,
    pub seed: u64,
}

/// Same layout as a [`ParameterSet`]; holds derivatives or optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerParams>,
}

fn signature_of(layers: &[LayerParams]) -> ShapeSignature {
    ShapeSignature(
        layers
            .iter()
            .map(|l| (l.weight.shape().to_vec(), l.bias.shape().to_vec()))
            .collect(),
    )
}

fn zeros_for(sig: &ShapeSignature) -> Vec<LayerParams> {
    sig.0
        .iter()
        .map(|(w, b)| LayerParams {
            weight: Tensor::zeros(w.clone()),
            bias: Tensor::zeros(b.clone()),
        })
        .collect()
}

macro_rules! layered {
    ($t:ty) => {
        impl $t {
            pub fn signature(&self) -> ShapeSignature {
                signature_of(&self.layers)
            }

            pub fn num_params(&self) -> usize {
                self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
            }

            /// Weight then bias of each layer, in layer order.
            pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
                self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
            }

            pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
                self.layers
                    .iter_mut()
                    .flat_map(|l| [&mut l.weight, &mut l.bias])
            }

            /// All values flattened in canonical order.
            pub fn to_flat(&self) -> Vec<f32> {
                self.tensors().flat_map(|t| t.data().iter().copied()).collect()
            }

            pub fn all_finite(&self) -> bool {
                self.tensors().all(Tensor::all_finite)
            }
        }
    };
}

layered!(ParameterSet);
layered!(Gradients);

impl ParameterSet {
    pub fn zeros(sig: &ShapeSignature) -> Self {
        Self {
            layers: zeros_for(sig),
            seed: 0,
        }
    }

    /// Rebuild from flat values in canonical order.
    pub fn from_flat(sig: &ShapeSignature, values: &[f32], seed: u64) -> Result<Self> {
        if values.len() != sig.num_params() {
            return Err(Error::Dimension(format!(
                "signature holds {} parameters, got {}",
                sig.num_params(),
                values.len()
            )));
        }
        let mut out = Self {
            layers: zeros_for(sig),
            seed,
        };
        let mut offset = 0;
        for t in out.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.shape()[1])
    }

    /// Bitwise equality, so `-0.0 != 0.0` and NaN payloads count.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.signature() == other.signature()
            && self
                .tensors()
                .zip(other.tensors())
                .all(|(a, b)| a.data().iter().map(|v| v.to_bits()).eq(b.data().iter().map(|v| v.to_bits())))
    }
}

impl Gradients {
    pub fn zeros(sig: &ShapeSignature) -> Self {
        Self {
            layers: zeros_for(sig),
        }
    }

    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self::zeros(&params.signature())
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f32) -> Result<()> {
        check_same(&self.signature(), &other.signature())?;
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f32) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

pub(crate) fn check_same(a: &ShapeSignature, b: &ShapeSignature) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!(
            "shape signature mismatch: {:?} vs {:?}",
            a.0, b.0
        )));
    }
    Ok(())
}

/// A minibatch: `inputs` is `(rows, features)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "batch inputs {:?} do not match {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Build an MLP with the given `[in, hidden..., out]` widths.
///
/// Weights are drawn from `U(-sqrt(6/fan_in), sqrt(6/fan_in))` with a
/// ChaCha8 stream seeded from `seed`; biases start at zero.
pub fn init_mlp(layer_dims: &[usize], seed: u64) -> Result<ParameterSet> {
    if layer_dims.len() < 2 {
        return Err(Error::Config(format!(
            "need at least input and output widths, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::Config(format!(
            "layer widths must be positive, got {layer_dims:?}"
        )));
    }
    let mut rng = seed::rng_for(seed, &[seed::STREAM_INIT]);
    let layers = layer_dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (INIT_GAIN / fan_in as f32).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
            LayerParams {
                weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized"),
                bias: Tensor::zeros(vec![fan_out]),
            }
        })
        .collect();
    Ok(ParameterSet { layers, seed })
}

pub(crate) fn views(params: &ParameterSet) -> Vec<LayerView<'_, f32>> {
    params
        .layers
        .iter()
        .map(|l| LayerView {
            weight: l.weight.data(),
            bias: l.bias.data(),
            fan_in: l.weight.shape()[0],
            fan_out: l.weight.shape()[1],
        })
        .collect()
}

fn check_features(params: &ParameterSet, features: usize) -> Result<()> {
    if features != params.in_dim() {
        return Err(Error::Dimension(format!(
            "batch has {features} features, first layer expects {}",
            params.in_dim()
        )));
    }
    Ok(())
}

/// Logits for raw row-major inputs.
pub(crate) fn logits_for(params: &ParameterSet, inputs: &[f32], rows: usize) -> Result<Vec<f32>> {
    if inputs.len() != rows * params.in_dim() {
        return Err(Error::Dimension(format!(
            "expected {rows}x{} inputs, got {} values",
            params.in_dim(),
            inputs.len()
        )));
    }
    Ok(kernel::forward_activations(&views(params), inputs, rows)
        .pop()
        .expect("at least one layer"))
}

pub fn forward(params: &ParameterSet, batch: &Batch) -> Result<Tensor> {
    check_features(params, batch.inputs.cols())?;
    let rows = batch.len();
    let logits = logits_for(params, batch.inputs.data(), rows)?;
    Tensor::new(vec![rows, params.out_dim()], logits)
}

/// Mean cross-entropy of `forward(params, batch)` and its exact gradient.
pub fn backward(params: &ParameterSet, batch: &Batch) -> Result<(f32, Gradients)> {
    check_features(params, batch.inputs.cols())?;
    if batch.is_empty() {
        return Err(Error::Data("backward over an empty batch".into()));
    }
    loss::check_labels(params.out_dim(), &batch.labels)?;
    let (loss, grads) = kernel::backward(&views(params), batch.inputs.data(), &batch.labels);
    let layers = grads
        .into_iter()
        .zip(&params.layers)
        .map(|((dw, db), l)| LayerParams {
            weight: Tensor::new(l.weight.shape().to_vec(), dw).expect("kernel keeps shapes"),
            bias: Tensor::new(l.bias.shape().to_vec(), db).expect("kernel keeps shapes"),
        })
        .collect();
    Ok((loss as f32, Gradients { layers }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rows: usize, features: usize, classes: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..rows * features).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        Batch::new(Tensor::new(vec![rows, features], x).unwrap(), y).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_mlp(&[4, 3], 7).unwrap();
        let b = init_mlp(&[4, 3], 7).unwrap();
        let c = init_mlp(&[4, 3], 8).unwrap();
        assert!(a.bit_eq(&b));
        assert_ne!(a.layers[0].weight.data(), c.layers[0].weight.data());
        assert!(a.layers[0].bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_weights_respect_fan_in_bound() {
        let p = init_mlp(&[50, 10], 1).unwrap();
        let bound = (INIT_GAIN / 50.0).sqrt();
        assert!(p.layers[0].weight.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_signature_follows_dims() {
        let p = init_mlp(&[2, 5, 3], 123).unwrap();
        let expected = ShapeSignature(vec![(vec![2, 5], vec![5]), (vec![5, 3], vec![3])]);
        assert_eq!(p.signature(), expected);
        assert_eq!(p.signature().layer_dims(), vec![2, 5, 3]);
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(matches!(init_mlp(&[], 0), Err(Error::Config(_))));
        assert!(matches!(init_mlp(&[4], 0), Err(Error::Config(_))));
        assert!(matches!(init_mlp(&[4, 0, 2], 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let p = ParameterSet::zeros(&init_mlp(&[3, 4, 2], 0).unwrap().signature());
        let logits = forward(&p, &random_batch(5, 3, 2, 1)).unwrap();
        assert_eq!(logits.shape(), &[5, 2]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut p = ParameterSet::zeros(&ShapeSignature(vec![(vec![2, 2], vec![2])]));
        p.layers[0].weight = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let batch = Batch::new(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), vec![0]).unwrap();
        assert_eq!(forward(&p, &batch).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn forward_matches_triple_loop_oracle() {
        let p = init_mlp(&[6, 5, 4], 99).unwrap();
        let mut p = p;
        for (i, b) in p.layers[0].bias.data_mut().iter_mut().enumerate() {
            *b = 0.1 * i as f32 - 0.2;
        }
        let batch = random_batch(3, 6, 4, 5);

        let mut act: Vec<Vec<f64>> = (0..3)
            .map(|r| batch.inputs.row(r).iter().map(|&v| v as f64).collect())
            .collect();
        for (l, layer) in p.layers.iter().enumerate() {
            let (fi, fo) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            act = act
                .iter()
                .map(|x| {
                    (0..fo)
                        .map(|o| {
                            let mut s = layer.bias.data()[o] as f64;
                            for i in 0..fi {
                                s += x[i] * layer.weight.data()[i * fo + o] as f64;
                            }
                            if l + 1 < p.layers.len() { s.max(0.0) } else { s }
                        })
                        .collect()
                })
                .collect();
        }
        let logits = forward(&p, &batch).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let got = logits.row(r)[c] as f64;
                assert!((got - act[r][c]).abs() < 1e-5, "{got} vs {}", act[r][c]);
            }
        }
    }

    #[test]
    fn forward_rejects_feature_mismatch() {
        let p = init_mlp(&[4, 2], 0).unwrap();
        assert!(matches!(
            forward(&p, &random_batch(2, 3, 2, 0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_input_gives_zero_first_layer_weight_grads() {
        let p = init_mlp(&[5, 4, 3], 3).unwrap();
        let batch = Batch::new(Tensor::zeros(vec![2, 5]), vec![0, 2]).unwrap();
        let (_, g) = backward(&p, &batch).unwrap();
        assert!(g.layers[0].weight.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_rows_match_single_row() {
        let p = init_mlp(&[5, 4, 3], 3).unwrap();
        let single = random_batch(1, 5, 3, 11);
        let mut data = single.inputs.data().to_vec();
        data.extend_from_slice(single.inputs.data());
        let doubled = Batch::new(
            Tensor::new(vec![2, 5], data).unwrap(),
            vec![single.labels[0]; 2],
        )
        .unwrap();
        let (l1, g1) = backward(&p, &single).unwrap();
        let (l2, g2) = backward(&p, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-6);
        for (a, b) in g1.to_flat().iter().zip(g2.to_flat()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn backward_and_forward_are_bit_reproducible() {
        let p = init_mlp(&[8, 6, 3], 21).unwrap();
        let batch = random_batch(7, 8, 3, 2);
        let (la, ga) = backward(&p, &batch).unwrap();
        let (lb, gb) = backward(&p, &batch).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert!(ga.to_flat().iter().zip(gb.to_flat()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn flat_round_trip() {
        let p = init_mlp(&[3, 4, 2], 5).unwrap();
        let q = ParameterSet::from_flat(&p.signature(), &p.to_flat(), p.seed).unwrap();
        assert!(p.bit_eq(&q));
        assert!(ParameterSet::from_flat(&p.signature(), &[0.0; 3], 0).is_err());
    }
}
