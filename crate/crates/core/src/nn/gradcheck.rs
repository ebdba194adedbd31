//! Central-difference gradient checking against an independent `f64` forward pass.

use super::kernel::{self, LayerView};
use super::{Batch, Gradients, ParameterSet};
use crate::error::{Error, Result};

struct Layer64 {
    fan_in: usize,
    fan_out: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

fn widen(params: &ParameterSet) -> Vec<Layer64> {
    params
        .layers
        .iter()
        .map(|l| Layer64 {
            fan_in: l.weight.shape()[0],
            fan_out: l.weight.shape()[1],
            weight: l.weight.data().iter().map(|&v| v as f64).collect(),
            bias: l.bias.data().iter().map(|&v| v as f64).collect(),
        })
        .collect()
}

/// Mean cross-entropy computed with naive loops in `f64`.
fn loss64(layers: &[Layer64], inputs: &[f64], labels: &[usize]) -> f64 {
    let rows = labels.len();
    let mut total = 0.0;
    let mut act = Vec::new();
    let mut next = Vec::new();
    for r in 0..rows {
        act.clear();
        act.extend_from_slice(&inputs[r * layers[0].fan_in..(r + 1) * layers[0].fan_in]);
        for (l, layer) in layers.iter().enumerate() {
            next.clear();
            next.extend_from_slice(&layer.bias);
            for (i, &x) in act.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let w = &layer.weight[i * layer.fan_out..(i + 1) * layer.fan_out];
                for (o, &wv) in next.iter_mut().zip(w) {
                    *o += x * wv;
                }
            }
            if l + 1 < layers.len() {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut act, &mut next);
        }
        let max = act.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = act.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
        total += lse - act[labels[r]];
    }
    total / rows as f64
}

fn slot(layers: &mut [Layer64], l: usize, which: usize, k: usize) -> &mut f64 {
    if which == 0 {
        &mut layers[l].weight[k]
    } else {
        &mut layers[l].bias[k]
    }
}

/// Central-difference gradient of the mean cross-entropy, flattened in
/// canonical parameter order.
pub fn numerical_gradient(params: &ParameterSet, batch: &Batch, eps: f64) -> Result<Vec<f64>> {
    if batch.inputs.cols() != params.in_dim() {
        return Err(Error::Dimension(format!(
            "batch has {} features, first layer expects {}",
            batch.inputs.cols(),
            params.in_dim()
        )));
    }
    let inputs: Vec<f64> = batch.inputs.data().iter().map(|&v| v as f64).collect();
    let mut layers = widen(params);
    let mut out = Vec::with_capacity(params.num_params());
    for l in 0..layers.len() {
        for which in 0..2 {
            let n = if which == 0 {
                layers[l].weight.len()
            } else {
                layers[l].bias.len()
            };
            for k in 0..n {
                let orig = *slot(&mut layers, l, which, k);
                *slot(&mut layers, l, which, k) = orig + eps;
                let plus = loss64(&layers, &inputs, &batch.labels);
                *slot(&mut layers, l, which, k) = orig - eps;
                let minus = loss64(&layers, &inputs, &batch.labels);
                *slot(&mut layers, l, which, k) = orig;
                out.push((plus - minus) / (2.0 * eps));
            }
        }
    }
    Ok(out)
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// `max_k |a_k - n_k| / max(|a_k|, |n_k|, 1e-8)`.
pub fn max_relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a as f64, n))
        .fold(0.0, f64::max)
}

fn max_relative_error64(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Compare `grads` against central differences of the loss at `params`.
pub fn check_gradients(
    params: &ParameterSet,
    batch: &Batch,
    grads: &Gradients,
    eps: f64,
) -> Result<f64> {
    super::check_same(&params.signature(), &grads.signature())?;
    let numeric = numerical_gradient(params, batch, eps)?;
    Ok(max_relative_error(&grads.to_flat(), &numeric))
}

/// Max relative error between the analytic backward pass and central
/// differences.
///
/// The analytic side runs the same backward kernel as training, instantiated
/// at `f64`, so the comparison measures the derivation rather than `f32`
/// rounding. [`check_gradients`] compares caller-supplied gradients instead.
pub fn finite_diff_check(params: &ParameterSet, batch: &Batch, eps: f64) -> Result<f64> {
    let numeric = numerical_gradient(params, batch, eps)?;
    super::loss::check_labels(params.out_dim(), &batch.labels)?;
    let layers = widen(params);
    let views: Vec<LayerView<'_, f64>> = layers
        .iter()
        .map(|l| LayerView {
            weight: &l.weight,
            bias: &l.bias,
            fan_in: l.fan_in,
            fan_out: l.fan_out,
        })
        .collect();
    let inputs: Vec<f64> = batch.inputs.data().iter().map(|&v| v as f64).collect();
    let (_, grads) = kernel::backward(&views, &inputs, &batch.labels);
    let analytic: Vec<f64> = grads
        .into_iter()
        .flat_map(|(dw, db)| dw.into_iter().chain(db))
        .collect();
    Ok(max_relative_error64(&analytic, &numeric))
}
