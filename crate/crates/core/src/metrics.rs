//! Evaluation, model-versus-model comparison and fairness correlation.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, kernel, ParameterSet};

/// Rows per forward chunk during evaluation.
const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Percentage in `[0, 100]`.
    pub accuracy: f64,
    pub loss: f64,
    pub predictions: Vec<usize>,
}

/// First index of the maximum; NaN never wins.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

pub fn evaluate(params: &ParameterSet, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.features() != params.in_dim() {
        return Err(Error::Dimension(format!(
            "dataset has {} features, model expects {}",
            dataset.features(),
            params.in_dim()
        )));
    }
    let classes = params.out_dim();
    nn::check_labels(classes, &dataset.labels)?;
    let f = dataset.features();
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for start in (0..dataset.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(dataset.len());
        let logits = nn::logits_for(params, &dataset.inputs.data()[start * f..end * f], end - start)?;
        for (r, row) in logits.chunks_exact(classes).enumerate() {
            let y = dataset.labels[start + r];
            let pred = argmax(row);
            correct += usize::from(pred == y);
            loss += kernel::row_loss(row, y) as f64;
            predictions.push(pred);
        }
    }
    let n = dataset.len() as f64;
    Ok(Evaluation {
        accuracy: 100.0 * correct as f64 / n,
        loss: loss / n,
        predictions,
    })
}

/// `p = 1`: sum of absolute differences. `p = 2`: Euclidean norm (rooted).
pub fn param_distance(a: &ParameterSet, b: &ParameterSet, p: u8) -> Result<f64> {
    nn::check_same(&a.signature(), &b.signature())?;
    let mut total = 0.0f64;
    for (x, y) in a.tensors().zip(b.tensors()) {
        for (&u, &v) in x.data().iter().zip(y.data()) {
            let d = u as f64 - v as f64;
            total += match p {
                1 => d.abs(),
                2 => d * d,
                _ => return Err(Error::Config(format!("distance p must be 1 or 2, got {p}"))),
            };
        }
    }
    Ok(if p == 2 { total.sqrt() } else { total })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelComparisonReport {
    pub l1_param_dist: f64,
    pub l2_param_dist: f64,
    pub hamming: usize,
    pub both_correct: usize,
    pub both_incorrect: usize,
    pub test_size: usize,
}

/// Compare two models' predictions on a labelled set.
pub fn compare_predictions(pi: &[usize], pj: &[usize], labels: &[usize]) -> (usize, usize, usize) {
    let mut hamming = 0;
    let mut both_correct = 0;
    let mut both_incorrect = 0;
    for ((&a, &b), &y) in pi.iter().zip(pj).zip(labels) {
        hamming += usize::from(a != b);
        both_correct += usize::from(a == y && b == y);
        both_incorrect += usize::from(a != y && b != y);
    }
    (hamming, both_correct, both_incorrect)
}

pub fn compare_models(
    a: &ParameterSet,
    b: &ParameterSet,
    dataset: &Dataset,
) -> Result<ModelComparisonReport> {
    let ea = evaluate(a, dataset)?;
    let eb = evaluate(b, dataset)?;
    compare_evaluated(a, b, &ea.predictions, &eb.predictions, &dataset.labels)
}

/// [`compare_models`] with predictions already computed.
pub fn compare_evaluated(
    a: &ParameterSet,
    b: &ParameterSet,
    pa: &[usize],
    pb: &[usize],
    labels: &[usize],
) -> Result<ModelComparisonReport> {
    if pa.len() != labels.len() || pb.len() != labels.len() {
        return Err(Error::Dimension("prediction and label counts differ".into()));
    }
    let (hamming, both_correct, both_incorrect) = compare_predictions(pa, pb, labels);
    Ok(ModelComparisonReport {
        l1_param_dist: param_distance(a, b, 1)?,
        l2_param_dist: param_distance(a, b, 2)?,
        hamming,
        both_correct,
        both_incorrect,
        test_size: labels.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Accuracy,
    Loss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub standalone: Vec<f64>,
    /// Raw federated scores as measured (losses stay positive).
    pub federated: Vec<f64>,
    pub rho_scaled: f64,
    pub criterion: Criterion,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Dimension(format!(
            "correlation needs two equal-length vectors, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "one of the score vectors is constant".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `100 * pearson(phi, xi)`, with `xi` negated first when it holds losses.
pub fn fairness_correlation(phi: &[f64], xi: &[f64], criterion: Criterion) -> Result<FairnessReport> {
    if phi.len() < 3 {
        return Err(Error::Config(format!(
            "fairness correlation needs at least 3 peers, got {}",
            phi.len()
        )));
    }
    let oriented: Vec<f64> = match criterion {
        Criterion::Accuracy => xi.to_vec(),
        Criterion::Loss => xi.iter().map(|v| -v).collect(),
    };
    Ok(FairnessReport {
        standalone: phi.to_vec(),
        federated: xi.to_vec(),
        rho_scaled: 100.0 * pearson(phi, &oriented)?,
        criterion,
    })
}
