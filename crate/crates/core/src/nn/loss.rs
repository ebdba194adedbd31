use crate::error::{Error, Result};
use super::kernel;
use crate::tensor::Tensor;

pub(crate) fn check_labels(classes: usize, labels: &[usize]) -> Result<()> {
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::Data(format!(
            "label {y} at row {i} is out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn check_inputs(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    if logits.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let classes = logits.cols();
    check_labels(classes, labels)?;
    Ok(classes)
}

/// Per-sample losses, used by evaluation.
pub fn per_sample_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Vec<f32>> {
    let classes = check_inputs(logits, labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(r, &y)| kernel::row_loss(&logits.data()[r * classes..(r + 1) * classes], y))
        .collect())
}

/// Mean cross-entropy over the batch and `d loss / d logits = (softmax - onehot) / batch`.
/// Max-subtracted, so logits of any finite magnitude are safe.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let classes = check_inputs(logits, labels)?;
    let rows = labels.len();
    if rows == 0 {
        return Err(Error::Data("cross-entropy over an empty batch".into()));
    }
    let (loss, grad) = kernel::softmax_xent(logits.data(), classes, labels);
    Ok((loss as f32, Tensor::new(vec![rows, classes], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_loss(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
        let rows = labels.len();
        let mut total = 0.0;
        for r in 0..rows {
            let row = &logits[r * classes..(r + 1) * classes];
            let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
            total += lse - row[labels[r]];
        }
        total / rows as f64
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        for c in [2usize, 3, 10] {
            let logits = Tensor::new(vec![2, c], vec![0.7; 2 * c]).unwrap();
            let (loss, _) = cross_entropy(&logits, &[0, c - 1]).unwrap();
            assert!((loss as f64 - (c as f64).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn peaked_logits_give_near_zero_loss() {
        let logits = Tensor::new(vec![1, 3], vec![0.0, 50.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[1]).unwrap();
        assert!(loss >= 0.0 && loss < 1e-9, "{loss}");
    }

    #[test]
    fn matches_f64_reference() {
        let raw = [
            0.3, -1.2, 2.0, 1.5, 0.1, -0.4, -2.2, 0.9, 0.0, 3.1, -0.7, 1.1,
        ];
        let labels = [2, 0, 1, 0];
        let logits = Tensor::new(vec![4, 3], raw.iter().map(|&v| v as f32).collect()).unwrap();
        let (loss, grad) = cross_entropy(&logits, &labels).unwrap();
        let expected = reference_loss(&raw, 3, &labels);
        assert!((loss as f64 - expected).abs() < 1e-6, "{loss} vs {expected}");
        // each gradient row sums to zero
        for r in 0..4 {
            assert!(grad.row(r).iter().sum::<f32>().abs() < 1e-7);
        }
    }

    #[test]
    fn large_logits_stay_finite() {
        let logits = Tensor::new(vec![2, 3], vec![1e4, -1e4, 0.0, -1e4, 1e4, 5e3]).unwrap();
        let (loss, grad) = cross_entropy(&logits, &[1, 0]).unwrap();
        assert!(loss.is_finite());
        assert!(grad.all_finite());
        assert!((loss - 2e4).abs() < 1.0);
    }

    #[test]
    fn out_of_range_label_is_data_error() {
        let logits = Tensor::zeros(vec![1, 3]);
        assert!(matches!(cross_entropy(&logits, &[3]), Err(Error::Data(_))));
    }
}
