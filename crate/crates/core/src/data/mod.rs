//! In-memory datasets and their on-disk sources.

mod idx;
mod synth;

pub use idx::{load_idx, read_idx, write_idx_f32, write_idx_labels, IdxArray, IdxData};
pub use synth::synth_blobs;

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(Error::Data(format!(
                "dataset inputs must be 2-d, got shape {:?}",
                inputs.shape()
            )));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if let Some((k, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::Data(format!(
                "label {y} at sample {k} is out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// Always false; construction rejects empty datasets.
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.cols()
    }

    pub fn row(&self, k: usize) -> &[f32] {
        self.inputs.row(k)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Copy of the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (x, y) = self.gather(indices)?;
        Self::new(
            Tensor::new(vec![indices.len(), self.features()], x)?,
            y,
            self.num_classes,
        )
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let indices: Vec<usize> = (0..n).collect();
        self.subset(&indices).expect("prefix of a valid dataset")
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let (x, y) = self.gather(indices)?;
        Batch::new(Tensor::new(vec![indices.len(), self.features()], x)?, y)
    }

    fn gather(&self, indices: &[usize]) -> Result<(Vec<f32>, Vec<usize>)> {
        let f = self.features();
        let mut x = Vec::with_capacity(indices.len() * f);
        let mut y = Vec::with_capacity(indices.len());
        for &k in indices {
            if k >= self.len() {
                return Err(Error::Data(format!(
                    "sample index {k} out of range for {} samples",
                    self.len()
                )));
            }
            x.extend_from_slice(self.row(k));
            y.push(self.labels[k]);
        }
        Ok((x, y))
    }

    pub fn concat(parts: &[Dataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for p in parts {
            if p.features() != first.features() || p.num_classes != first.num_classes {
                return Err(Error::Data("concatenating incompatible datasets".into()));
            }
            x.extend_from_slice(p.inputs.data());
            y.extend_from_slice(&p.labels);
        }
        Self::new(Tensor::new(vec![y.len(), first.features()], x)?, y, first.num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::new(
            Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
            vec![0, 2, 1],
            3,
        )
        .unwrap()
    }

    #[test]
    fn subset_keeps_rows_and_labels_together() {
        let d = tiny().subset(&[2, 0]).unwrap();
        assert_eq!(d.inputs.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert_eq!(d.labels, vec![1, 0]);
        assert!(tiny().subset(&[3]).is_err());
    }

    #[test]
    fn rejects_bad_labels_and_counts() {
        let x = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        assert!(matches!(Dataset::new(x.clone(), vec![0, 3], 3), Err(Error::Data(_))));
        assert!(matches!(Dataset::new(x, vec![0], 3), Err(Error::Data(_))));
    }

    #[test]
    fn class_counts_and_concat() {
        let d = tiny();
        assert_eq!(d.class_counts(), vec![1, 1, 1]);
        let both = Dataset::concat(&[d.clone(), d.head(1)]).unwrap();
        assert_eq!(both.len(), 4);
        assert_eq!(both.class_counts(), vec![2, 1, 1]);
    }
}
