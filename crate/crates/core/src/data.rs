//! Labeled sample collections.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("{features} feature rows but {labels} labels")]
    LabelCount { features: usize, labels: usize },
    #[error("label {label} at row {row} is out of range for {classes} classes")]
    Label { row: usize, label: usize, classes: usize },
    #[error("features must be finite")]
    NonFinite,
    #[error("fraction must lie in [0, 1), got {0}")]
    Fraction(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `n×d` features with labels in `0..classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        let n = match features.shape() {
            [n, _] => *n,
            s => {
                return Err(TensorError::Shape {
                    op: "dataset",
                    detail: format!("features must be n×d, got {s:?}"),
                }
                .into())
            }
        };
        if labels.len() != n {
            return Err(DataError::LabelCount { features: n, labels: labels.len() });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::Label { row, label, classes });
        }
        if !features.all_finite() {
            return Err(DataError::NonFinite);
        }
        Ok(Self { features, labels, classes })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::Empty);
        }
        Self::new(Tensor::from_rows(rows)?, labels, classes)
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn in_unit_box(&self) -> bool {
        self.features.data().iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows in the given order. An empty selection yields `None`.
    pub fn subset(&self, indices: &[usize]) -> Option<Self> {
        if indices.is_empty() {
            return None;
        }
        Some(Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// Shuffles with `seed` and holds out the last `⌊fraction·n⌋` rows.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Option<Self>), DataError> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(DataError::Fraction(fraction));
        }
        if self.is_empty() {
            return Err(DataError::Empty);
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held = (fraction * self.len() as f64).floor() as usize;
        let cut = self.len() - held;
        let head = self.subset(&idx[..cut]).ok_or(DataError::Empty)?;
        Ok((head, self.subset(&idx[cut..])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64]).collect();
        Dataset::from_rows(&rows, (0..n).map(|i| i % 3).collect(), 3).unwrap()
    }

    #[test]
    fn validation_split_sizes() {
        let (train, val) = toy(10).split(0.2, 1).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(val.unwrap().len(), 2);
        let (train, val) = toy(10).split(0.0, 1).unwrap();
        assert_eq!(train.len(), 10);
        assert!(val.is_none());
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let d = toy(20);
        let (a, b) = d.split(0.25, 7).unwrap();
        let (a2, b2) = d.split(0.25, 7).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        let mut all: Vec<f64> = a.features().data().to_vec();
        all.extend(b.unwrap().features().data());
        all.sort_by(f64::total_cmp);
        assert_eq!(all, d.features().data());
    }

    #[test]
    fn rejects_bad_labels() {
        assert!(matches!(
            Dataset::from_rows(&[vec![0.0]], vec![3], 3),
            Err(DataError::Label { label: 3, .. })
        ));
        assert!(matches!(
            Dataset::from_rows(&[vec![0.0]], vec![0, 1], 3),
            Err(DataError::LabelCount { .. })
        ));
        assert!(toy(3).split(1.0, 0).is_err());
    }
}
