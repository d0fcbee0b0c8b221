//! Synthetic dataset generators and the dataset specification used by configs.

use std::path::PathBuf;

use betaat::data::{DataError, Dataset};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::idx::{self, IdxError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("need at least one sample per class: n = {n}, K = {classes}")]
    TooFewSamples { n: usize, classes: usize },
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianBlobs,
    TwoMoons3class,
    XorGrid,
    IdxFiles,
}

/// How raw features are brought into the unit box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Per-feature affine map of the observed range onto `[0,1]`.
    #[default]
    MinMax,
    /// Clamp into `[0,1]`, keeping the generator's geometry.
    Clip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub classes: usize,
    pub dim: usize,
    pub noise: f64,
    /// Distance between neighboring blob centers.
    pub gap: f64,
    pub scaling: Scaling,
    pub seed: u64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Keep only the first `limit` IDX samples.
    pub limit: Option<usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::GaussianBlobs,
            n: 600,
            classes: 3,
            dim: 2,
            noise: 0.05,
            gap: 0.4,
            scaling: Scaling::MinMax,
            seed: 0,
            images: None,
            labels: None,
            limit: None,
        }
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, DatasetError> {
    if spec.kind == DatasetKind::IdxFiles {
        let (Some(images), Some(labels)) = (&spec.images, &spec.labels) else {
            return Err(DatasetError::Spec("idx_files needs `images` and `labels` paths".into()));
        };
        let d = idx::load_idx(images, labels)?;
        return Ok(match spec.limit {
            Some(l) if l < d.len() => d.subset(&(0..l).collect::<Vec<_>>()).ok_or(DataError::Empty)?,
            _ => d,
        });
    }
    if spec.classes < 2 {
        return Err(DatasetError::Spec("at least two classes are required".into()));
    }
    if spec.n < spec.classes {
        return Err(DatasetError::TooFewSamples { n: spec.n, classes: spec.classes });
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(DatasetError::Spec(format!("noise must be non-negative, got {}", spec.noise)));
    }
    let dim = match spec.kind {
        DatasetKind::GaussianBlobs => spec.dim.max(2),
        _ => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let k = spec.classes;
    let rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&c| {
            let mut p = match spec.kind {
                DatasetKind::GaussianBlobs => blob_center(c, k, dim, spec.gap),
                DatasetKind::TwoMoons3class => moon_point(c, rng.random()),
                DatasetKind::XorGrid => xor_cell_point(c, k, &mut rng),
                DatasetKind::IdxFiles => unreachable!(),
            };
            for v in &mut p {
                *v += spec.noise * normal.sample(&mut rng);
            }
            p
        })
        .collect();
    let rows = scale(rows, spec.scaling);
    Ok(Dataset::from_rows(&rows, labels, k)?)
}

/// Vertices of a regular `K`-gon with side `gap`, centered at `0.5`.
fn blob_center(c: usize, k: usize, dim: usize, gap: f64) -> Vec<f64> {
    let radius = gap / (2.0 * (std::f64::consts::PI / k as f64).sin());
    let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64 + std::f64::consts::FRAC_PI_2;
    let mut p = vec![0.5; dim];
    p[0] += radius * angle.cos();
    p[1] += radius * angle.sin();
    p
}

/// Three interleaved half circles; `t ∈ [0,1)` is the position along the arc.
fn moon_point(c: usize, t: f64) -> Vec<f64> {
    let a = std::f64::consts::PI * t;
    match c % 3 {
        0 => vec![a.cos(), a.sin()],
        1 => vec![1.0 - a.cos(), 0.5 - a.sin()],
        _ => vec![2.0 + a.cos(), a.sin()],
    }
}

/// Uniform point in a cell of a `K×K` checkerboard whose cell `(a, b)` has class `(a + b) mod K`.
fn xor_cell_point(c: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a = rng.random_range(0..k);
    let b = (c + k - a % k) % k;
    let cell = 1.0 / k as f64;
    vec![
        (a as f64 + rng.random::<f64>()) * cell,
        (b as f64 + rng.random::<f64>()) * cell,
    ]
}

fn scale(mut rows: Vec<Vec<f64>>, scaling: Scaling) -> Vec<Vec<f64>> {
    let d = rows[0].len();
    match scaling {
        Scaling::Clip => {
            for r in &mut rows {
                for v in r.iter_mut() {
                    *v = v.clamp(0.0, 1.0);
                }
            }
        }
        Scaling::MinMax => {
            for c in 0..d {
                let lo = rows.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
                for r in &mut rows {
                    r[c] = if hi > lo { ((r[c] - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
                }
            }
        }
    }
    rows
}

/// Shuffles with `seed` and holds out the last `⌊fraction·n⌋` rows as a test set.
pub fn train_test_split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Option<Dataset>), DatasetError> {
    Ok(data.split(fraction, seed ^ 0x7e57)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: DatasetKind) -> DatasetSpec {
        DatasetSpec { kind, n: 300, seed: 4, ..DatasetSpec::default() }
    }

    #[test]
    fn blobs_are_balanced_and_boxed() {
        let d = generate_dataset(&spec(DatasetKind::GaussianBlobs)).unwrap();
        assert_eq!(d.class_counts(), vec![100, 100, 100]);
        assert!(d.in_unit_box());
    }

    #[test]
    fn every_kind_is_deterministic_and_balanced() {
        for kind in [DatasetKind::GaussianBlobs, DatasetKind::TwoMoons3class, DatasetKind::XorGrid] {
            let s = DatasetSpec { n: 301, ..spec(kind) };
            let a = generate_dataset(&s).unwrap();
            assert_eq!(a, generate_dataset(&s).unwrap());
            let counts = a.class_counts();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{kind:?}: {counts:?}");
            assert!(a.in_unit_box());
            let b = generate_dataset(&DatasetSpec { seed: 5, ..s }).unwrap();
            assert_ne!(a, b);
        }
    }

    #[test]
    fn zero_noise_puts_points_on_centers() {
        let s = DatasetSpec { noise: 0.0, scaling: Scaling::Clip, ..spec(DatasetKind::GaussianBlobs) };
        let d = generate_dataset(&s).unwrap();
        for i in 0..d.len() {
            let c = blob_center(d.labels()[i], 3, 2, 0.4);
            assert_eq!(d.features().row(i), c.as_slice());
        }
    }

    #[test]
    fn blob_centers_are_gap_apart() {
        for k in [3, 4, 6] {
            let a = blob_center(0, k, 2, 0.4);
            let b = blob_center(1, k, 2, 0.4);
            let dist = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            assert!((dist - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let s = DatasetSpec { n: 2, ..spec(DatasetKind::GaussianBlobs) };
        assert!(matches!(generate_dataset(&s), Err(DatasetError::TooFewSamples { .. })));
    }
}
