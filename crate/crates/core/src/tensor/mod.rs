//! Dense row-major tensors and a tape for reverse-mode differentiation.
//!
//! The tape records just enough primitives to express affine layers, ReLU,
//! softmax-based losses and logit margins. Gradients flow to every leaf that
//! was registered with `requires_grad`, so the same machinery serves both the
//! attacker (gradients w.r.t. inputs) and the defender (gradients w.r.t.
//! parameters).

pub(crate) mod tape;

pub use tape::{finite_diff_check, Gradients, Tape, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("shape {shape:?} holds {expected} values but {found} were given")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("index {index} out of range for {op} (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense `f64` array. A scalar has an empty shape and one value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "new",
                detail: format!("zero-sized dimension in {shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Length {
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `n×d` matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 {
            return Err(TensorError::Shape {
                op: "from_rows",
                detail: "empty matrix".into(),
            });
        }
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(TensorError::Shape {
                op: "from_rows",
                detail: format!("row {bad} has {} columns, expected {cols}", rows[bad].len()),
            });
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    /// Row `i` of a matrix (the whole buffer for vectors).
    pub fn row(&self, i: usize) -> &[f64] {
        if self.shape.len() < 2 {
            return &self.data;
        }
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        if self.shape.len() < 2 {
            return &mut self.data;
        }
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.contains(&0) {
            return Err(TensorError::Length {
                shape,
                expected,
                found: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Interprets a vector as a single-row matrix.
    pub fn as_row_matrix(&self) -> Self {
        Self {
            shape: vec![1, self.data.len()],
            data: self.data.clone(),
        }
    }

    /// Selects rows of a matrix, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            shape: vec![indices.len(), c],
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_linf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(())
    }
}

/// `input · weight + bias` for `input: n×d`, `weight: d×k`, `bias: k`.
pub fn affine(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d, k) = affine_dims(input.shape(), weight.shape(), bias.shape())?;
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let x = &input.data[i * d..(i + 1) * d];
        let o = &mut out[i * k..(i + 1) * k];
        o.copy_from_slice(&bias.data);
        for (c, &xc) in x.iter().enumerate() {
            let w = &weight.data[c * k..(c + 1) * k];
            for (oj, &wj) in o.iter_mut().zip(w) {
                *oj += xc * wj;
            }
        }
    }
    Ok(Tensor {
        shape: vec![n, k],
        data: out,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub(crate) fn affine_dims(x: &[usize], w: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (x, w, b) {
        ([n, d], [wd, k], [bk]) if d == wd && k == bk => Ok((*n, *d, *k)),
        _ => Err(TensorError::Shape {
            op: "affine",
            detail: format!("input {x:?}, weight {w:?}, bias {b:?}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn affine_examples() {
        // f = W x with W = [[0,-1],[-1,0],[1,0]], stored transposed as d×k.
        let w = Tensor::from_rows(&[vec![0.0, -1.0, 1.0], vec![-1.0, 0.0, 0.0]]).unwrap();
        let b = Tensor::vector(vec![0.0; 3]);
        let x = Tensor::from_rows(&[vec![0.0, -1.0]]).unwrap();
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[1.0, 0.0, 0.0]);

        let zero = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(affine(&zero, &w, &b).unwrap().data(), &[0.0, 0.0, 0.0]);

        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let out = affine(&x, &eye, &Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn affine_rejects_bad_shapes() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3]);
        assert!(matches!(
            affine(&x, &w, &b),
            Err(TensorError::Shape { op: "affine", .. })
        ));
    }

    #[test]
    fn relu_examples() {
        let out = relu(&Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
        let out = relu(&Tensor::vector(vec![-3.0, -0.5]));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn norms() {
        let t = Tensor::vector(vec![3.0, -4.0]);
        assert_eq!(t.norm_l2(), 5.0);
        assert_eq!(t.norm_linf(), 4.0);
    }
}
