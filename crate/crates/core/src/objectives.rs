//! Losses and margins: cross-entropy, 0-1 error, the negative margin
//! `M_j = f_j − f_y`, its maximum over classes, and the entropy-smoothed
//! (log-sum-exp) margin with its closed-form simplex weights.
//!
//! Each quantity has a plain version on logit slices and, where it is
//! optimized, a taped row-wise version operating on `n×K` logits.

use thiserror::Error;

use crate::models::argmax;
use crate::tensor::tape::{masked_lse, masked_softmax};
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("class {class} out of range for {classes} classes")]
    Class { class: usize, classes: usize },
    #[error("at least two classes are required, got {0}")]
    TooFewClasses(usize),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogBase {
    #[default]
    E,
    Two,
}

impl LogBase {
    fn factor(self) -> f64 {
        match self {
            LogBase::E => 1.0,
            LogBase::Two => std::f64::consts::LOG2_E,
        }
    }
}

fn check_class(class: usize, classes: usize) -> Result<()> {
    if class >= classes {
        return Err(ObjectiveError::Class { class, classes });
    }
    Ok(())
}

/// `−log_base softmax(logits)_y`.
pub fn cross_entropy(logits: &[f64], y: usize, base: LogBase) -> Result<f64> {
    check_class(y, logits.len())?;
    Ok((masked_lse(logits, None) - logits[y]) * base.factor())
}

/// `−log_base p_y` for an already-normalized probability vector.
pub fn cross_entropy_of_probs(probs: &[f64], y: usize, base: LogBase) -> Result<f64> {
    check_class(y, probs.len())?;
    Ok(-probs[y].ln() * base.factor())
}

pub fn zero_one_error(logits: &[f64], y: usize) -> Result<u8> {
    check_class(y, logits.len())?;
    Ok(u8::from(argmax(logits) != y))
}

pub fn negative_margin(logits: &[f64], y: usize, j: usize) -> Result<f64> {
    check_class(y, logits.len())?;
    check_class(j, logits.len())?;
    Ok(logits[j] - logits[y])
}

/// `(j*, max_{j≠y} f_j − f_y)`, lowest index on ties.
pub fn max_margin_over_classes(logits: &[f64], y: usize) -> Result<(usize, f64)> {
    if logits.len() < 2 {
        return Err(ObjectiveError::TooFewClasses(logits.len()));
    }
    check_class(y, logits.len())?;
    let mut best: Option<(usize, f64)> = None;
    for (j, &v) in logits.iter().enumerate() {
        if j == y {
            continue;
        }
        let m = v - logits[y];
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((j, m));
        }
    }
    Ok(best.expect("K >= 2"))
}

/// Negative margins `f_j − f_y` of one sample; the true-class entry is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginVector {
    values: Vec<f64>,
    true_class: usize,
}

impl MarginVector {
    pub fn from_logits(logits: &[f64], y: usize) -> Result<Self> {
        check_class(y, logits.len())?;
        Ok(Self {
            values: logits.iter().map(|v| v - logits[y]).collect(),
            true_class: y,
        })
    }

    /// Takes margins directly; `values[y]` is forced to 0.
    pub fn new(mut values: Vec<f64>, y: usize) -> Result<Self> {
        check_class(y, values.len())?;
        values[y] = 0.0;
        Ok(Self {
            values,
            true_class: y,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn true_class(&self) -> usize {
        self.true_class
    }

    pub fn classes(&self) -> usize {
        self.values.len()
    }

    pub fn max_off_true(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != self.true_class)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConfig {
    mu: f64,
}

impl SmoothingConfig {
    pub fn new(mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(ObjectiveError::Temperature(mu));
        }
        Ok(Self { mu })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }
}

/// `(1/μ) log Σ_{j≠y} exp(μ m_j)`.
pub fn lse_smoothed_margin(margins: &MarginVector, cfg: SmoothingConfig) -> Result<f64> {
    if margins.classes() < 2 {
        return Err(ObjectiveError::TooFewClasses(margins.classes()));
    }
    let scaled: Vec<f64> = margins.values.iter().map(|m| m * cfg.mu).collect();
    Ok(masked_lse(&scaled, Some(margins.true_class)) / cfg.mu)
}

/// Maximizer of `⟨λ, m⟩ − (1/μ) Σ λ_j log λ_j` over the simplex with `λ_y = 0`.
pub fn lambda_star(margins: &MarginVector, cfg: SmoothingConfig) -> Result<Vec<f64>> {
    if margins.classes() < 2 {
        return Err(ObjectiveError::TooFewClasses(margins.classes()));
    }
    let scaled: Vec<f64> = margins.values.iter().map(|m| m * cfg.mu).collect();
    Ok(masked_softmax(&scaled, Some(margins.true_class)))
}

/// Shannon entropy `−Σ λ log λ` (natural log, `0 log 0 = 0`).
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Row-wise natural-log cross-entropy of `n×K` logits, a length-`n` vector.
pub fn ce_rows(tape: &mut Tape, logits: Var, y: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax(logits)?;
    let picked = tape.pick(ls, y)?;
    Ok(tape.scale(picked, -1.0))
}

/// Mean cross-entropy over the batch, a scalar.
pub fn mean_ce(tape: &mut Tape, logits: Var, y: &[usize]) -> Result<Var> {
    let rows = ce_rows(tape, logits, y)?;
    Ok(tape.mean(rows))
}

/// Row-wise `f_{target_i} − f_{y_i}`.
pub fn margin_rows(tape: &mut Tape, logits: Var, y: &[usize], target: &[usize]) -> Result<Var> {
    let ft = tape.pick(logits, target)?;
    let fy = tape.pick(logits, y)?;
    Ok(tape.sub(ft, fy)?)
}

/// Row-wise smoothed margin `(1/μ) LSE_{j≠y}(μ f_j) − f_y`, which equals
/// `(1/μ) LSE_{j≠y}(μ m_j)` because the `f_y` shift factors out.
pub fn lse_margin_rows(tape: &mut Tape, logits: Var, y: &[usize], cfg: SmoothingConfig) -> Result<Var> {
    let scaled = tape.scale(logits, cfg.mu);
    let lse = tape.logsumexp(scaled, Some(y))?;
    let lse = tape.scale(lse, 1.0 / cfg.mu);
    let fy = tape.pick(logits, y)?;
    Ok(tape.sub(lse, fy)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy(&[0.0; 10], 0, LogBase::E).unwrap();
        assert!(close(ce, 10f64.ln(), 1e-15));

        let eps = 0.01;
        let mut zb = vec![0.0; 10];
        zb[0] = 0.5 - eps;
        zb[1] = 0.5 + eps;
        let v = cross_entropy_of_probs(&zb, 0, LogBase::E).unwrap();
        assert!(close(v, -(0.49f64).ln(), 1e-15) && close(v, 0.71335, 1e-5));

        let mut za = vec![0.1; 10];
        za[0] = 0.1 + eps;
        za[1] = 0.1 - eps;
        let v = cross_entropy_of_probs(&za, 0, LogBase::E).unwrap();
        assert!(close(v, -(0.11f64).ln(), 1e-15) && close(v, 2.20727, 1e-5));

        assert!(cross_entropy(&[0.0, 1.0], 2, LogBase::E).is_err());
    }

    #[test]
    fn zero_one_examples() {
        assert_eq!(zero_one_error(&[0.2, 0.0, 0.0], 0).unwrap(), 0);
        assert_eq!(zero_one_error(&[0.434, -0.566, 0.566], 0).unwrap(), 1);
        assert_eq!(zero_one_error(&[1.0, 1.0, 1.0], 0).unwrap(), 0);
    }

    #[test]
    fn margin_examples() {
        assert!(close(negative_margin(&[0.2, 0.0, 0.0], 0, 2).unwrap(), -0.2, 1e-15));
        assert_eq!(negative_margin(&[0.3, 0.1], 1, 1).unwrap(), 0.0);
        let s = 0.8 / 2f64.sqrt();
        let m = negative_margin(&[1.0 - s, -s, s], 0, 2).unwrap();
        assert!(close(m, 0.8 * 2f64.sqrt() - 1.0, 1e-15) && close(m, 0.134, 3e-3));
    }

    #[test]
    fn max_margin_examples() {
        let (j, v) = max_margin_over_classes(&[0.2, 0.0, 0.0], 0).unwrap();
        assert_eq!(j, 1);
        assert!(close(v, -0.2, 1e-15));
        assert_eq!(max_margin_over_classes(&[0.0, 1.0, 0.0], 0).unwrap(), (1, 1.0));
        assert_eq!(max_margin_over_classes(&[0.5, 0.5, 0.5], 1).unwrap(), (0, 0.0));
        assert!(max_margin_over_classes(&[1.0], 0).is_err());
    }

    #[test]
    fn lse_examples() {
        let mu = |v| SmoothingConfig::new(v).unwrap();
        let m = MarginVector::new(vec![0.0, 0.37], 0).unwrap();
        assert!(close(lse_smoothed_margin(&m, mu(3.0)).unwrap(), 0.37, 1e-15));

        let m = MarginVector::new(vec![0.0, 0.0, 0.0], 0).unwrap();
        assert!(close(lse_smoothed_margin(&m, mu(1.0)).unwrap(), 2f64.ln(), 1e-15));

        let m = MarginVector::new(vec![0.0, -0.2, -0.2], 0).unwrap();
        let v = lse_smoothed_margin(&m, mu(10.0)).unwrap();
        assert!(close(v, -0.2 + 2f64.ln() / 10.0, 1e-15));
        assert!(close(v, -0.13069, 1e-5));

        assert!(SmoothingConfig::new(0.0).is_err());
        assert!(SmoothingConfig::new(-1.0).is_err());
    }

    #[test]
    fn lambda_star_examples() {
        let mu = |v| SmoothingConfig::new(v).unwrap();
        let m = MarginVector::new(vec![0.0, 0.4, 0.4], 0).unwrap();
        assert_eq!(lambda_star(&m, mu(5.0)).unwrap(), vec![0.0, 0.5, 0.5]);

        let m = MarginVector::new(vec![0.0, 0.3, 0.2], 0).unwrap();
        let l = lambda_star(&m, mu(1000.0)).unwrap();
        assert!(l[1] >= 0.999, "{l:?}");

        for mu_v in [0.01, 1.0, 1e6] {
            let m = MarginVector::new(vec![-3.0, 0.0], 1).unwrap();
            assert_eq!(lambda_star(&m, mu(mu_v)).unwrap(), vec![1.0, 0.0]);
        }
    }

    #[test]
    fn taped_rows_match_plain_versions() {
        let logits = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.5, 0.2, 0.2]]).unwrap();
        let y = [2, 0];
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let ce = ce_rows(&mut tape, l, &y).unwrap();
        let mr = margin_rows(&mut tape, l, &y, &[1, 2]).unwrap();
        let cfg = SmoothingConfig::new(4.0).unwrap();
        let lse = lse_margin_rows(&mut tape, l, &y, cfg).unwrap();
        for (i, &yi) in y.iter().enumerate() {
            let row = logits.row(i);
            assert!(close(tape.value(ce).data()[i], cross_entropy(row, yi, LogBase::E).unwrap(), 1e-14));
            let mv = MarginVector::from_logits(row, yi).unwrap();
            assert!(close(tape.value(lse).data()[i], lse_smoothed_margin(&mv, cfg).unwrap(), 1e-14));
        }
        assert!(close(tape.value(mr).data()[0], -1.0 - 2.0, 1e-15));
        assert!(close(tape.value(mr).data()[1], 0.2 - 1.5, 1e-15));
    }
}
