//! First-order update rules shared by the attacker (ascent on a margin or
//! loss, per perturbation) and the defender (descent on the surrogate loss,
//! per parameter tensor), plus a step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("variable shape {var:?} does not match gradient shape {grad:?}")]
    Shape { var: Vec<usize>, grad: Vec<usize> },
    #[error("state was sized for {expected} values, got {found}")]
    StateSize { expected: usize, found: usize },
    #[error("decay epochs must be strictly increasing: {0:?}")]
    Schedule(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Sgd,
    SignSgd,
    Rmsprop,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    /// RMSprop second-moment decay.
    pub rho: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimKind::Sgd,
            lr: 0.1,
            rho: 0.99,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn new(kind: OptimKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            ..Self::default()
        }
    }
}

/// Optimizer state for one variable.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    config: OptimConfig,
    steps: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimState {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update to `var` in place. Ascent is descent on the
    /// negated gradient, so both directions share every rounding step.
    pub fn step_in_place(
        &mut self,
        var: &mut [f64],
        grad: &[f64],
        direction: Direction,
    ) -> Result<(), OptimError> {
        if var.len() != grad.len() {
            return Err(OptimError::Shape {
                var: vec![var.len()],
                grad: vec![grad.len()],
            });
        }
        let n = var.len();
        let needs_first = matches!(self.config.kind, OptimKind::Adam);
        let needs_second = matches!(self.config.kind, OptimKind::Rmsprop | OptimKind::Adam);
        if self.steps == 0 {
            if needs_first {
                self.first = vec![0.0; n];
            }
            if needs_second {
                self.second = vec![0.0; n];
            }
        } else if needs_second && self.second.len() != n {
            return Err(OptimError::StateSize {
                expected: self.second.len(),
                found: n,
            });
        }
        self.steps += 1;
        let c = self.config;
        let sgn = match direction {
            Direction::Descend => 1.0,
            Direction::Ascend => -1.0,
        };
        match c.kind {
            OptimKind::Sgd => {
                for (x, &g) in var.iter_mut().zip(grad) {
                    let g = sgn * g;
                    *x -= c.lr * g;
                }
            }
            OptimKind::SignSgd => {
                for (x, &g) in var.iter_mut().zip(grad) {
                    let g = sgn * g;
                    *x -= c.lr * sign(g);
                }
            }
            OptimKind::Rmsprop => {
                for ((x, &g), v) in var.iter_mut().zip(grad).zip(&mut self.second) {
                    let g = sgn * g;
                    *v = c.rho * *v + (1.0 - c.rho) * g * g;
                    *x -= c.lr * g / (v.sqrt() + c.eps);
                }
            }
            OptimKind::Adam => {
                let t = self.steps as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (((x, &g), m), v) in var
                    .iter_mut()
                    .zip(grad)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let g = sgn * g;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *x -= c.lr * mhat / (vhat.sqrt() + c.eps);
                }
            }
        }
        Ok(())
    }

    pub fn step(&mut self, var: &Tensor, grad: &Tensor, direction: Direction) -> Result<Tensor, OptimError> {
        if var.shape() != grad.shape() {
            return Err(OptimError::Shape {
                var: var.shape().to_vec(),
                grad: grad.shape().to_vec(),
            });
        }
        let mut out = var.clone();
        self.step_in_place(out.data_mut(), grad.data(), direction)?;
        Ok(out)
    }
}

/// `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub factor: f64,
}

fn default_decay_factor() -> f64 {
    0.1
}

impl LrSchedule {
    pub fn constant(initial: f64) -> Self {
        Self {
            initial,
            decay_epochs: Vec::new(),
            factor: default_decay_factor(),
        }
    }

    pub fn new(initial: f64, decay_epochs: Vec<usize>, factor: f64) -> Result<Self, OptimError> {
        let s = Self {
            initial,
            decay_epochs,
            factor,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(OptimError::Schedule(self.decay_epochs.clone()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.initial * self.factor.powi(decays as i32)
    }
}
