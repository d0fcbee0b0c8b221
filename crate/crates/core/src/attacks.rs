//! Perturbation search over `B_ε(x) ∩ [0,1]^d`.
//!
//! * [`fgsm`] and [`pgd_surrogate`] ascend the cross-entropy surrogate.
//! * [`targeted_margin_ascent`] ascends one negative margin `f_j − f_y`;
//!   [`beta_attack`] runs it for every `j ≠ y` and keeps the class whose
//!   perturbation achieved the largest margin.
//! * [`closed_form_linear_attack`] solves the per-class problems exactly for
//!   linear models and [`grid_oracle_attack`] enumerates a grid over the
//!   feasible set; both serve as oracles for the iterative attacks.
//!
//! Batched entry points take one RNG key per row. Every row draws its random
//! start from a stream derived from `(seed, key, target)`, and all row
//! arithmetic is independent of the other rows, so results do not depend on
//! batch composition or on how rows are split across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{argmax, Model, ModelError, ModelKind};
use crate::objectives::{self, ObjectiveError};
use crate::optim::{sign, Direction, OptimConfig, OptimError, OptimKind, OptimState};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error("target class {0} equals the true class")]
    TargetIsTrueClass(usize),
    #[error("class {class} out of range for {classes} classes")]
    Class { class: usize, classes: usize },
    #[error("{attack} requires an l_inf configuration")]
    NormUnsupported { attack: &'static str },
    #[error("grid oracle is limited to d <= {max}, got d = {dim}")]
    DimensionTooLarge { dim: usize, max: usize },
    #[error("closed-form attack needs a linear model")]
    NotLinear,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

pub type Result<T> = std::result::Result<T, AttackError>;

pub const GRID_MAX_DIM: usize = 3;
const CHUNK_ROWS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "l_inf")]
    Linf,
    #[serde(rename = "l2")]
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    Lowest,
    Highest,
}

/// How the final class is chosen among per-class results: classes whose
/// margin is within `tolerance` of the best count as tied, and `tie_break`
/// picks among them.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSelection {
    pub tie_break: TieBreak,
    pub tolerance: f64,
}

impl TargetSelection {
    /// Picks among `(class, margin)` candidates.
    pub fn select(&self, candidates: impl IntoIterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
        let cands: Vec<(usize, f64)> = candidates.into_iter().collect();
        let best = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        let tied = cands.iter().filter(|c| c.1 >= best - self.tolerance);
        match self.tie_break {
            TieBreak::Lowest => tied.min_by_key(|c| c.0).copied(),
            TieBreak::Highest => tied.max_by_key(|c| c.0).copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub norm: Norm,
    pub steps: usize,
    /// `None` picks sign-SGD for surrogate attacks and RMSprop for margin attacks.
    pub optimizer: Option<OptimKind>,
    /// `None` means `2/255` when `ε = 8/255`, else `2ε/T′`.
    pub step_size: Option<f64>,
    pub rho: f64,
    pub clip_box: bool,
    pub seed: u64,
    pub selection: TargetSelection,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            norm: Norm::Linf,
            steps: 10,
            optimizer: None,
            step_size: None,
            rho: 0.99,
            clip_box: true,
            seed: 0,
            selection: TargetSelection::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(AttackError::Config(format!(
                "epsilon must be finite and non-negative, got {}",
                self.epsilon
            )));
        }
        if let Some(a) = self.step_size {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(AttackError::Config(format!("step size must be non-negative, got {a}")));
            }
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(AttackError::Config(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        if self.selection.tolerance.is_nan() || self.selection.tolerance < 0.0 {
            return Err(AttackError::Config("selection tolerance must be non-negative".into()));
        }
        Ok(())
    }

    pub fn effective_step_size(&self) -> f64 {
        if let Some(a) = self.step_size {
            return a;
        }
        if (self.epsilon - 8.0 / 255.0).abs() < 1e-12 {
            2.0 / 255.0
        } else {
            2.0 * self.epsilon / self.steps.max(1) as f64
        }
    }

    fn optim(&self, fallback: OptimKind) -> OptimConfig {
        OptimConfig {
            rho: self.rho,
            ..OptimConfig::new(self.optimizer.unwrap_or(fallback), self.effective_step_size())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub eta_star: Tensor,
    pub j_star: usize,
    pub margin_value: f64,
    /// `f(x + η*)` misclassifies.
    pub success: bool,
    /// Per-class negative margins; entry `y` is 0.
    pub margins: Tensor,
}

impl AttackResult {
    pub fn perturbed(&self, x: &Tensor) -> Tensor {
        Tensor::vector(x.data().iter().zip(self.eta_star.data()).map(|(a, b)| a + b).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Beta,
    GridOracle,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Beta => "beta",
            AttackKind::GridOracle => "grid_oracle",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fgsm" => Ok(Self::Fgsm),
            "pgd" => Ok(Self::Pgd),
            "beta" => Ok(Self::Beta),
            "grid_oracle" | "grid" | "oracle" => Ok(Self::GridOracle),
            other => Err(format!("unknown attack `{other}`")),
        }
    }
}

// ---------------------------------------------------------------------------
// Feasible set

fn bounds(x: f64, cfg: &AttackConfig) -> (f64, f64) {
    let (mut lo, mut hi) = (x - cfg.epsilon, x + cfg.epsilon);
    if cfg.clip_box {
        lo = lo.max(0.0);
        hi = hi.min(1.0);
    }
    (lo, hi)
}

/// Projects the perturbed point `candidate` (one row) onto the feasible set around `x`.
fn project_row(x: &[f64], candidate: &mut [f64], cfg: &AttackConfig) {
    match cfg.norm {
        Norm::Linf => {
            for (c, &xi) in candidate.iter_mut().zip(x) {
                let (lo, hi) = bounds(xi, cfg);
                *c = c.clamp(lo, hi);
            }
        }
        Norm::L2 => {
            let norm = candidate
                .iter()
                .zip(x)
                .map(|(c, xi)| (c - xi) * (c - xi))
                .sum::<f64>()
                .sqrt();
            if norm > cfg.epsilon {
                let s = if norm > 0.0 { cfg.epsilon / norm } else { 0.0 };
                for (c, &xi) in candidate.iter_mut().zip(x) {
                    *c = xi + (*c - xi) * s;
                }
            }
            if cfg.clip_box {
                for c in candidate.iter_mut() {
                    *c = c.clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Projection of a perturbed point onto `B_ε(x)` (intersected with the unit
/// box when `clip_box` is set).
pub fn project(x: &Tensor, candidate: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    x.expect_same_shape(candidate, "project")?;
    let mut out = candidate.clone();
    project_row(x.data(), out.data_mut(), cfg);
    Ok(out)
}

fn norm_of(eta: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::Linf => eta.iter().fold(0.0, |m, v| m.max(v.abs())),
        Norm::L2 => eta.iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

/// Checks `‖η‖ ≤ ε + tol` and, when boxed, `x + η ∈ [0,1]^d` (within `tol`).
pub fn is_feasible(x: &Tensor, eta: &Tensor, cfg: &AttackConfig, tol: f64) -> bool {
    if norm_of(eta.data(), cfg.norm) > cfg.epsilon + tol {
        return false;
    }
    !cfg.clip_box
        || x
            .data()
            .iter()
            .zip(eta.data())
            .all(|(a, b)| a + b >= -tol && a + b <= 1.0 + tol)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG stream for one (seed, row key, target) triple.
pub fn stream_rng(seed: u64, key: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed) ^ key) ^ stream))
}

/// Stream id used by the untargeted surrogate attack.
const SURROGATE_STREAM: u64 = u64::MAX;

/// Uniform start in `[max(x−ε,0), min(x+ε,1)]`, projected; returns the perturbed point.
fn random_start(x: &[f64], cfg: &AttackConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut p: Vec<f64> = x
        .iter()
        .map(|&xi| {
            let (lo, hi) = bounds(xi, cfg);
            let u: f64 = rng.random();
            lo + (hi - lo) * u
        })
        .collect();
    project_row(x, &mut p, cfg);
    p
}

// ---------------------------------------------------------------------------
// Iterative ascent

#[derive(Debug, Clone, Copy)]
enum Objective<'a> {
    Margin(&'a [usize]),
    CrossEntropy,
}

struct Ascent {
    /// Perturbed points, `n×d`.
    points: Tensor,
    /// Objective value at `points`, per row.
    values: Vec<f64>,
}

fn check_batch(model: &Model, x: &Tensor, y: &[usize], keys: &[u64]) -> Result<(usize, usize)> {
    let (n, d) = match x.shape() {
        [n, d] => (*n, *d),
        s => return Err(TensorError::Shape { op: "attack", detail: format!("expected n×d, got {s:?}") }.into()),
    };
    if d != model.input_dim() {
        return Err(ModelError::InputDim { expected: model.input_dim(), found: d }.into());
    }
    if y.len() != n || keys.len() != n {
        return Err(AttackError::Config(format!(
            "{n} rows but {} labels and {} keys",
            y.len(),
            keys.len()
        )));
    }
    let k = model.classes();
    if let Some(&bad) = y.iter().find(|&&c| c >= k) {
        return Err(AttackError::Class { class: bad, classes: k });
    }
    Ok((n, d))
}

fn objective_rows(tape: &mut Tape, logits: crate::tensor::Var, y: &[usize], obj: Objective<'_>) -> Result<crate::tensor::Var> {
    Ok(match obj {
        Objective::Margin(t) => objectives::margin_rows(tape, logits, y, t)?,
        Objective::CrossEntropy => objectives::ce_rows(tape, logits, y)?,
    })
}

/// Projected ascent on a per-row objective for one chunk of rows. With
/// `keep_best` the best iterate per row is returned, otherwise the last.
#[allow(clippy::too_many_arguments)]
fn ascend_chunk(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    keys: &[u64],
    obj: Objective<'_>,
    cfg: &AttackConfig,
    optim: OptimConfig,
    keep_best: bool,
) -> Result<Ascent> {
    let (n, d) = (x.rows(), x.cols());
    let mut points = Vec::with_capacity(n * d);
    for i in 0..n {
        let stream = match obj {
            Objective::Margin(t) => t[i] as u64,
            Objective::CrossEntropy => SURROGATE_STREAM,
        };
        let mut rng = stream_rng(cfg.seed, keys[i], stream);
        points.extend(random_start(x.row(i), cfg, &mut rng));
    }
    let mut points = Tensor::new(vec![n, d], points)?;
    let mut best_points = points.clone();
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut state = OptimState::new(optim);

    for t in 0..=cfg.steps {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let z = tape.leaf(points.clone(), true);
        let logits = model.forward(&mut tape, &bound, z)?;
        let rows = objective_rows(&mut tape, logits, y, obj)?;
        let vals = tape.value(rows).data().to_vec();
        for i in 0..n {
            if !keep_best || vals[i] > best[i] {
                best[i] = vals[i];
                best_points.row_mut(i).copy_from_slice(points.row(i));
            }
        }
        if t == cfg.steps {
            break;
        }
        let total = tape.sum(rows);
        let grads = tape.backward(total)?;
        // x + η is the leaf, so its gradient is the gradient w.r.t. η.
        let mut eta = points.sub(x)?;
        state.step_in_place(eta.data_mut(), grads.wrt(z).data(), Direction::Ascend)?;
        for i in 0..n {
            let row: Vec<f64> = x.row(i).iter().zip(eta.row(i)).map(|(a, b)| a + b).collect();
            let p = points.row_mut(i);
            p.copy_from_slice(&row);
            project_row(x.row(i), p, cfg);
        }
    }
    Ok(Ascent {
        points: best_points,
        values: best,
    })
}

/// Runs `ascend_chunk` over row chunks in parallel and reassembles in order.
#[allow(clippy::too_many_arguments)]
fn ascend_batch(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    keys: &[u64],
    obj: Objective<'_>,
    cfg: &AttackConfig,
    optim: OptimConfig,
    keep_best: bool,
) -> Result<Ascent> {
    let n = x.rows();
    let starts: Vec<usize> = (0..n).step_by(CHUNK_ROWS).collect();
    let parts: Vec<Result<Ascent>> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + CHUNK_ROWS).min(n);
            let idx: Vec<usize> = (s..e).collect();
            let obj = match obj {
                Objective::Margin(t) => Objective::Margin(&t[s..e]),
                o => o,
            };
            ascend_chunk(model, &x.select_rows(&idx), &y[s..e], &keys[s..e], obj, cfg, optim, keep_best)
        })
        .collect();
    let mut data = Vec::with_capacity(x.len());
    let mut values = Vec::with_capacity(n);
    for p in parts {
        let p = p?;
        data.extend_from_slice(p.points.data());
        values.extend(p.values);
    }
    Ok(Ascent {
        points: Tensor::new(vec![n, x.cols()], data)?,
        values,
    })
}

/// Per-class perturbations for a batch: `offsets[k-1]` holds the result for
/// targets `(y_i + k) mod K`, `k = 1..K`.
#[derive(Debug, Clone)]
pub struct PerClass {
    pub targets: Vec<Vec<usize>>,
    /// Perturbed points `x + η`, `n×d`, one matrix per offset.
    pub points: Vec<Tensor>,
    /// Achieved margin `M(x + η_j)_j`, per offset and row.
    pub margins: Vec<Vec<f64>>,
}

impl PerClass {
    pub fn offsets(&self) -> usize {
        self.targets.len()
    }
}

/// Runs the targeted margin ascent for every non-true class of every row.
pub fn per_class_margin_ascent(model: &Model, x: &Tensor, y: &[usize], keys: &[u64], cfg: &AttackConfig) -> Result<PerClass> {
    cfg.validate()?;
    check_batch(model, x, y, keys)?;
    let k = model.classes();
    let optim = cfg.optim(OptimKind::Rmsprop);
    let mut out = PerClass {
        targets: Vec::with_capacity(k - 1),
        points: Vec::with_capacity(k - 1),
        margins: Vec::with_capacity(k - 1),
    };
    for offset in 1..k {
        let targets: Vec<usize> = y.iter().map(|&c| (c + offset) % k).collect();
        let a = ascend_batch(model, x, y, keys, Objective::Margin(&targets), cfg, optim, true)?;
        out.targets.push(targets);
        out.points.push(a.points);
        out.margins.push(a.values);
    }
    Ok(out)
}

fn row_vec(t: &Tensor, i: usize) -> Tensor {
    Tensor::vector(t.row(i).to_vec())
}

fn eta_of(point: &[f64], x: &[f64]) -> Tensor {
    Tensor::vector(point.iter().zip(x).map(|(p, xi)| p - xi).collect())
}

fn single(x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        [_] => Ok(x.as_row_matrix()),
        [1, _] => Ok(x.clone()),
        s => Err(TensorError::Shape { op: "attack", detail: format!("expected one sample, got {s:?}") }.into()),
    }
}

/// Projected ascent on `M(x+η, y)_j` from a uniform random start, `T′`
/// optimizer steps. Returns the best iterate's perturbation and margin.
pub fn targeted_margin_ascent(model: &Model, x: &Tensor, y: usize, j: usize, cfg: &AttackConfig) -> Result<(Tensor, f64)> {
    cfg.validate()?;
    let k = model.classes();
    if j >= k {
        return Err(AttackError::Class { class: j, classes: k });
    }
    if j == y {
        return Err(AttackError::TargetIsTrueClass(j));
    }
    let xb = single(x)?;
    check_batch(model, &xb, &[y], &[0])?;
    let a = ascend_batch(model, &xb, &[y], &[0], Objective::Margin(&[j]), cfg, cfg.optim(OptimKind::Rmsprop), true)?;
    Ok((eta_of(a.points.row(0), xb.row(0)), a.values[0]))
}

fn result_at(model: &Model, x: &[f64], y: usize, point: &[f64], j_star: usize, margin_value: f64, margins: Vec<f64>) -> Result<AttackResult> {
    let logits = model.logits(&Tensor::vector(point.to_vec()))?;
    Ok(AttackResult {
        eta_star: eta_of(point, x),
        j_star,
        margin_value,
        success: argmax(logits.row(0)) != y,
        margins: Tensor::vector(margins),
    })
}

/// Result for an untargeted perturbation: margins measured at the final point.
fn untargeted_result(model: &Model, x: &[f64], y: usize, point: &[f64]) -> Result<AttackResult> {
    let logits = model.logits(&Tensor::vector(point.to_vec()))?;
    let row = logits.row(0);
    let (j, m) = objectives::max_margin_over_classes(row, y)?;
    let margins = row.iter().map(|v| v - row[y]).collect();
    result_at(model, x, y, point, j, m, margins)
}

/// Best Targeted Attack over a batch.
pub fn beta_attack_batch(model: &Model, x: &Tensor, y: &[usize], keys: &[u64], cfg: &AttackConfig) -> Result<Vec<AttackResult>> {
    let pc = per_class_margin_ascent(model, x, y, keys, cfg)?;
    let k = model.classes();
    (0..x.rows())
        .map(|i| {
            let mut margins = vec![0.0; k];
            for o in 0..pc.offsets() {
                margins[pc.targets[o][i]] = pc.margins[o][i];
            }
            let (j_star, m) = cfg
                .selection
                .select((0..k).filter(|&j| j != y[i]).map(|j| (j, margins[j])))
                .expect("K >= 2");
            let o = (j_star + k - y[i]) % k - 1;
            result_at(model, x.row(i), y[i], pc.points[o].row(i), j_star, m, margins)
        })
        .collect()
}

pub fn beta_attack(model: &Model, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    let xb = single(x)?;
    Ok(beta_attack_batch(model, &xb, &[y], &[0], cfg)?.remove(0))
}

/// `T′` projected ascent steps on the cross-entropy from a uniform random start.
pub fn pgd_surrogate_batch(model: &Model, x: &Tensor, y: &[usize], keys: &[u64], cfg: &AttackConfig) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    check_batch(model, x, y, keys)?;
    let a = ascend_batch(model, x, y, keys, Objective::CrossEntropy, cfg, cfg.optim(OptimKind::SignSgd), false)?;
    (0..x.rows())
        .map(|i| untargeted_result(model, x.row(i), y[i], a.points.row(i)))
        .collect()
}

pub fn pgd_surrogate(model: &Model, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    let xb = single(x)?;
    Ok(pgd_surrogate_batch(model, &xb, &[y], &[0], cfg)?.remove(0))
}

/// One signed step of size ε on the cross-entropy gradient at `x`.
pub fn fgsm_batch(model: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    if cfg.norm != Norm::Linf {
        return Err(AttackError::NormUnsupported { attack: "fgsm" });
    }
    let keys = vec![0; y.len()];
    check_batch(model, x, y, &keys)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let z = tape.leaf(x.clone(), true);
    let logits = model.forward(&mut tape, &bound, z)?;
    let rows = objectives::ce_rows(&mut tape, logits, y)?;
    let total = tape.sum(rows);
    let grads = tape.backward(total)?;
    let g = grads.wrt(z);
    (0..x.rows())
        .map(|i| {
            let xi = x.row(i);
            let mut p: Vec<f64> = xi
                .iter()
                .zip(g.row(i))
                .map(|(a, gi)| a + cfg.epsilon * sign(*gi))
                .collect();
            project_row(xi, &mut p, cfg);
            untargeted_result(model, xi, y[i], &p)
        })
        .collect()
}

pub fn fgsm(model: &Model, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    let xb = single(x)?;
    Ok(fgsm_batch(model, &xb, &[y], cfg)?.remove(0))
}

/// Exact per-class maximizers of a linear model's margins over the ε-ball
/// (no box): `η_j = ε Δw/‖Δw‖₂` for l2 and `ε sign(Δw)` for l_inf, where
/// `Δw = w_j − w_y`. The final class follows `selection`.
pub fn closed_form_linear_attack(
    model: &Model,
    x: &Tensor,
    y: usize,
    epsilon: f64,
    norm: Norm,
    selection: TargetSelection,
) -> Result<AttackResult> {
    if model.spec().kind != ModelKind::Linear {
        return Err(AttackError::NotLinear);
    }
    let (rows, bias) = model.linear_rows().ok_or(AttackError::NotLinear)?;
    let k = rows.len();
    if y >= k {
        return Err(AttackError::Class { class: y, classes: k });
    }
    let x = single(x)?;
    let xs = x.row(0);
    let mut margins = vec![0.0; k];
    let mut points = vec![xs.to_vec(); k];
    for j in (0..k).filter(|&j| j != y) {
        let dw: Vec<f64> = rows[j].iter().zip(&rows[y]).map(|(a, b)| a - b).collect();
        let eta: Vec<f64> = match norm {
            Norm::L2 => {
                let n = dw.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    dw.iter().map(|v| epsilon * v / n).collect()
                } else {
                    vec![0.0; dw.len()]
                }
            }
            Norm::Linf => dw.iter().map(|&v| epsilon * sign(v)).collect(),
        };
        points[j] = xs.iter().zip(&eta).map(|(a, b)| a + b).collect();
        let logits = model.logits(&Tensor::vector(points[j].clone()))?;
        margins[j] = logits.get(0, j) - logits.get(0, y);
    }
    // Bias-only gaps still define margins when all directions vanish.
    let _ = &bias;
    let (j_star, m) = selection
        .select((0..k).filter(|&j| j != y).map(|j| (j, margins[j])))
        .expect("K >= 2");
    result_at(model, xs, y, &points[j_star], j_star, m, margins)
}

// ---------------------------------------------------------------------------
// Grid oracle

/// All grid points of the feasible set around `x`: `2r+1` values per axis
/// over `[max(x−ε,0), min(x+ε,1)]` (a single value when the interval is
/// degenerate), filtered to the l2 ball when `norm` is l2. Rows are in
/// lexicographic order.
pub fn feasible_grid(x: &Tensor, cfg: &AttackConfig, resolution: usize) -> Result<Tensor> {
    let d = x.len();
    if d > GRID_MAX_DIM {
        return Err(AttackError::DimensionTooLarge { dim: d, max: GRID_MAX_DIM });
    }
    let steps = 2 * resolution.max(1);
    let axes: Vec<Vec<f64>> = x
        .data()
        .iter()
        .map(|&xi| {
            let (lo, hi) = bounds(xi, cfg);
            if hi <= lo {
                vec![lo]
            } else {
                (0..=steps).map(|s| lo + (hi - lo) * s as f64 / steps as f64).collect()
            }
        })
        .collect();
    let total: usize = axes.iter().map(Vec::len).product();
    let mut data = Vec::with_capacity(total * d);
    let mut idx = vec![0usize; d];
    let tol = 1e-12 * cfg.epsilon.max(1.0);
    for _ in 0..total {
        let p: Vec<f64> = idx.iter().enumerate().map(|(a, &i)| axes[a][i]).collect();
        let keep = match cfg.norm {
            Norm::Linf => true,
            Norm::L2 => {
                p.iter().zip(x.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                    <= cfg.epsilon + tol
            }
        };
        if keep {
            data.extend(p);
        }
        for a in (0..d).rev() {
            idx[a] += 1;
            if idx[a] < axes[a].len() {
                break;
            }
            idx[a] = 0;
        }
    }
    let rows = data.len() / d.max(1);
    Ok(Tensor::new(vec![rows, d], data)?)
}

#[derive(Debug, Clone)]
pub struct GridOracleOutcome {
    /// Margin maximizer over classes and grid points (replaced by the first
    /// misclassifying point when no positive margin exists but a tie
    /// misclassifies).
    pub result: AttackResult,
    /// Per-class grid maximum of `M_j` and the grid row attaining it first.
    pub class_best: Vec<Option<(f64, usize)>>,
    /// Some grid point has `argmax f ≠ y`.
    pub any_misclassified: bool,
    pub first_misclassified: Option<usize>,
    pub grid: Tensor,
}

impl GridOracleOutcome {
    /// Largest per-class grid margin and the class attaining it (lowest index on ties).
    pub fn max_margin(&self) -> (usize, f64, usize) {
        let mut best: Option<(usize, f64, usize)> = None;
        for (j, cb) in self.class_best.iter().enumerate() {
            if let Some((m, row)) = *cb {
                if best.is_none_or(|b| m > b.1) {
                    best = Some((j, m, row));
                }
            }
        }
        best.expect("K >= 2")
    }
}

/// Exhaustive search over `feasible_grid`. Per-class margin maximization
/// and the 0-1 misclassification search are computed independently.
pub fn grid_oracle_attack(model: &Model, x: &Tensor, y: usize, cfg: &AttackConfig, resolution: usize) -> Result<GridOracleOutcome> {
    cfg.validate()?;
    let x = Tensor::vector(single(x)?.row(0).to_vec());
    let k = model.classes();
    if y >= k {
        return Err(AttackError::Class { class: y, classes: k });
    }
    let grid = feasible_grid(&x, cfg, resolution)?;
    let logits = model.logits(&grid)?;
    let mut class_best: Vec<Option<(f64, usize)>> = vec![None; k];
    let mut first_mis = None;
    for r in 0..grid.rows() {
        let row = logits.row(r);
        for j in (0..k).filter(|&j| j != y) {
            let m = row[j] - row[y];
            if class_best[j].is_none_or(|(b, _)| m > b) {
                class_best[j] = Some((m, r));
            }
        }
        if first_mis.is_none() && objectives::zero_one_error(row, y)? == 1 {
            first_mis = Some(r);
        }
    }
    let mut outcome = GridOracleOutcome {
        result: AttackResult {
            eta_star: Tensor::zeros(&[x.len()]),
            j_star: 0,
            margin_value: 0.0,
            success: false,
            margins: Tensor::zeros(&[k]),
        },
        class_best,
        any_misclassified: first_mis.is_some(),
        first_misclassified: first_mis,
        grid,
    };
    let (j_star, m, row) = outcome.max_margin();
    let chosen = match first_mis {
        Some(r) if m <= 0.0 => r,
        _ => row,
    };
    let margins = (0..k)
        .map(|j| outcome.class_best[j].map_or(0.0, |b| b.0))
        .collect();
    outcome.result = result_at(model, x.data(), y, outcome.grid.row(chosen), j_star, m, margins)?;
    Ok(outcome)
}

/// Grid oracle over a batch, one sample per task.
pub fn grid_oracle_batch(model: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig, resolution: usize) -> Result<Vec<GridOracleOutcome>> {
    let keys = vec![0; y.len()];
    check_batch(model, x, y, &keys)?;
    (0..x.rows())
        .into_par_iter()
        .map(|i| grid_oracle_attack(model, &row_vec(x, i), y[i], cfg, resolution))
        .collect()
}

/// Runs any attack kind over a batch.
pub fn run_attack_batch(
    kind: AttackKind,
    model: &Model,
    x: &Tensor,
    y: &[usize],
    keys: &[u64],
    cfg: &AttackConfig,
    grid_resolution: usize,
) -> Result<Vec<AttackResult>> {
    match kind {
        AttackKind::Fgsm => fgsm_batch(model, x, y, cfg),
        AttackKind::Pgd => pgd_surrogate_batch(model, x, y, keys, cfg),
        AttackKind::Beta => beta_attack_batch(model, x, y, keys, cfg),
        AttackKind::GridOracle => Ok(grid_oracle_batch(model, x, y, cfg, grid_resolution)?
            .into_iter()
            .map(|o| o.result)
            .collect()),
    }
}
