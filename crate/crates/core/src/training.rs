//! Training loops: plain surrogate minimization, surrogate adversarial
//! training, BETA adversarial training and its smoothed, softmax-weighted
//! variant; plus robust evaluation and best/last checkpoint selection.
//!
//! Attacks for a batch run in parallel against a snapshot of the current
//! parameters; the descent step itself is sequential. Row keys passed to the
//! attacks combine the epoch and the sample index, so the whole run is a
//! pure function of `(config, data)`.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{self, stream_rng, AttackConfig, AttackError, AttackKind};
use crate::data::{DataError, Dataset};
use crate::models::{argmax, Checkpoint, CheckpointMeta, Model, ModelError, ModelSpec};
use crate::objectives::{self, ObjectiveError};
use crate::optim::{Direction, LrSchedule, OptimConfig, OptimError, OptimState};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset has {found} features/{found_classes} classes, model expects {expected}/{expected_classes}")]
    DataShape {
        expected: usize,
        found: usize,
        expected_classes: usize,
        found_classes: usize,
    },
    #[error("no epochs to select from")]
    NoEpochs,
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Erm,
    PgdAt,
    BetaAt,
    SbetaAt,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Erm => "erm",
            Algorithm::PgdAt => "pgd_at",
            Algorithm::BetaAt => "beta_at",
            Algorithm::SbetaAt => "sbeta_at",
        }
    }

    /// Attack used for per-epoch robust metrics.
    pub fn monitor_attack(self) -> AttackKind {
        match self {
            Algorithm::Erm | Algorithm::PgdAt => AttackKind::Pgd,
            Algorithm::BetaAt | Algorithm::SbetaAt => AttackKind::Beta,
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "erm" => Ok(Self::Erm),
            "pgd_at" => Ok(Self::PgdAt),
            "beta_at" => Ok(Self::BetaAt),
            "sbeta_at" => Ok(Self::SbetaAt),
            other => Err(format!("unknown algorithm `{other}`")),
        }
    }
}

fn default_model() -> ModelSpec {
    ModelSpec::mlp(2, vec![16], 3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub model: ModelSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimConfig,
    /// Zero-based epochs at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub attack: AttackConfig,
    /// Softmax temperature of the smoothed variant.
    pub mu: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Compute robust accuracies every epoch with the monitoring attack.
    pub monitor_robust: bool,
    /// Fill the `seconds` column; off by default so outputs are reproducible.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Erm,
            model: default_model(),
            epochs: 10,
            batch_size: 32,
            optimizer: OptimConfig::default(),
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 0.1,
            attack: AttackConfig::default(),
            mu: 1.0,
            seed: 0,
            validation_fraction: 0.2,
            monitor_robust: true,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.algorithm == Algorithm::SbetaAt && !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(TrainError::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be non-negative, got {}", self.optimizer.lr)));
        }
        self.schedule().validate()?;
        self.model.validate()?;
        self.attack.validate()?;
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.optimizer.lr,
            decay_epochs: self.lr_decay_epochs.clone(),
            factor: self.lr_decay_factor,
        }
    }
}

/// One learning-curve row; validation and test entries are absent when the
/// corresponding split is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_clean: f64,
    pub train_robust: Option<f64>,
    pub val_clean: Option<f64>,
    pub val_robust: Option<f64>,
    pub test_clean: Option<f64>,
    pub test_robust: Option<f64>,
    pub loss: f64,
    pub seconds: Option<f64>,
}

/// What one descent step saw.
#[derive(Debug, Clone)]
pub struct BatchRecord<'a> {
    pub epoch: usize,
    pub batch: usize,
    /// Row indices into the training pool.
    pub indices: &'a [usize],
    /// Inputs the loss was evaluated at, `n×d` (one matrix per class for the smoothed variant).
    pub inputs: &'a [Tensor],
    /// Chosen class per row, for BETA-driven steps.
    pub j_star: Option<&'a [usize]>,
    /// Per-row loss weights per input matrix, for the smoothed variant.
    pub weights: Option<&'a [Vec<f64>]>,
    pub loss: f64,
    /// Parameter gradients in parameter order.
    pub grads: &'a [Tensor],
}

pub trait TrainObserver {
    fn on_batch(&mut self, record: &BatchRecord<'_>);
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub metrics: Vec<EpochMetrics>,
    /// Model after each epoch, in epoch order.
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainRun {
    pub fn last(&self) -> &Checkpoint {
        self.checkpoints.last().expect("at least one epoch")
    }
}

/// Optional inputs to [`train_with`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub test: Option<&'a Dataset>,
    /// Starting parameters; seeded initialization otherwise.
    pub initial: Option<Model>,
    pub observer: Option<&'a mut dyn TrainObserver>,
}

pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    train_with(data, cfg, TrainOptions::default())
}

fn with_algorithm(cfg: &TrainConfig, a: Algorithm) -> TrainConfig {
    TrainConfig {
        algorithm: a,
        ..cfg.clone()
    }
}

pub fn train_erm(data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    train(data, &with_algorithm(cfg, Algorithm::Erm))
}

pub fn train_pgd_at(data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    train(data, &with_algorithm(cfg, Algorithm::PgdAt))
}

pub fn train_beta_at(data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    train(data, &with_algorithm(cfg, Algorithm::BetaAt))
}

pub fn train_sbeta_at(data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    train(data, &with_algorithm(cfg, Algorithm::SbetaAt))
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
/// Evaluation keys live above every training key.
pub const EVAL_KEY_BASE: u64 = 1 << 63;

fn row_key(epoch: usize, index: usize) -> u64 {
    ((epoch as u64) << 32) | index as u64
}

struct StepOutput {
    loss: f64,
    grads: Vec<Tensor>,
    inputs: Vec<Tensor>,
    j_star: Option<Vec<usize>>,
    weights: Option<Vec<Vec<f64>>>,
}

fn perturbed(results: &[attacks::AttackResult], x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for (i, r) in results.iter().enumerate() {
        for (o, e) in out.row_mut(i).iter_mut().zip(r.eta_star.data()) {
            *o += e;
        }
    }
    out
}

fn ce_step(model: &Model, inputs: Vec<Tensor>, y: &[usize], j_star: Option<Vec<usize>>) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let z = tape.constant(inputs[0].clone());
    let logits = model.forward(&mut tape, &bound, z)?;
    let loss = objectives::mean_ce(&mut tape, logits, y)?;
    finish(tape, bound.vars(), loss, inputs, j_star, None)
}

fn finish(
    tape: Tape,
    params: &[Var],
    loss: Var,
    inputs: Vec<Tensor>,
    j_star: Option<Vec<usize>>,
    weights: Option<Vec<Vec<f64>>>,
) -> Result<StepOutput> {
    let mut grads = tape.backward(loss)?;
    Ok(StepOutput {
        loss: tape.value(loss).item(),
        grads: params.iter().map(|&p| grads.take(p).expect("parameter leaf")).collect(),
        inputs,
        j_star,
        weights,
    })
}

/// Builds the softmax-weighted loss `mean_i Σ_j λ_ij ℓ(f(x_i + η_ij), y_i)`,
/// with `λ_i = softmax_j(μ · M(x_i + η_ij)_j)` differentiated through.
pub fn smoothed_loss(
    tape: &mut Tape,
    model: &Model,
    bound: &crate::models::BoundParams,
    points: &[Var],
    targets: &[Vec<usize>],
    y: &[usize],
    mu: f64,
) -> Result<(Var, Var)> {
    let mut ces = Vec::with_capacity(points.len());
    let mut margins = Vec::with_capacity(points.len());
    for (&z, t) in points.iter().zip(targets) {
        let logits = model.forward(tape, bound, z)?;
        ces.push(objectives::ce_rows(tape, logits, y)?);
        margins.push(objectives::margin_rows(tape, logits, y, t)?);
    }
    let m = tape.concat_cols(&margins)?;
    let c = tape.concat_cols(&ces)?;
    let scaled = tape.scale(m, mu);
    let lambda = tape.softmax(scaled, None)?;
    let weighted = tape.mul(lambda, c)?;
    let total = tape.sum(weighted);
    let loss = tape.scale(total, 1.0 / y.len() as f64);
    Ok((loss, lambda))
}

fn batch_step(model: &Model, x: &Tensor, y: &[usize], keys: &[u64], cfg: &TrainConfig) -> Result<StepOutput> {
    match cfg.algorithm {
        Algorithm::Erm => ce_step(model, vec![x.clone()], y, None),
        Algorithm::PgdAt => {
            let res = attacks::pgd_surrogate_batch(model, x, y, keys, &cfg.attack)?;
            ce_step(model, vec![perturbed(&res, x)], y, None)
        }
        Algorithm::BetaAt => {
            let res = attacks::beta_attack_batch(model, x, y, keys, &cfg.attack)?;
            let js = res.iter().map(|r| r.j_star).collect();
            ce_step(model, vec![perturbed(&res, x)], y, Some(js))
        }
        Algorithm::SbetaAt => {
            let pc = attacks::per_class_margin_ascent(model, x, y, keys, &cfg.attack)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let points: Vec<Var> = pc.points.iter().map(|p| tape.constant(p.clone())).collect();
            let (loss, lambda) = smoothed_loss(&mut tape, model, &bound, &points, &pc.targets, y, cfg.mu)?;
            let lam = tape.value(lambda);
            let weights = (0..pc.offsets())
                .map(|o| (0..y.len()).map(|i| lam.get(i, o)).collect())
                .collect();
            let vars = bound.vars().to_vec();
            finish(tape, &vars, loss, pc.points, None, Some(weights))
        }
    }
}

fn check_data(data: &Dataset, spec: &ModelSpec) -> Result<()> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if data.dim() != spec.input_dim || data.classes() != spec.classes {
        return Err(TrainError::DataShape {
            expected: spec.input_dim,
            found: data.dim(),
            expected_classes: spec.classes,
            found_classes: data.classes(),
        });
    }
    Ok(())
}

/// Full training run. The training pool is `data` minus a seeded
/// validation hold-out; the pool is reshuffled every epoch.
pub fn train_with(data: &Dataset, cfg: &TrainConfig, mut opts: TrainOptions<'_>) -> Result<TrainRun> {
    cfg.validate()?;
    check_data(data, &cfg.model)?;
    if let Some(t) = opts.test {
        check_data(t, &cfg.model)?;
    }
    let (pool, val) = data.split(cfg.validation_fraction, cfg.seed)?;
    let mut model = match opts.initial.take() {
        Some(m) if m.spec() == &cfg.model => m,
        Some(m) => {
            return Err(TrainError::Config(format!(
                "initial model {:?} does not match config {:?}",
                m.spec(),
                cfg.model
            )))
        }
        None => Model::init(cfg.model.clone(), cfg.seed)?,
    };
    let schedule = cfg.schedule();
    let mut states: Vec<OptimState> = model.params().tensors().map(|_| OptimState::new(cfg.optimizer)).collect();
    let monitor = cfg.algorithm.monitor_attack();
    let mut run = TrainRun {
        metrics: Vec::with_capacity(cfg.epochs),
        checkpoints: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = schedule.lr_at(epoch - 1);
        for s in &mut states {
            s.set_lr(lr);
        }
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, epoch as u64, SHUFFLE_STREAM));

        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = pool.features().select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| pool.labels()[i]).collect();
            let keys: Vec<u64> = idx.iter().map(|&i| row_key(epoch, i)).collect();
            let out = batch_step(&model, &x, &y, &keys, cfg)?;
            if let Some(obs) = opts.observer.as_deref_mut() {
                obs.on_batch(&BatchRecord {
                    epoch,
                    batch: b,
                    indices: idx,
                    inputs: &out.inputs,
                    j_star: out.j_star.as_deref(),
                    weights: out.weights.as_deref(),
                    loss: out.loss,
                    grads: &out.grads,
                });
            }
            loss_sum += out.loss * idx.len() as f64;
            for ((p, g), s) in model.params_mut().tensors_mut().zip(&out.grads).zip(&mut states) {
                s.step_in_place(p.data_mut(), g.data(), Direction::Descend)?;
            }
        }

        let eval = |d: &Dataset| -> Result<(f64, Option<f64>)> {
            if cfg.monitor_robust {
                let r = evaluate_robust(&model, d, monitor, &cfg.attack, 0)?;
                Ok((r.clean, Some(r.robust)))
            } else {
                Ok((clean_accuracy(&model, d)?, None))
            }
        };
        let (train_clean, train_robust) = eval(&pool)?;
        let (val_clean, val_robust) = match &val {
            Some(v) => {
                let (c, r) = eval(v)?;
                (Some(c), r)
            }
            None => (None, None),
        };
        let (test_clean, test_robust) = match opts.test {
            Some(t) => {
                let (c, r) = eval(t)?;
                (Some(c), r)
            }
            None => (None, None),
        };
        run.metrics.push(EpochMetrics {
            epoch,
            train_clean,
            train_robust,
            val_clean,
            val_robust,
            test_clean,
            test_robust,
            loss: loss_sum / pool.len() as f64,
            seconds: cfg.record_time.then(|| started.elapsed().as_secs_f64()),
        });
        run.checkpoints.push(Checkpoint::new(
            model.clone(),
            CheckpointMeta {
                algorithm: cfg.algorithm.name().to_string(),
                epoch,
                seed: cfg.seed,
            },
        ));
    }
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustEval {
    pub clean: f64,
    pub robust: f64,
    pub samples: usize,
}

pub fn clean_accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    check_data(data, model.spec())?;
    let logits = model.logits(data.features())?;
    let correct = (0..data.len())
        .filter(|&i| argmax(logits.row(i)) == data.labels()[i])
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Clean accuracy and the fraction of samples that are clean-correct and
/// survive the attack. `grid_resolution` is used by the grid oracle only.
pub fn evaluate_robust(
    model: &Model,
    data: &Dataset,
    kind: AttackKind,
    cfg: &AttackConfig,
    grid_resolution: usize,
) -> Result<RobustEval> {
    check_data(data, model.spec())?;
    let logits = model.logits(data.features())?;
    let clean: Vec<bool> = (0..data.len())
        .map(|i| argmax(logits.row(i)) == data.labels()[i])
        .collect();
    let keys: Vec<u64> = (0..data.len() as u64).map(|i| EVAL_KEY_BASE | i).collect();
    let res = attacks::run_attack_batch(kind, model, data.features(), data.labels(), &keys, cfg, grid_resolution)?;
    let n = data.len() as f64;
    let clean_n = clean.iter().filter(|&&c| c).count();
    let robust_n = clean.iter().zip(&res).filter(|(&c, r)| c && !r.success).count();
    Ok(RobustEval {
        clean: clean_n as f64 / n,
        robust: robust_n as f64 / n,
        samples: data.len(),
    })
}

#[derive(Debug, Clone)]
pub struct Selected {
    pub metrics: EpochMetrics,
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub best: Selected,
    pub last: Selected,
}

/// Best = highest validation robust accuracy (earliest on ties; falls back
/// to validation clean, then train robust, when absent); last = final epoch.
pub fn select_checkpoints(metrics: &[EpochMetrics], checkpoints: &[Checkpoint]) -> Result<SelectionReport> {
    if metrics.is_empty() || metrics.len() != checkpoints.len() {
        return Err(TrainError::NoEpochs);
    }
    let score = |m: &EpochMetrics| {
        m.val_robust
            .or(m.val_clean)
            .or(m.train_robust)
            .unwrap_or(m.train_clean)
    };
    let mut best = 0;
    for (i, m) in metrics.iter().enumerate() {
        if score(m) > score(&metrics[best]) {
            best = i;
        }
    }
    let last = metrics.len() - 1;
    let pick = |i: usize| Selected {
        metrics: metrics[i].clone(),
        checkpoint: checkpoints[i].clone(),
    };
    Ok(SelectionReport {
        best: pick(best),
        last: pick(last),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::Norm;
    use crate::optim::OptimKind;

    fn blobs(n: usize, spread: f64) -> Dataset {
        let centers = [[0.2, 0.2], [0.8, 0.2], [0.5, 0.8]];
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let c = centers[i % 3];
                let a = i as f64 * 2.399;
                let r = spread * ((i * 7 % 11) as f64 / 11.0);
                vec![c[0] + r * a.cos(), c[1] + r * a.sin()]
            })
            .collect();
        Dataset::from_rows(&rows, (0..n).map(|i| i % 3).collect(), 3).unwrap()
    }

    fn cfg(alg: Algorithm) -> TrainConfig {
        TrainConfig {
            algorithm: alg,
            epochs: 3,
            batch_size: 16,
            optimizer: OptimConfig::new(OptimKind::Sgd, 0.5),
            attack: AttackConfig { epsilon: 0.05, steps: 3, ..AttackConfig::default() },
            mu: 5.0,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn erm_separates_blobs() {
        let c = TrainConfig { epochs: 50, monitor_robust: false, ..cfg(Algorithm::Erm) };
        let run = train(&blobs(90, 0.05), &c).unwrap();
        assert!(run.metrics.last().unwrap().train_clean >= 0.99);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let c = TrainConfig {
            epochs: 1,
            optimizer: OptimConfig::new(OptimKind::Sgd, 0.0),
            ..cfg(Algorithm::BetaAt)
        };
        let run = train(&blobs(30, 0.1), &c).unwrap();
        assert_eq!(run.last().model, Model::init(c.model.clone(), c.seed).unwrap());
    }

    #[test]
    fn runs_are_deterministic() {
        for alg in [Algorithm::Erm, Algorithm::PgdAt, Algorithm::BetaAt, Algorithm::SbetaAt] {
            let d = blobs(45, 0.1);
            let a = train(&d, &cfg(alg)).unwrap();
            let b = train(&d, &cfg(alg)).unwrap();
            assert_eq!(a.metrics, b.metrics, "{alg:?}");
            assert_eq!(a.last().model, b.last().model);
        }
    }

    #[test]
    fn zero_radius_matches_erm() {
        let d = blobs(45, 0.1);
        let zero = |alg| TrainConfig {
            attack: AttackConfig { epsilon: 0.0, ..cfg(alg).attack },
            ..cfg(alg)
        };
        let erm = train(&d, &zero(Algorithm::Erm)).unwrap();
        for alg in [Algorithm::PgdAt, Algorithm::BetaAt] {
            let r = train(&d, &zero(alg)).unwrap();
            assert_eq!(r.metrics, erm.metrics, "{alg:?}");
            assert_eq!(r.last().model, erm.last().model);
        }
        let s = train(&d, &zero(Algorithm::SbetaAt)).unwrap();
        for (a, b) in s.last().model.params().tensors().zip(erm.last().model.params().tensors()) {
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn smoothed_on_two_classes_equals_beta_at() {
        let rows: Vec<Vec<f64>> = (0..24).map(|i| vec![(i as f64 * 0.13) % 1.0, (i as f64 * 0.29) % 1.0]).collect();
        let labels = rows.iter().map(|r| usize::from(r[0] > r[1])).collect();
        let d = Dataset::from_rows(&rows, labels, 2).unwrap();
        let base = TrainConfig { model: ModelSpec::mlp(2, vec![6], 2), ..cfg(Algorithm::BetaAt) };
        let beta = train(&d, &base).unwrap();
        let sbeta = train(&d, &TrainConfig { algorithm: Algorithm::SbetaAt, ..base.clone() }).unwrap();
        assert_eq!(beta.last().model, sbeta.last().model);
        let strip = |m: &[EpochMetrics]| m.iter().map(|r| (r.train_clean, r.loss)).collect::<Vec<_>>();
        assert_eq!(strip(&beta.metrics), strip(&sbeta.metrics));
    }

    struct Weights(Vec<Vec<Vec<f64>>>);

    impl TrainObserver for Weights {
        fn on_batch(&mut self, r: &BatchRecord<'_>) {
            self.0.push(r.weights.unwrap().to_vec());
        }
    }

    #[test]
    fn smoothed_weights_form_a_distribution() {
        let mut obs = Weights(Vec::new());
        let d = blobs(30, 0.1);
        train_with(&d, &cfg(Algorithm::SbetaAt), TrainOptions { observer: Some(&mut obs), ..Default::default() }).unwrap();
        for batch in &obs.0 {
            for i in 0..batch[0].len() {
                let s: f64 = batch.iter().map(|w| w[i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(batch.iter().all(|w| w[i] >= 0.0));
            }
        }
    }

    #[test]
    fn equal_margins_get_equal_weights() {
        // Both off-true classes have identical logits, so their margins tie.
        let m = Model::linear_from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]], vec![0.0; 3]).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![0.3, 0.4]]).unwrap());
        let points = [p, p];
        let b = m.bind(&mut tape, true);
        let (_, lam) = smoothed_loss(&mut tape, &m, &b, &points, &[vec![1], vec![2]], &[0], 3.0).unwrap();
        assert_eq!(tape.value(lam).data(), &[0.5, 0.5]);
    }

    #[test]
    fn large_temperature_recovers_single_term_loss() {
        let m = Model::init(ModelSpec::mlp(2, vec![5], 3), 8).unwrap();
        let pts = [
            Tensor::from_rows(&[vec![0.1, 0.9], vec![0.5, 0.5]]).unwrap(),
            Tensor::from_rows(&[vec![0.7, 0.2], vec![0.3, 0.6]]).unwrap(),
        ];
        let y = [0, 1];
        let targets = vec![vec![1, 2], vec![2, 0]];
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let (loss, _) = smoothed_loss(&mut tape, &m, &b, &vars, &targets, &y, 1000.0).unwrap();
        let mut single = 0.0;
        for i in 0..2 {
            let best = (0..2)
                .max_by(|&a, &c| {
                    let ma = m.logits(&Tensor::vector(pts[a].row(i).to_vec())).unwrap();
                    let mc = m.logits(&Tensor::vector(pts[c].row(i).to_vec())).unwrap();
                    (ma.get(0, targets[a][i]) - ma.get(0, y[i])).total_cmp(&(mc.get(0, targets[c][i]) - mc.get(0, y[i])))
                })
                .unwrap();
            let l = m.logits(&Tensor::vector(pts[best].row(i).to_vec())).unwrap();
            single += objectives::cross_entropy(l.row(0), y[i], objectives::LogBase::E).unwrap() / 2.0;
        }
        assert!((tape.value(loss).item() - single).abs() < 1e-3);
    }

    struct Inputs(Vec<(Tensor, Vec<usize>)>);

    impl TrainObserver for Inputs {
        fn on_batch(&mut self, r: &BatchRecord<'_>) {
            self.0.push((r.inputs[0].clone(), r.j_star.unwrap().to_vec()));
        }
    }

    #[test]
    fn beta_step_uses_margin_maximizer() {
        let m = Model::linear_from_rows(&[vec![0.0, -1.0], vec![-1.0, 0.0], vec![1.0, 0.0]], vec![0.0; 3]).unwrap();
        let d = Dataset::from_rows(&[vec![0.0, -1.0]], vec![0], 3).unwrap();
        let c = TrainConfig {
            algorithm: Algorithm::BetaAt,
            model: ModelSpec::linear(2, 3),
            epochs: 1,
            batch_size: 1,
            validation_fraction: 0.0,
            monitor_robust: false,
            attack: AttackConfig {
                epsilon: 0.8,
                norm: Norm::L2,
                steps: 50,
                clip_box: false,
                selection: attacks::TargetSelection { tie_break: attacks::TieBreak::Highest, tolerance: 1e-3 },
                ..AttackConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut obs = Inputs(Vec::new());
        train_with(&d, &c, TrainOptions { initial: Some(m), observer: Some(&mut obs), ..Default::default() }).unwrap();
        let (x, js) = &obs.0[0];
        let s = 0.8 / 2f64.sqrt();
        assert_eq!(js[0], 2);
        assert!((x.get(0, 0) - s).abs() < 1e-2 && (x.get(0, 1) - (s - 1.0)).abs() < 1e-2, "{x:?}");
        assert!((x.get(0, 1) + 0.2).abs() > 0.1);
    }

    #[test]
    fn robust_never_exceeds_clean() {
        let m = Model::init(ModelSpec::mlp(2, vec![8], 3), 1).unwrap();
        let d = blobs(60, 0.1);
        let a = AttackConfig { epsilon: 0.1, ..AttackConfig::default() };
        for kind in [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Beta, AttackKind::GridOracle] {
            let r = evaluate_robust(&m, &d, kind, &a, 10).unwrap();
            assert!(r.robust <= r.clean);
        }
        let zero = AttackConfig { epsilon: 0.0, ..a };
        for kind in [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Beta, AttackKind::GridOracle] {
            let r = evaluate_robust(&m, &d, kind, &zero, 10).unwrap();
            assert_eq!(r.robust, r.clean);
        }
    }

    #[test]
    fn untrained_models_are_near_chance() {
        let d = blobs(300, 0.1);
        let mean: f64 = (0..20)
            .map(|s| clean_accuracy(&Model::init(ModelSpec::mlp(2, vec![16], 3), s).unwrap(), &d).unwrap())
            .sum::<f64>()
            / 20.0;
        assert!((mean - 1.0 / 3.0).abs() <= 0.1, "{mean}");
    }

    fn rows(vals: &[f64]) -> (Vec<EpochMetrics>, Vec<Checkpoint>) {
        let m = Model::init(ModelSpec::linear(2, 2), 0).unwrap();
        vals.iter()
            .enumerate()
            .map(|(i, &v)| {
                (
                    EpochMetrics {
                        epoch: i + 1,
                        train_clean: 0.5,
                        train_robust: None,
                        val_clean: Some(0.5),
                        val_robust: Some(v),
                        test_clean: None,
                        test_robust: None,
                        loss: 0.0,
                        seconds: None,
                    },
                    Checkpoint::new(m.clone(), CheckpointMeta { algorithm: "erm".into(), epoch: i + 1, seed: 0 }),
                )
            })
            .unzip()
    }

    #[test]
    fn checkpoint_selection() {
        let (m, c) = rows(&[0.1, 0.2, 0.3]);
        let r = select_checkpoints(&m, &c).unwrap();
        assert_eq!((r.best.metrics.epoch, r.last.metrics.epoch), (3, 3));
        let (m, c) = rows(&[0.1, 0.2, 0.5, 0.4, 0.3, 0.3, 0.2, 0.2, 0.1, 0.1]);
        let r = select_checkpoints(&m, &c).unwrap();
        assert_eq!((r.best.metrics.epoch, r.last.metrics.epoch), (3, 10));
        let (m, c) = rows(&[0.4; 5]);
        assert_eq!(select_checkpoints(&m, &c).unwrap().best.metrics.epoch, 1);
        assert!(select_checkpoints(&[], &[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { algorithm: Algorithm::SbetaAt, mu: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
