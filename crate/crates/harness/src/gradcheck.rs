//! Finite-difference audit of the differentiable objectives, with respect to
//! inputs and to every parameter tensor of a small MLP.

use std::fmt::Display;

use betaat::models::{Model, ModelSpec};
use betaat::objectives::{self, SmoothingConfig};
use betaat::tensor::{self, finite_diff_check, Tape, Tensor, TensorError, Var};
use betaat::training::smoothed_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const STEP: f64 = 1e-5;
/// Minimum distance of every hidden pre-activation from the ReLU kink.
pub const KINK_CLEARANCE: f64 = 1e-3;
const ROWS: usize = 2;
const MU: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub objective: &'static str,
    pub wrt: String,
    pub max_error: f64,
    pub checks: usize,
}

pub const OBJECTIVES: [&str; 4] = ["cross_entropy", "negative_margin", "lse_smoothed_margin", "sbeta_weighted_loss"];

fn te(e: impl Display) -> TensorError {
    TensorError::Invalid(e.to_string())
}

struct Instance {
    model: Model,
    /// One `ROWS×d` input per off-true class offset.
    inputs: Vec<Tensor>,
    y: Vec<usize>,
    targets: Vec<Vec<usize>>,
}

fn clear_of_kinks(model: &Model, x: &Tensor) -> bool {
    let p: Vec<&Tensor> = model.params().tensors().collect();
    let h = tensor::affine(x, p[0], p[1]).expect("shapes agree");
    h.data().iter().all(|v| v.abs() > KINK_CLEARANCE)
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let spec = ModelSpec::mlp(2, vec![16], 3);
    loop {
        let model = Model::init(spec.clone(), rng.random()).expect("valid spec");
        let inputs: Vec<Tensor> = (0..2)
            .map(|_| Tensor::new(vec![ROWS, 2], (0..2 * ROWS).map(|_| rng.random()).collect()).expect("shape"))
            .collect();
        if inputs.iter().all(|x| clear_of_kinks(&model, x)) {
            let y: Vec<usize> = (0..ROWS).map(|_| rng.random_range(0..3)).collect();
            let targets = (1..3).map(|o| y.iter().map(|&c| (c + o) % 3).collect()).collect();
            return Instance { model, inputs, y, targets };
        }
    }
}

/// Evaluates `objective` with the inputs of class offset `slot` taken from `var`
/// (when `param` is `None`) or with parameter `param` taken from `var`.
fn objective(
    name: &str,
    inst: &Instance,
    t: &mut Tape,
    var: Var,
    slot: usize,
    param: Option<usize>,
) -> Result<Var, TensorError> {
    let mut bound = inst.model.bind(t, false);
    if let Some(p) = param {
        bound = bound.with_var(p, var);
    }
    let mut inputs: Vec<Var> = inst.inputs.iter().map(|x| t.constant(x.clone())).collect();
    if param.is_none() {
        inputs[slot] = var;
    }
    let logits = inst.model.forward(t, &bound, inputs[slot]).map_err(te)?;
    let y = &inst.y;
    Ok(match name {
        "cross_entropy" => objectives::mean_ce(t, logits, y).map_err(te)?,
        "negative_margin" => {
            let m = objectives::margin_rows(t, logits, y, &inst.targets[slot]).map_err(te)?;
            t.sum(m)
        }
        "lse_smoothed_margin" => {
            let cfg = SmoothingConfig::new(MU).map_err(te)?;
            let m = objectives::lse_margin_rows(t, logits, y, cfg).map_err(te)?;
            t.sum(m)
        }
        _ => smoothed_loss(t, &inst.model, &bound, &inputs, &inst.targets, y, MU).map_err(te)?.0,
    })
}

/// Runs every objective at `points` random instances; returns the worst
/// relative error per (objective, variable).
pub fn run_gradchecks(points: usize, seed: u64) -> Result<Vec<GradcheckRow>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = {
        let m = Model::init(ModelSpec::mlp(2, vec![16], 3), 0).expect("valid spec");
        m.params().iter().map(|(n, _)| n.to_string()).collect()
    };
    let mut rows: Vec<GradcheckRow> = OBJECTIVES
        .iter()
        .flat_map(|&o| {
            std::iter::once("input".to_string())
                .chain(names.iter().cloned())
                .map(move |w| GradcheckRow { objective: o, wrt: w, max_error: 0.0, checks: 0 })
        })
        .collect();
    for _ in 0..points {
        let inst = instance(&mut rng);
        for row in rows.iter_mut() {
            let slots: &[usize] = if row.objective == "sbeta_weighted_loss" && row.wrt == "input" { &[0, 1] } else { &[0] };
            for &slot in slots {
                let (point, param) = if row.wrt == "input" {
                    (inst.inputs[slot].clone(), None)
                } else {
                    let i = names.iter().position(|n| *n == row.wrt).expect("known name");
                    (inst.model.params().tensors().nth(i).expect("index").clone(), Some(i))
                };
                let name = row.objective;
                let err = finite_diff_check(|t, v| objective(name, &inst, t, v, slot, param), &point, STEP)?;
                row.max_error = row.max_error.max(err);
                row.checks += 1;
            }
        }
    }
    Ok(rows)
}

pub fn gradcheck_csv(rows: &[GradcheckRow]) -> String {
    let mut out = String::from("objective,wrt,max_rel_error,checks\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.3e},{}\n", r.objective, r.wrt, r.max_error, r.checks));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn few_points_pass() {
        let rows = run_gradchecks(5, 1).unwrap();
        assert_eq!(rows.len(), 4 * 5);
        for r in &rows {
            assert!(r.max_error < 1e-5, "{r:?}");
            assert!(r.checks >= 5);
        }
    }
}
