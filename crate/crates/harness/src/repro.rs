//! Self-checking reproductions of the small worked examples: a three-class
//! linear counterexample where cross-entropy ascent cannot find an
//! adversarial point that margin ascent finds, and a ten-class probability
//! pair on which the two criteria rank candidates in opposite order.

use std::time::Instant;

use betaat::attacks::{
    beta_attack, closed_form_linear_attack, feasible_grid, pgd_surrogate, AttackConfig, Norm, TargetSelection,
    TieBreak,
};
use betaat::models::{argmax, Model};
use betaat::objectives::{cross_entropy, max_margin_over_classes, LogBase};
use betaat::optim::OptimKind;
use betaat::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct ReproReport {
    pub lines: Vec<String>,
    pub checks: Vec<Check>,
}

impl ReproReport {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        self.checks.push(Check { name: name.into(), pass, detail });
    }

    fn line(&mut self, s: String) {
        self.lines.push(s);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        for c in &self.checks {
            out.push_str(&format!("{} {}: {}\n", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
        out
    }
}

fn vec_str(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("({})", parts.join(", "))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

pub fn counterexample_model() -> Model {
    Model::linear_from_rows(&[vec![0.0, -1.0], vec![-1.0, 0.0], vec![1.0, 0.0]], vec![0.0; 3]).expect("valid model")
}

pub const COUNTEREXAMPLE_X: [f64; 2] = [0.0, -1.0];
pub const COUNTEREXAMPLE_EPS: f64 = 0.8;
pub const GRID_RESOLUTION: usize = 200;

pub fn counterexample_attack() -> AttackConfig {
    AttackConfig {
        epsilon: COUNTEREXAMPLE_EPS,
        norm: Norm::L2,
        steps: 50,
        optimizer: Some(OptimKind::Rmsprop),
        clip_box: false,
        // The two off-true classes tie exactly; report the second one.
        selection: TargetSelection { tie_break: TieBreak::Highest, tolerance: 1e-3 },
        ..AttackConfig::default()
    }
}

/// `(e^a + e^{−a})·e^{√(ε²−a²)}` is the exponentiated cross-entropy (up to
/// a monotone map) along the sphere; returns its maximizer over a fine scan.
pub fn sphere_scan_maximizer(eps: f64, samples: usize) -> f64 {
    let h = |a: f64| (a.exp() + (-a).exp()) * (eps * eps - a * a).max(0.0).sqrt().exp();
    let mut best = (-eps, f64::NEG_INFINITY);
    for i in 0..=samples {
        let a = -eps + 2.0 * eps * i as f64 / samples as f64;
        let v = h(a);
        if v > best.1 {
            best = (a, v);
        }
    }
    best.0
}

pub fn linear_counterexample() -> ReproReport {
    let started = Instant::now();
    let mut r = ReproReport::default();
    let model = counterexample_model();
    let x = Tensor::vector(COUNTEREXAMPLE_X.to_vec());
    let y = 0;
    let cfg = counterexample_attack();
    let s = COUNTEREXAMPLE_EPS / 2f64.sqrt();
    r.line("model: W = [[0,-1],[-1,0],[1,0]], b = 0; x = (0, -1), true class 0; eps = 0.8 (l2, no box)".into());

    // Cross-entropy maximization over the grid.
    let grid = feasible_grid(&x, &cfg, GRID_RESOLUTION).expect("d = 2");
    let logits = model.logits(&grid).expect("shapes agree");
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..grid.rows() {
        let ce = cross_entropy(logits.row(i), y, LogBase::E).expect("valid class");
        if ce > best.1 {
            best = (i, ce);
        }
    }
    let point = grid.row(best.0);
    let eta = [point[0] - x.data()[0], point[1] - x.data()[1]];
    let ce_logits = logits.row(best.0).to_vec();
    let ce_success = argmax(&ce_logits) != y;
    r.line(format!(
        "cross-entropy grid ({} points): eta = {}, logits = {}, loss = {:.6}, success = {ce_success}",
        grid.rows(),
        vec_str(&eta),
        vec_str(&ce_logits),
        best.1
    ));
    r.check("ce grid maximizer", close(&eta, &[0.0, 0.8], 1e-9), vec_str(&eta));
    r.check("ce logits", close(&ce_logits, &[0.2, 0.0, 0.0], 1e-9), vec_str(&ce_logits));
    r.check("ce attack fails", !ce_success, format!("success = {ce_success}"));
    let a = sphere_scan_maximizer(COUNTEREXAMPLE_EPS, 160_000);
    r.check("ce sphere scan", a.abs() < 1e-5, format!("maximizer at a = {a:.2e}"));

    let pgd_cfg = AttackConfig {
        optimizer: Some(OptimKind::Sgd),
        step_size: Some(0.5),
        steps: 200,
        ..cfg.clone()
    };
    let p = pgd_surrogate(&model, &x, y, &pgd_cfg).expect("valid attack");
    r.line(format!("cross-entropy ascent: eta = {}, success = {}", vec_str(p.eta_star.data()), p.success));
    r.check(
        "ce ascent agrees with grid",
        close(p.eta_star.data(), &[0.0, 0.8], 1e-3) && !p.success,
        vec_str(p.eta_star.data()),
    );

    // Margin maximization.
    let target = [1.0 - s, -s, s];
    let optimum = COUNTEREXAMPLE_EPS * 2f64.sqrt() - 1.0;
    let exact = closed_form_linear_attack(&model, &x, y, COUNTEREXAMPLE_EPS, Norm::L2, cfg.selection).expect("linear");
    let exact_logits = model.logits(&exact.perturbed(&x)).expect("shapes agree").into_data();
    r.line(format!(
        "closed form: class {}, eta = {}, margin = {:.6}, logits = {}",
        exact.j_star,
        vec_str(exact.eta_star.data()),
        exact.margin_value,
        vec_str(&exact_logits)
    ));
    r.check("closed-form norm", (exact.eta_star.norm_l2() - 0.8).abs() < 1e-9, format!("{:.12}", exact.eta_star.norm_l2()));
    r.check("closed-form margin", (exact.margin_value - optimum).abs() < 1e-9, format!("{:.12}", exact.margin_value));
    r.check("closed-form logits", close(&exact_logits, &[0.43, -0.57, 0.57], 1e-2), vec_str(&exact_logits));
    r.check("closed-form success", exact.success, format!("success = {}", exact.success));

    let lowest = closed_form_linear_attack(&model, &x, y, COUNTEREXAMPLE_EPS, Norm::L2, TargetSelection::default())
        .expect("linear");
    r.line(format!(
        "tie: lowest-index rule picks class {} with margin {:.6}",
        lowest.j_star, lowest.margin_value
    ));

    let b = beta_attack(&model, &x, y, &cfg).expect("valid attack");
    let beta_logits = model.logits(&b.perturbed(&x)).expect("shapes agree").into_data();
    r.line(format!(
        "margin ascent (50 RMSprop steps): class {}, eta = {}, margin = {:.6}, logits = {}, success = {}",
        b.j_star,
        vec_str(b.eta_star.data()),
        b.margin_value,
        vec_str(&beta_logits),
        b.success
    ));
    r.check("beta norm", (b.eta_star.norm_l2() - 0.8).abs() < 1e-6, format!("{:.9}", b.eta_star.norm_l2()));
    r.check("beta margin", (b.margin_value - optimum).abs() < 1e-3, format!("{:.6}", b.margin_value));
    r.check("beta logits", close(&beta_logits, &target, 1e-2) && close(&beta_logits, &[0.43, -0.57, 0.57], 1e-2), vec_str(&beta_logits));
    r.check("beta success", b.success, format!("success = {}", b.success));
    let secs = started.elapsed().as_secs_f64();
    r.check("runtime", secs < 5.0, format!("{secs:.3} s"));
    r
}

pub const EXAMPLE_CLASSES: usize = 10;
pub const EXAMPLE_EPS: f64 = 0.01;

/// Probability vectors of the ten-class example; the true class is index 0.
pub fn example_vectors() -> (Vec<f64>, Vec<f64>) {
    let k = EXAMPLE_CLASSES;
    let u = 1.0 / k as f64;
    let mut za = vec![u; k];
    za[0] = u + EXAMPLE_EPS;
    za[1] = u - EXAMPLE_EPS;
    let mut zb = vec![0.0; k];
    zb[0] = 0.5 - EXAMPLE_EPS;
    zb[1] = 0.5 + EXAMPLE_EPS;
    (za, zb)
}

pub fn ordering_example() -> ReproReport {
    let started = Instant::now();
    let mut r = ReproReport::default();
    let (za, zb) = example_vectors();
    let ce = |z: &[f64]| -z[0].ln();
    let (ce_a, ce_b) = (ce(&za), ce(&zb));
    let (ja, ma) = max_margin_over_classes(&za, 0).expect("valid class");
    let (jb, mb) = max_margin_over_classes(&zb, 0).expect("valid class");
    let a_err = argmax(&za) != 0;
    let b_err = argmax(&zb) != 0;
    r.line(format!("K = {EXAMPLE_CLASSES}, eps = {EXAMPLE_EPS}, true class 0"));
    r.line(format!("z_A: loss = {ce_a:.6}, max margin = {ma:.6} (class {ja}), misclassified = {a_err}"));
    r.line(format!("z_B: loss = {ce_b:.6}, max margin = {mb:.6} (class {jb}), misclassified = {b_err}"));
    let ce_pick = if ce_a > ce_b { "z_A" } else { "z_B" };
    let margin_pick = if mb > ma { "z_B" } else { "z_A" };
    r.line(format!("cross-entropy selects {ce_pick}; margin selects {margin_pick}"));
    r.check("loss values", (ce_a - 2.20727).abs() < 1e-5 && (ce_b - 0.71335).abs() < 1e-5, format!("{ce_a:.5}, {ce_b:.5}"));
    r.check("cross-entropy prefers z_A", ce_a > ce_b, format!("{ce_a:.6} > {ce_b:.6}"));
    r.check("margin prefers z_B", ma < 0.0 && 0.0 < mb && ma < mb, format!("{ma:.6} < 0 < {mb:.6}"));
    r.check("only z_B misclassifies", !a_err && b_err, format!("{a_err}, {b_err}"));
    let margin_a_1 = za[1] - za[0];
    r.check("z_A class-1 margin", (margin_a_1 + 2.0 * EXAMPLE_EPS).abs() < 1e-12, format!("{margin_a_1:.6}"));
    let secs = started.elapsed().as_secs_f64();
    r.check("runtime", secs < 1.0, format!("{secs:.3} s"));
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counterexample_passes() {
        let r = linear_counterexample();
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn ordering_example_passes() {
        let r = ordering_example();
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn sphere_scan_peaks_at_zero() {
        assert!(sphere_scan_maximizer(0.8, 16_000).abs() < 1e-4);
    }
}
