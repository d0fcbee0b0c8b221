use std::collections::BTreeMap;

use super::{affine_dims, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { input: Var, weight: Var, bias: Var },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Pick { input: Var, index: Vec<usize> },
    LogSoftmax(Var),
    LogSumExp { input: Var, exclude: Option<Vec<usize>> },
    Softmax(Var),
    Concat(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Some leaf below this node requires a gradient.
    tracked: bool,
}

/// Append-only record of primitive operations. Operands always precede the
/// nodes that use them, so a single reverse sweep is a valid backward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output, keyed by leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    by_leaf: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.by_leaf.get(&leaf)
    }

    /// Gradient of a leaf that was registered with `requires_grad`.
    ///
    /// Panics if the leaf was not tracked.
    pub fn wrt(&self, leaf: Var) -> &Tensor {
        self.by_leaf
            .get(&leaf)
            .expect("leaf was not registered with requires_grad")
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor> {
        self.by_leaf.remove(&leaf)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            tracked: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, operands: &[Var]) -> Var {
        let tracked = operands.iter().any(|o| self.nodes[o.0].tracked);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let value = super::affine(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(
            value,
            Op::Affine {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    /// Elementwise `max(0, x)`; the backward pass uses subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = super::relu(self.value(a));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Picks `input[i, index[i]]` from an `n×k` matrix, giving a length-`n` vector.
    pub fn pick(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let (n, k) = self.matrix_dims(input, "pick")?;
        if index.len() != n {
            return Err(TensorError::Shape {
                op: "pick",
                detail: format!("{} indices for {n} rows", index.len()),
            });
        }
        let m = self.value(input);
        let mut out = Vec::with_capacity(n);
        for (i, &j) in index.iter().enumerate() {
            if j >= k {
                return Err(TensorError::Index {
                    op: "pick",
                    index: j,
                    bound: k,
                });
            }
            out.push(m.get(i, j));
        }
        let value = Tensor::vector(out);
        Ok(self.push(
            value,
            Op::Pick {
                input,
                index: index.to_vec(),
            },
            &[input],
        ))
    }

    /// Row-wise log-softmax of an `n×k` matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims(a, "log_softmax")?;
        let m = self.value(a);
        let mut data = Vec::with_capacity(n * k);
        for i in 0..n {
            let row = m.row(i);
            let lse = masked_lse(row, None);
            data.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::new(vec![n, k], data)?;
        Ok(self.push(value, Op::LogSoftmax(a), &[a]))
    }

    /// Row-wise `log Σ_j exp(a[i,j])`, skipping column `exclude[i]` when given.
    pub fn logsumexp(&mut self, a: Var, exclude: Option<&[usize]>) -> Result<Var> {
        let (n, k) = self.matrix_dims(a, "logsumexp")?;
        check_exclude(exclude, n, k, "logsumexp")?;
        let m = self.value(a);
        let out = (0..n)
            .map(|i| masked_lse(m.row(i), exclude.map(|e| e[i])))
            .collect();
        let value = Tensor::vector(out);
        Ok(self.push(
            value,
            Op::LogSumExp {
                input: a,
                exclude: exclude.map(<[usize]>::to_vec),
            },
            &[a],
        ))
    }

    /// Row-wise softmax; an excluded column receives probability exactly 0.
    pub fn softmax(&mut self, a: Var, exclude: Option<&[usize]>) -> Result<Var> {
        let (n, k) = self.matrix_dims(a, "softmax")?;
        check_exclude(exclude, n, k, "softmax")?;
        let m = self.value(a);
        let mut data = Vec::with_capacity(n * k);
        for i in 0..n {
            data.extend(masked_softmax(m.row(i), exclude.map(|e| e[i])));
        }
        let value = Tensor::new(vec![n, k], data)?;
        Ok(self.push(
            value,
            Op::Softmax(a),
            &[a],
        ))
    }

    /// Stacks equally long vectors as the columns of an `n×m` matrix.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.value(p).len())
            .ok_or_else(|| TensorError::Invalid("concat of zero columns".into()))?;
        for &p in parts {
            let s = self.value(p).shape();
            if s != [n] {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    detail: format!("expected [{n}], got {s:?}"),
                });
            }
        }
        let m = parts.len();
        let mut data = vec![0.0; n * m];
        for (c, &p) in parts.iter().enumerate() {
            for (i, &v) in self.value(p).data().iter().enumerate() {
                data[i * m + c] = v;
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    fn matrix_dims(&self, a: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.value(a).shape() {
            [n, k] => Ok((*n, *k)),
            s => Err(TensorError::Shape {
                op,
                detail: format!("expected a matrix, got {s:?}"),
            }),
        }
    }

    /// Reverse sweep from a scalar `output`. Every leaf registered with
    /// `requires_grad` receives a gradient, zero when it is not upstream of
    /// `output`. The tape is left untouched, so the sweep can be replayed.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if !out_node.value.is_scalar() {
            return Err(TensorError::NotScalar(out_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }

        let by_leaf = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad)
            .map(|(i, n)| {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; n.value.len()]);
                let t = Tensor::new(n.value.shape().to_vec(), g)
                    .expect("gradient matches leaf shape");
                (Var(i), t)
            })
            .collect();
        Ok(Gradients { by_leaf })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let tracked = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, d, k) = affine_dims(x.shape(), w.shape(), self.value(*bias).shape())
                    .expect("shapes validated on record");
                if tracked(*input) {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let gi = &g[i * k..(i + 1) * k];
                        for c in 0..d {
                            let wc = &w.data()[c * k..(c + 1) * k];
                            dx[i * d + c] = gi.iter().zip(wc).map(|(a, b)| a * b).sum();
                        }
                    }
                    accumulate(grads, *input, dx);
                }
                if tracked(*weight) {
                    let mut dw = vec![0.0; d * k];
                    for i in 0..n {
                        let gi = &g[i * k..(i + 1) * k];
                        for (c, &xc) in x.row(i).iter().enumerate() {
                            for (dwj, &gj) in dw[c * k..(c + 1) * k].iter_mut().zip(gi) {
                                *dwj += xc * gj;
                            }
                        }
                    }
                    accumulate(grads, *weight, dw);
                }
                if tracked(*bias) {
                    let mut db = vec![0.0; k];
                    for i in 0..n {
                        for (b, &gj) in db.iter_mut().zip(&g[i * k..(i + 1) * k]) {
                            *b += gj;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                accumulate(grads, *a, d);
            }
            Op::Add(a, b) => {
                if tracked(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if tracked(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if tracked(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if tracked(*b) {
                    accumulate(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let bv = self.value(*b).data();
                    accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if tracked(*b) {
                    let av = self.value(*a).data();
                    accumulate(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Pick { input, index } => {
                let m = self.value(*input);
                let k = m.cols();
                let mut d = vec![0.0; m.len()];
                for (i, &j) in index.iter().enumerate() {
                    d[i * k + j] = g[i];
                }
                accumulate(grads, *input, d);
            }
            Op::LogSoftmax(a) => {
                let out = &node.value;
                let k = out.cols();
                let mut d = vec![0.0; out.len()];
                for i in 0..out.rows() {
                    let gi = &g[i * k..(i + 1) * k];
                    let total: f64 = gi.iter().sum();
                    for (j, &logp) in out.row(i).iter().enumerate() {
                        d[i * k + j] = gi[j] - logp.exp() * total;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::LogSumExp { input, exclude } => {
                let m = self.value(*input);
                let k = m.cols();
                let mut d = vec![0.0; m.len()];
                for i in 0..m.rows() {
                    let p = masked_softmax(m.row(i), exclude.as_ref().map(|e| e[i]));
                    for (j, pj) in p.into_iter().enumerate() {
                        d[i * k + j] = g[i] * pj;
                    }
                }
                accumulate(grads, *input, d);
            }
            Op::Softmax(input) => {
                let s = &node.value;
                let k = s.cols();
                let mut d = vec![0.0; s.len()];
                for i in 0..s.rows() {
                    let si = s.row(i);
                    let gi = &g[i * k..(i + 1) * k];
                    let dot: f64 = si.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        d[i * k + j] = si[j] * (gi[j] - dot);
                    }
                }
                accumulate(grads, *input, d);
            }
            Op::Concat(parts) => {
                let m = parts.len();
                for (c, &p) in parts.iter().enumerate() {
                    if tracked(p) {
                        let n = self.value(p).len();
                        accumulate(grads, p, (0..n).map(|i| g[i * m + c]).collect());
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn check_exclude(exclude: Option<&[usize]>, n: usize, k: usize, op: &'static str) -> Result<()> {
    let Some(e) = exclude else { return Ok(()) };
    if e.len() != n {
        return Err(TensorError::Shape {
            op,
            detail: format!("{} excluded columns for {n} rows", e.len()),
        });
    }
    if k < 2 {
        return Err(TensorError::Invalid(format!(
            "{op}: excluding a column leaves nothing of {k}"
        )));
    }
    if let Some(&bad) = e.iter().find(|&&j| j >= k) {
        return Err(TensorError::Index {
            op,
            index: bad,
            bound: k,
        });
    }
    Ok(())
}

/// Max-shifted log-sum-exp over a row, optionally skipping one column.
pub(crate) fn masked_lse(row: &[f64], exclude: Option<usize>) -> f64 {
    let keep = |j: &usize| Some(*j) != exclude;
    let max = (0..row.len())
        .filter(keep)
        .map(|j| row[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = (0..row.len())
        .filter(keep)
        .map(|j| (row[j] - max).exp())
        .sum();
    max + s.ln()
}

pub(crate) fn masked_softmax(row: &[f64], exclude: Option<usize>) -> Vec<f64> {
    let keep = |j: usize| Some(j) != exclude;
    let max = (0..row.len())
        .filter(|&j| keep(j))
        .map(|j| row[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = (0..row.len())
        .map(|j| if keep(j) { (row[j] - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

/// Compares the taped gradient of `f` at `point` against central finite
/// differences with step `h`. Returns the largest
/// `|analytic − numeric| / max(1, |analytic|)` over coordinates.
pub fn finite_diff_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(TensorError::Invalid(format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let out = f(&mut tape, x)?;
    let analytic = tape.backward(out)?.wrt(x).clone();

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(p);
        let o = f(&mut t, v)?;
        Ok(t.value(o).item())
    };

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.data().iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec2(a: f64, b: f64) -> Tensor {
        Tensor::vector(vec![a, b])
    }

    #[test]
    fn bilinear_form_gradients() {
        let mut tape = Tape::new();
        let w = tape.leaf(vec2(1.0, 2.0), true);
        let x = tape.leaf(vec2(3.0, 4.0), true);
        let p = tape.mul(w, x).unwrap();
        let out = tape.sum(p);
        assert_eq!(tape.value(out).item(), 11.0);
        let g = tape.backward(out).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 2.0]);
        assert_eq!(g.wrt(w).data(), &[3.0, 4.0]);
    }

    #[test]
    fn relu_of_negative_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-5.0]), true);
        let r = tape.relu(x);
        let out = tape.sum(r);
        let g = tape.backward(out).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0]);
    }

    #[test]
    fn relu_subgradient_convention() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec2(-1.0, 2.0), true);
        let r = tape.relu(x);
        let out = tape.sum(r);
        assert_eq!(tape.backward(out).unwrap().wrt(x).data(), &[0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0]), true);
        let r = tape.relu(x);
        let out = tape.sum(r);
        assert_eq!(tape.backward(out).unwrap().wrt(x).data(), &[0.0]);
    }

    fn cross_entropy_of(tape: &mut Tape, logits: Var, y: usize) -> Result<Var> {
        let ls = tape.log_softmax(logits)?;
        let p = tape.pick(ls, &[y])?;
        let s = tape.sum(p);
        Ok(tape.scale(s, -1.0))
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap(), true);
        let out = cross_entropy_of(&mut tape, z, 1).unwrap();
        let g = tape.backward(out).unwrap();
        let got = g.wrt(z).data();
        assert!((got[0] - 0.5).abs() < 1e-15 && (got[1] + 0.5).abs() < 1e-15);

        // Frozen against central differences of −log softmax at (0, 0).
        let h = 1e-5;
        let ce = |a: f64, b: f64| -(b - (a.exp() + b.exp()).ln());
        let fd0 = (ce(h, 0.0) - ce(-h, 0.0)) / (2.0 * h);
        let fd1 = (ce(0.0, h) - ce(0.0, -h)) / (2.0 * h);
        assert!((fd0 - got[0]).abs() < 1e-9 && (fd1 - got[1]).abs() < 1e-9);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec2(1.0, 2.0), true);
        let r = tape.relu(x);
        assert!(matches!(tape.backward(r), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn unreached_leaves_get_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec2(1.0, 2.0), true);
        let unused = tape.leaf(Tensor::vector(vec![7.0; 3]), true);
        let out = tape.sum(x);
        let g = tape.backward(out).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn replayed_backward_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.3, -1.2, 2.5]]).unwrap(), true);
        let out = cross_entropy_of(&mut tape, x, 2).unwrap();
        assert_eq!(tape.backward(out).unwrap(), tape.backward(out).unwrap());
    }

    #[test]
    fn finite_diff_on_sum_of_squares_and_constant() {
        let sq = |t: &mut Tape, x: Var| -> Result<Var> {
            let p = t.mul(x, x)?;
            Ok(t.sum(p))
        };
        let err = finite_diff_check(sq, &vec2(1.0, 2.0), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");

        let constant = |t: &mut Tape, _x: Var| -> Result<Var> { Ok(t.constant(Tensor::scalar(3.0))) };
        assert_eq!(finite_diff_check(constant, &vec2(1.0, 2.0), 1e-5).unwrap(), 0.0);

        assert!(finite_diff_check(sq, &vec2(1.0, 2.0), 0.0).is_err());
    }

    #[test]
    fn masked_ops_skip_excluded_column() {
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::from_rows(&[vec![5.0, 0.0, 0.0]]).unwrap(), true);
        let l = tape.logsumexp(m, Some(&[0])).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
        let s = tape.softmax(m, Some(&[0])).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0, 0.5, 0.5]);
        let out = tape.sum(l);
        assert_eq!(tape.backward(out).unwrap().wrt(m).data(), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn concat_stacks_columns() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec2(1.0, 2.0), true);
        let b = tape.leaf(vec2(3.0, 4.0), true);
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 2]);
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 2.0, 4.0]);
        let w = tape.constant(Tensor::from_rows(&[vec![1.0, 10.0], vec![100.0, 1000.0]]).unwrap());
        let p = tape.mul(c, w).unwrap();
        let out = tape.sum(p);
        let g = tape.backward(out).unwrap();
        assert_eq!(g.wrt(a).data(), &[1.0, 100.0]);
        assert_eq!(g.wrt(b).data(), &[10.0, 1000.0]);
    }
}
