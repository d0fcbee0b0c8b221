//! Linear and multilayer-perceptron classifiers, their parameters, and
//! JSON checkpoints.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("input width {found} does not match model input dimension {expected}")]
    InputDim { expected: usize, found: usize },
    #[error("parameter `{name}`: {detail}")]
    Param { name: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint parse error at {field}: {detail}")]
    Parse { field: String, detail: String },
    #[error("checkpoint io error for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub classes: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::Linear,
            input_dim,
            classes,
            hidden: Vec::new(),
            activation: Activation::Relu,
        }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            classes,
            hidden,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(ModelError::Spec("input_dim must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(ModelError::Spec("at least two classes are required".into()));
        }
        match self.kind {
            ModelKind::Linear if !self.hidden.is_empty() => {
                Err(ModelError::Spec("linear models take no hidden widths".into()))
            }
            ModelKind::Mlp if self.hidden.is_empty() => {
                Err(ModelError::Spec("mlp needs at least one hidden layer".into()))
            }
            _ if self.hidden.contains(&0) => {
                Err(ModelError::Spec("hidden widths must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Widths from input to logits, e.g. `[2, 16, 3]`.
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden);
        w.push(self.classes);
        w
    }

    fn expected_params(&self) -> Vec<(String, Vec<usize>)> {
        let widths = self.layer_widths();
        widths
            .windows(2)
            .enumerate()
            .flat_map(|(l, io)| {
                [
                    (format!("w{l}"), vec![io[0], io[1]]),
                    (format!("b{l}"), vec![io[1]]),
                ]
            })
            .collect()
    }
}

/// Named, ordered model parameters. Layer `l` contributes `w{l}` (fan_in ×
/// fan_out) followed by `b{l}`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(ModelError::Param {
                name,
                detail: "duplicate name".into(),
            });
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// A classifier `f_θ: ℝ^d → ℝ^K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParamSet,
}

/// Parameters registered as leaves on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Substitutes the tape variable used for parameter `index`.
    pub fn with_var(mut self, index: usize, var: Var) -> Self {
        self.vars[index] = var;
        self
    }
}

impl Model {
    pub fn new(spec: ModelSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        let expected = spec.expected_params();
        if params.len() != expected.len() {
            return Err(ModelError::Param {
                name: "*".into(),
                detail: format!("expected {} tensors, got {}", expected.len(), params.len()),
            });
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(params.iter()) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(ModelError::Param {
                    name: got_name.to_string(),
                    detail: format!("expected `{name}` with shape {shape:?}, got {:?}", t.shape()),
                });
            }
        }
        Ok(Self { spec, params })
    }

    /// Seeded uniform fan-in initialization: weights in `±1/√fan_in`, zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let params = init_params(&spec, seed)?;
        Self::new(spec, params)
    }

    /// Linear model from a `K×d` weight matrix in the `f(x) = W x + b` layout.
    pub fn linear_from_rows(rows: &[Vec<f64>], bias: Vec<f64>) -> Result<Self> {
        let w = Tensor::from_rows(rows)?;
        let (k, d) = (w.rows(), w.cols());
        let mut wt = vec![0.0; d * k];
        for j in 0..k {
            for c in 0..d {
                wt[c * k + j] = w.get(j, c);
            }
        }
        let mut params = ParamSet::new();
        params.push("w0", Tensor::new(vec![d, k], wt)?)?;
        params.push("b0", Tensor::vector(bias))?;
        Self::new(ModelSpec::linear(d, k), params)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Replaces the parameters, keeping names and shapes.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        *self = Self::new(self.spec.clone(), params)?;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Class-major weight rows `w_j ∈ ℝ^d` and biases of a linear model.
    pub fn linear_rows(&self) -> Option<(Vec<Vec<f64>>, Vec<f64>)> {
        if self.spec.kind != ModelKind::Linear {
            return None;
        }
        let w = self.params.get("w0")?;
        let b = self.params.get("b0")?;
        let (d, k) = (w.rows(), w.cols());
        let rows = (0..k).map(|j| (0..d).map(|c| w.get(c, j)).collect()).collect();
        Some((rows, b.data().to_vec()))
    }

    /// Logits for `x: n×d` (a length-`d` vector is treated as one row).
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.as_batch(x)?;
        let mut h = x;
        let layers = self.spec.hidden.len() + 1;
        let mut it = self.params.tensors();
        for l in 0..layers {
            let w = it.next().expect("validated");
            let b = it.next().expect("validated");
            h = tensor::affine(&h, w, b)?;
            if l + 1 < layers {
                h = tensor::relu(&h);
            }
        }
        Ok(h)
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        let vars = self
            .params
            .tensors()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        BoundParams { vars }
    }

    /// Records the forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let width = tape.value(x).shape().get(1).copied();
        if tape.value(x).shape().len() != 2 || width != Some(self.spec.input_dim) {
            return Err(ModelError::InputDim {
                expected: self.spec.input_dim,
                found: width.unwrap_or_else(|| tape.value(x).len()),
            });
        }
        let layers = self.spec.hidden.len() + 1;
        let mut h = x;
        for l in 0..layers {
            h = tape.affine(h, bound.vars[2 * l], bound.vars[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Predicted classes, lowest index winning ties.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    fn as_batch(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.spec.input_dim;
        match x.shape() {
            [n, w] if *w == d => Tensor::new(vec![*n, d], x.data().to_vec()).map_err(Into::into),
            [w] if *w == d => Ok(x.as_row_matrix()),
            [_, w] | [w] => Err(ModelError::InputDim {
                expected: d,
                found: *w,
            }),
            _ => Err(ModelError::InputDim {
                expected: d,
                found: x.len(),
            }),
        }
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn forward_logits(spec: &ModelSpec, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    Model::new(spec.clone(), params.clone())?.logits(x)
}

pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape) in spec.expected_params() {
        let t = if name.starts_with('w') {
            let bound = 1.0 / (shape[0] as f64).sqrt();
            let n = shape[0] * shape[1];
            let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
            Tensor::new(shape, data)?
        } else {
            Tensor::zeros(&shape)
        };
        params.push(name, t)?;
    }
    Ok(params)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub algorithm: String,
    pub epoch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    spec: ModelSpec,
    params: Vec<ParamRecord>,
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(model: Model, meta: CheckpointMeta) -> Self {
        Self { model, meta }
    }

    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            spec: self.model.spec.clone(),
            params: self
                .model
                .params
                .iter()
                .map(|(name, t)| ParamRecord {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| ModelError::Parse {
            field: field_hint(&e.to_string()),
            detail: e.to_string(),
        })?;
        let mut params = ParamSet::new();
        for (i, rec) in file.params.into_iter().enumerate() {
            let t = Tensor::new(rec.shape, rec.data).map_err(|e| ModelError::Parse {
                field: format!("params[{i}].data"),
                detail: e.to_string(),
            })?;
            params.push(rec.name, t).map_err(|e| ModelError::Parse {
                field: format!("params[{i}].name"),
                detail: e.to_string(),
            })?;
        }
        let model = Model::new(file.spec, params).map_err(|e| ModelError::Parse {
            field: "params".into(),
            detail: e.to_string(),
        })?;
        Ok(Self {
            model,
            meta: file.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

fn field_hint(msg: &str) -> String {
    // serde_json reports e.g. "missing field `meta` at line 3 column 1".
    match (msg.find('`'), msg.rfind('`')) {
        (Some(a), Some(b)) if b > a => msg[a + 1..b].to_string(),
        _ if msg.contains("EOF") => "<end of input>".into(),
        _ => "<document>".into(),
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
