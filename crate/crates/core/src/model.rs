//! The task model: a small fully connected classifier with hand-written
//! backpropagation, its losses, SGD with momentum, and the parameter-space
//! operations used by aggregation.
//!
//! Parameters are stored flat. For each layer, in order from input to output,
//! the weight matrix (`out x in`, row-major) is followed by the bias (`out`).

use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("architecture mismatch: expected fingerprint {expected:#018x}, found {found:#018x}")]
    ArchMismatch { expected: u64, found: u64 },
    #[error("parameter vector has {found} entries, architecture needs {expected}")]
    ParamCount { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged in epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a = f(z)`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelArch {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        num_classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        let arch = ModelArch {
            input_dim,
            hidden_dims,
            num_classes,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidArch("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidArch(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(ModelError::InvalidArch("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.num_classes));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update((self.input_dim as u64).to_le_bytes());
        hasher.update((self.hidden_dims.len() as u64).to_le_bytes());
        for &h in &self.hidden_dims {
            hasher.update((h as u64).to_le_bytes());
        }
        hasher.update((self.num_classes as u64).to_le_bytes());
        hasher.update([match self.activation {
            Activation::Relu => 0u8,
            Activation::Tanh => 1u8,
        }]);
        let digest = hasher.finalize();
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(head)
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector {
            values: vec![0.0; self.param_count()],
            fingerprint: self.fingerprint(),
        }
    }

    /// He-uniform (relu) or Glorot-uniform (tanh) weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = seed::rng(seed);
        let mut values = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in self.layer_dims() {
            let limit = match self.activation {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                Activation::Tanh => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite init limit");
            values.extend((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector {
            values,
            fingerprint: self.fingerprint(),
        }
    }

    fn check(&self, params: &ParamVector) -> Result<()> {
        let expected = self.fingerprint();
        if params.fingerprint != expected {
            return Err(ModelError::ArchMismatch {
                expected,
                found: params.fingerprint,
            });
        }
        if params.values.len() != self.param_count() {
            return Err(ModelError::ParamCount {
                expected: self.param_count(),
                found: params.values.len(),
            });
        }
        Ok(())
    }
}

/// Flat parameter vector tagged with the fingerprint of the architecture it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    fingerprint: u64,
}

impl ParamVector {
    pub fn new(arch: &ModelArch, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(ModelError::ParamCount {
                expected: arch.param_count(),
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("parameter vector"));
        }
        Ok(ParamVector {
            values,
            fingerprint: arch.fingerprint(),
        })
    }

    /// Rebuilds a vector from raw parts (checkpoint loading). Entries must be finite.
    pub fn from_raw(fingerprint: u64, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("parameter vector"));
        }
        Ok(ParamVector {
            values,
            fingerprint,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// Rows of features with integer labels; `synthetic` marks replayed rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub synthetic: Vec<bool>,
}

impl LabeledBatch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        Self::with_mask(features, labels, false)
    }

    pub fn replayed(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        Self::with_mask(features, labels, true)
    }

    fn with_mask(features: Array2<f64>, labels: Vec<usize>, synthetic: bool) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(ModelError::Contract(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        let n = labels.len();
        Ok(LabeledBatch {
            features,
            labels,
            synthetic: vec![synthetic; n],
        })
    }

    pub fn empty(feature_dim: usize) -> Self {
        LabeledBatch {
            features: Array2::zeros((0, feature_dim)),
            labels: Vec::new(),
            synthetic: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Row-wise concatenation. All parts must share the feature dimension.
    pub fn concat(parts: &[&LabeledBatch]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(ModelError::Contract("concat of zero batches".into()));
        };
        let dim = first.feature_dim();
        if parts.iter().any(|p| p.feature_dim() != dim) {
            return Err(ModelError::Contract("feature dimensions differ".into()));
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| p.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| ModelError::Contract(e.to_string()))?;
        Ok(LabeledBatch {
            features,
            labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
            synthetic: parts.iter().flat_map(|p| p.synthetic.iter().copied()).collect(),
        })
    }

    pub fn append(&mut self, other: &LabeledBatch) -> Result<()> {
        *self = LabeledBatch::concat(&[self, other])?;
        Ok(())
    }

    pub fn select(&self, rows: &[usize]) -> LabeledBatch {
        LabeledBatch {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            synthetic: rows.iter().map(|&r| self.synthetic[r]).collect(),
        }
    }

    fn check(&self, arch: &ModelArch) -> Result<()> {
        if self.feature_dim() != arch.input_dim {
            return Err(ModelError::Contract(format!(
                "batch has {} features, architecture expects {}",
                self.feature_dim(),
                arch.input_dim
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= arch.num_classes) {
            return Err(ModelError::Contract(format!(
                "label {bad} outside [0, {})",
                arch.num_classes
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("batch features"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    #[serde(rename = "lr")]
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.01,
            epochs: 20,
            batch_size: 32,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ModelError::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(ModelError::Config("weight decay must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Simplex weights over the clients taking part in a mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(ModelError::Contract("empty weight vector".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ModelError::Contract("weights must be finite and nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(ModelError::Contract(format!("weights sum to {sum}, not 1")));
        }
        Ok(AggregationWeights(weights))
    }

    pub fn uniform(n: usize) -> Self {
        AggregationWeights(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut w = vec![0.0; n];
        w[index] = 1.0;
        AggregationWeights(w)
    }

    /// Normalizes nonnegative data sizes into weights.
    pub fn proportional(sizes: &[usize]) -> Result<Self> {
        let total: usize = sizes.iter().sum();
        if total == 0 {
            return Err(ModelError::Contract("all sizes are zero".into()));
        }
        Ok(AggregationWeights(
            sizes.iter().map(|&s| s as f64 / total as f64).collect(),
        ))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

struct Layer<'a> {
    weight: ArrayView2<'a, f64>,
    bias: ArrayView1<'a, f64>,
}

fn layers<'a>(arch: &ModelArch, params: &'a ParamVector) -> Vec<Layer<'a>> {
    let mut offset = 0;
    arch.layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let w_len = fan_in * fan_out;
            let weight = ArrayView2::from_shape((fan_out, fan_in), &params.values[offset..offset + w_len])
                .expect("layer shape matches parameter count");
            offset += w_len;
            let bias = ArrayView1::from(&params.values[offset..offset + fan_out]);
            offset += fan_out;
            Layer { weight, bias }
        })
        .collect()
}

/// Activations of every layer; the last entry holds the logits.
fn forward_trace(arch: &ModelArch, params: &ParamVector, inputs: ArrayView2<f64>) -> Vec<Array2<f64>> {
    let layers = layers(arch, params);
    let last = layers.len() - 1;
    let mut trace: Vec<Array2<f64>> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let input = if l == 0 { inputs } else { trace[l - 1].view() };
        let mut z = input.dot(&layer.weight.t());
        z += &layer.bias;
        if l != last {
            z.mapv_inplace(|v| arch.activation.apply(v));
        }
        trace.push(z);
    }
    trace
}

pub fn forward(arch: &ModelArch, params: &ParamVector, batch: &LabeledBatch) -> Result<Array2<f64>> {
    arch.check(params)?;
    batch.check(arch)?;
    Ok(logits_unchecked(arch, params, batch.features.view()))
}

fn logits_unchecked(arch: &ModelArch, params: &ParamVector, inputs: ArrayView2<f64>) -> Array2<f64> {
    forward_trace(arch, params, inputs).pop().expect("at least one layer")
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean negative log-softmax probability of the true labels.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(ModelError::Contract("cross entropy of an empty batch".into()));
    }
    if logits.nrows() != labels.len() {
        return Err(ModelError::Contract(format!(
            "{} logit rows but {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.ncols()) {
        return Err(ModelError::Contract(format!("label {bad} has no logit column")));
    }
    Ok(cross_entropy_unchecked(logits.view(), labels))
}

fn cross_entropy_unchecked(logits: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = logits
        .outer_iter()
        .zip(labels)
        .map(|(row, &y)| row_cross_entropy(row, y))
        .sum();
    (total / labels.len() as f64).max(0.0)
}

fn row_cross_entropy(row: ArrayView1<f64>, y: usize) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &z)| (z - m).exp())
        .sum();
    if row[y] == m {
        rest.ln_1p()
    } else {
        (m - row[y]) + ((row[y] - m).exp() + rest).ln()
    }
}

/// Masked output alignment: mean over all rows of `1[label in previous] * MSE(student, teacher)`.
///
/// The denominator is the full row count, so rows outside the mask dilute
/// rather than drop out.
pub fn alignment_loss(
    student: &Array2<f64>,
    teacher: &Array2<f64>,
    labels: &[usize],
    previous_classes: &BTreeSet<usize>,
) -> Result<f64> {
    if student.dim() != teacher.dim() {
        return Err(ModelError::Contract(format!(
            "student logits {:?} vs teacher logits {:?}",
            student.dim(),
            teacher.dim()
        )));
    }
    if student.nrows() != labels.len() {
        return Err(ModelError::Contract("label count differs from logit rows".into()));
    }
    Ok(alignment_unchecked(student.view(), teacher.view(), labels, previous_classes))
}

fn alignment_unchecked(
    student: ArrayView2<f64>,
    teacher: ArrayView2<f64>,
    labels: &[usize],
    previous_classes: &BTreeSet<usize>,
) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let k = student.ncols() as f64;
    let total: f64 = student
        .outer_iter()
        .zip(teacher.outer_iter())
        .zip(labels)
        .filter(|(_, y)| previous_classes.contains(y))
        .map(|((s, t), _)| s.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / k)
        .sum();
    total / labels.len() as f64
}

/// Output alignment toward a frozen teacher on previously seen classes.
#[derive(Debug, Clone, Copy)]
pub struct Alignment<'a> {
    pub teacher: &'a ParamVector,
    pub previous_classes: &'a BTreeSet<usize>,
    pub lambda: f64,
}

/// `(mu / 2) * ||theta - anchor||^2`
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub anchor: &'a ParamVector,
    pub mu: f64,
}

/// Local training objective: cross entropy plus optional alignment and proximal terms.
#[derive(Debug, Clone, Copy, Default)]
pub struct Objective<'a> {
    pub alignment: Option<Alignment<'a>>,
    pub proximal: Option<Proximal<'a>>,
}

impl<'a> Objective<'a> {
    pub fn supervised() -> Self {
        Objective::default()
    }

    /// Alignment is configured only when it can have an effect; a positive
    /// weight without a teacher is a configuration error.
    pub fn aligned(
        teacher: Option<&'a ParamVector>,
        previous_classes: &'a BTreeSet<usize>,
        lambda: f64,
    ) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(ModelError::Config(format!("alignment weight {lambda} is invalid")));
        }
        match teacher {
            None if lambda > 0.0 => Err(ModelError::Config(
                "alignment weight is positive but no teacher model was given".into(),
            )),
            None => Ok(Objective::default()),
            Some(_) if lambda == 0.0 => Ok(Objective::default()),
            Some(teacher) => Ok(Objective {
                alignment: Some(Alignment {
                    teacher,
                    previous_classes,
                    lambda,
                }),
                proximal: None,
            }),
        }
    }

    pub fn with_proximal(mut self, anchor: &'a ParamVector, mu: f64) -> Self {
        self.proximal = Some(Proximal { anchor, mu });
        self
    }

    fn check(&self, arch: &ModelArch) -> Result<()> {
        if let Some(a) = &self.alignment {
            arch.check(a.teacher)?;
        }
        if let Some(p) = &self.proximal {
            arch.check(p.anchor)?;
            if !(p.mu >= 0.0 && p.mu.is_finite()) {
                return Err(ModelError::Config(format!("proximal weight {} is invalid", p.mu)));
            }
        }
        Ok(())
    }
}

/// Objective value and gradient on `inputs`. `teacher_logits` are the frozen
/// teacher outputs on the same rows when alignment is active.
fn loss_and_grad(
    arch: &ModelArch,
    params: &ParamVector,
    inputs: ArrayView2<f64>,
    labels: &[usize],
    objective: &Objective,
    teacher_logits: Option<ArrayView2<f64>>,
) -> (f64, Vec<f64>) {
    let n = labels.len() as f64;
    let trace = forward_trace(arch, params, inputs);
    let logits = trace.last().expect("at least one layer");
    let k = arch.num_classes;

    let mut loss = cross_entropy_unchecked(logits.view(), labels);
    // d(loss)/d(logits), softmax minus one-hot over n
    let mut delta = logits.clone();
    for (mut row, &y) in delta.outer_iter_mut().zip(labels) {
        let lse = log_sum_exp(row.view());
        row.mapv_inplace(|v| (v - lse).exp() / n);
        row[y] -= 1.0 / n;
    }

    if let (Some(align), Some(teacher)) = (objective.alignment.as_ref(), teacher_logits) {
        loss += align.lambda * alignment_unchecked(logits.view(), teacher, labels, align.previous_classes);
        let scale = align.lambda * 2.0 / (k as f64 * n);
        for (((mut d, s), t), y) in delta
            .outer_iter_mut()
            .zip(logits.outer_iter())
            .zip(teacher.outer_iter())
            .zip(labels)
        {
            if align.previous_classes.contains(y) {
                for ((dv, sv), tv) in d.iter_mut().zip(s.iter()).zip(t.iter()) {
                    *dv += scale * (sv - tv);
                }
            }
        }
    }

    let layer_views = layers(arch, params);
    let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(layer_views.len());
    for l in (0..layer_views.len()).rev() {
        let input = if l == 0 { inputs } else { trace[l - 1].view() };
        let grad_w = delta.t().dot(&input);
        let grad_b = delta.sum_axis(Axis(0));
        if l > 0 {
            let mut next = delta.dot(&layer_views[l].weight);
            next.zip_mut_with(&trace[l - 1], |d, &a| *d *= arch.activation.derivative_from_output(a));
            delta = next;
        }
        grads.push((grad_w, grad_b));
    }
    let mut flat = Vec::with_capacity(params.len());
    for (gw, gb) in grads.into_iter().rev() {
        flat.extend(gw.iter().copied());
        flat.extend(gb.iter().copied());
    }

    if let Some(prox) = &objective.proximal {
        let mut sq = 0.0;
        for ((g, &p), &a) in flat.iter_mut().zip(&params.values).zip(&prox.anchor.values) {
            *g += prox.mu * (p - a);
            sq += (p - a) * (p - a);
        }
        loss += 0.5 * prox.mu * sq;
    }
    (loss, flat)
}

/// Value of the full objective on a batch.
pub fn objective_value(
    arch: &ModelArch,
    params: &ParamVector,
    batch: &LabeledBatch,
    objective: &Objective,
) -> Result<f64> {
    Ok(objective_value_and_grad(arch, params, batch, objective)?.0)
}

pub fn objective_value_and_grad(
    arch: &ModelArch,
    params: &ParamVector,
    batch: &LabeledBatch,
    objective: &Objective,
) -> Result<(f64, ParamVector)> {
    arch.check(params)?;
    batch.check(arch)?;
    objective.check(arch)?;
    if batch.is_empty() {
        return Err(ModelError::Contract("gradient of an empty batch".into()));
    }
    let teacher = objective
        .alignment
        .map(|a| logits_unchecked(arch, a.teacher, batch.features.view()));
    let (loss, grad) = loss_and_grad(
        arch,
        params,
        batch.features.view(),
        &batch.labels,
        objective,
        teacher.as_ref().map(|t| t.view()),
    );
    Ok((
        loss,
        ParamVector {
            values: grad,
            fingerprint: params.fingerprint,
        },
    ))
}

/// Gradient of `cross_entropy + lambda_align * alignment_loss`, teacher held constant.
pub fn grad(
    arch: &ModelArch,
    params: &ParamVector,
    batch: &LabeledBatch,
    teacher: Option<&ParamVector>,
    previous_classes: &BTreeSet<usize>,
    lambda_align: f64,
) -> Result<ParamVector> {
    let objective = Objective::aligned(teacher, previous_classes, lambda_align)?;
    Ok(objective_value_and_grad(arch, params, batch, &objective)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamVector,
    /// Mean minibatch objective per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Minibatch SGD with momentum and coupled weight decay:
/// `v <- m*v + g + wd*theta; theta <- theta - lr*v`.
///
/// Rows are reshuffled every epoch from a generator seeded with `seed`.
pub fn sgd_train(
    arch: &ModelArch,
    init: &ParamVector,
    data: &LabeledBatch,
    cfg: &SgdConfig,
    objective: &Objective,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.check(init)?;
    data.check(arch)?;
    objective.check(arch)?;
    if data.is_empty() {
        return Err(ModelError::Contract("training on an empty batch".into()));
    }
    let teacher_logits = objective
        .alignment
        .map(|a| logits_unchecked(arch, a.teacher, data.features.view()));

    let mut rng = seed::rng(seed);
    let mut params = init.clone();
    let mut velocity = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let inputs = data.features.select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&r| data.labels[r]).collect();
            let teacher = teacher_logits.as_ref().map(|t| t.select(Axis(0), chunk));
            let (loss, g) = loss_and_grad(
                arch,
                &params,
                inputs.view(),
                &labels,
                objective,
                teacher.as_ref().map(|t| t.view()),
            );
            if !loss.is_finite() {
                return Err(ModelError::Diverged { epoch, loss });
            }
            for ((v, theta), gi) in velocity.iter_mut().zip(params.values.iter_mut()).zip(&g) {
                *v = cfg.momentum * *v + gi + cfg.weight_decay * *theta;
                *theta -= cfg.learning_rate * *v;
            }
            loss_sum += loss;
            batches += 1;
        }
        let epoch_loss = loss_sum / batches as f64;
        if !epoch_loss.is_finite() || params.values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
        epoch_losses.push(epoch_loss);
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
    })
}

/// Elementwise convex combination `sum_j w_j * theta_j`.
pub fn mix_params(params_list: &[ParamVector], weights: &AggregationWeights) -> Result<ParamVector> {
    let Some(first) = params_list.first() else {
        return Err(ModelError::Contract("mixing zero parameter vectors".into()));
    };
    if weights.len() != params_list.len() {
        return Err(ModelError::Contract(format!(
            "{} weights for {} parameter vectors",
            weights.len(),
            params_list.len()
        )));
    }
    for p in params_list {
        if p.fingerprint != first.fingerprint {
            return Err(ModelError::ArchMismatch {
                expected: first.fingerprint,
                found: p.fingerprint,
            });
        }
        if p.len() != first.len() {
            return Err(ModelError::ParamCount {
                expected: first.len(),
                found: p.len(),
            });
        }
    }
    let mut values = vec![0.0; first.len()];
    for (p, &w) in params_list.iter().zip(weights.as_slice()) {
        for (acc, &v) in values.iter_mut().zip(&p.values) {
            *acc += w * v;
        }
    }
    Ok(ParamVector {
        values,
        fingerprint: first.fingerprint,
    })
}

/// Index of the largest logit; ties go to the lowest class id.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

pub fn accuracy(arch: &ModelArch, params: &ParamVector, batch: &LabeledBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(ModelError::Contract("accuracy on an empty batch".into()));
    }
    let logits = forward(arch, params, batch)?;
    let correct = logits
        .outer_iter()
        .zip(&batch.labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Rows `[start, end)` of a batch as an owned batch.
pub fn slice_rows(batch: &LabeledBatch, start: usize, end: usize) -> LabeledBatch {
    LabeledBatch {
        features: batch.features.slice(s![start..end, ..]).to_owned(),
        labels: batch.labels[start..end].to_vec(),
        synthetic: batch.synthetic[start..end].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn tiny_arch() -> ModelArch {
        ModelArch::new(2, vec![8], 3, Activation::Relu).unwrap()
    }

    fn random_params(arch: &ModelArch, seed: u64) -> ParamVector {
        let mut rng = seed::rng(seed);
        let values = (0..arch.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        ParamVector::new(arch, values).unwrap()
    }

    fn random_batch(dim: usize, n: usize, classes: usize, seed: u64) -> LabeledBatch {
        let mut rng = seed::rng(seed);
        let features = Array2::from_shape_fn((n, dim), |_| rng.random_range(-2.0..2.0));
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        LabeledBatch::new(features, labels).unwrap()
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let arch = tiny_arch();
        let batch = random_batch(2, 4, 3, 1);
        let logits = forward(&arch, &arch.zeros(), &batch).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer() {
        let arch = ModelArch::new(3, vec![], 3, Activation::Relu).unwrap();
        let mut values = vec![0.0; arch.param_count()];
        for i in 0..3 {
            values[i * 3 + i] = 1.0;
        }
        let params = ParamVector::new(&arch, values).unwrap();
        let x = array![[0.5, -1.5, 2.0], [3.0, 0.0, -0.25]];
        let batch = LabeledBatch::new(x.clone(), vec![0, 1]).unwrap();
        assert_eq!(forward(&arch, &params, &batch).unwrap(), x);
    }

    #[test]
    fn forward_matches_scalar_matmul_oracle() {
        let arch = ModelArch::new(2, vec![16], 3, Activation::Relu).unwrap();
        let params = random_params(&arch, 11);
        let batch = random_batch(2, 5, 3, 12);
        let logits = forward(&arch, &params, &batch).unwrap();

        let v = params.values();
        let (w1, rest) = v.split_at(32);
        let (b1, rest) = rest.split_at(16);
        let (w2, b2) = rest.split_at(48);
        for r in 0..5 {
            let x = [batch.features[[r, 0]], batch.features[[r, 1]]];
            let mut hidden = [0.0; 16];
            for (j, h) in hidden.iter_mut().enumerate() {
                let mut acc = b1[j];
                for (i, xi) in x.iter().enumerate() {
                    acc += w1[j * 2 + i] * xi;
                }
                *h = if acc > 0.0 { acc } else { 0.0 };
            }
            for k in 0..3 {
                let mut acc = b2[k];
                for (j, h) in hidden.iter().enumerate() {
                    acc += w2[k * 16 + j] * h;
                }
                assert!((logits[[r, k]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let arch = tiny_arch();
        let other = ModelArch::new(2, vec![8], 3, Activation::Tanh).unwrap();
        let batch = random_batch(2, 3, 3, 2);
        let err = forward(&arch, &other.zeros(), &batch).unwrap_err();
        assert!(matches!(err, ModelError::ArchMismatch { .. }));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let arch = tiny_arch();
        let batch = LabeledBatch::new(array![[f64::NAN, 0.0]], vec![0]).unwrap();
        assert_eq!(
            forward(&arch, &arch.zeros(), &batch).unwrap_err(),
            ModelError::NonFinite("batch features")
        );
        assert!(ParamVector::new(&arch, vec![f64::INFINITY; arch.param_count()]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let logits = Array2::from_elem((4, 7), 0.3);
        let loss = cross_entropy(&logits, &[0, 3, 6, 2]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_decreases_as_true_logit_grows() {
        let mut prev = f64::INFINITY;
        for step in 0..40 {
            let logits = array![[step as f64, 0.0, 0.0]];
            let loss = cross_entropy(&logits, &[0]).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-15 + 2.0 * (-39f64).exp());
    }

    #[test]
    fn cross_entropy_matches_hand_log_sum_exp() {
        let logits = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0], [10.0, -10.0, 0.0]];
        let labels = [2, 0, 1];
        let hand = |row: [f64; 3], y: usize| -> f64 {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[y].exp() / z).ln()
        };
        let expected = (hand([1.0, 2.0, 3.0], 2) + hand([-1.0, 0.5, 0.0], 0) + hand([10.0, -10.0, 0.0], 1)) / 3.0;
        assert!((cross_entropy(&logits, &labels).unwrap() - expected).abs() < 1e-12);
        assert!(cross_entropy(&Array2::zeros((0, 3)), &[]).is_err());
    }

    #[test]
    fn alignment_examples() {
        let prev: BTreeSet<usize> = [0].into_iter().collect();
        let s = array![[1.0, 0.0]];
        let t = array![[0.0, 1.0]];
        assert_eq!(alignment_loss(&s, &s, &[0], &prev).unwrap(), 0.0);
        assert_eq!(alignment_loss(&s, &t, &[1], &prev).unwrap(), 0.0);
        assert_eq!(alignment_loss(&s, &t, &[0], &prev).unwrap(), 1.0);
        assert!(alignment_loss(&s, &array![[0.0, 1.0, 2.0]], &[0], &prev).is_err());
        assert_eq!(alignment_loss(&s, &t, &[0], &BTreeSet::new()).unwrap(), 0.0);
    }

    #[test]
    fn missing_teacher_with_positive_lambda_is_config_error() {
        let arch = tiny_arch();
        let batch = random_batch(2, 3, 3, 5);
        let err = grad(&arch, &arch.zeros(), &batch, None, &BTreeSet::new(), 0.5).unwrap_err();
        assert!(matches!(err, ModelError::Config(_)));
    }

    #[test]
    fn zero_lambda_equals_plain_cross_entropy_gradient() {
        let arch = tiny_arch();
        let params = random_params(&arch, 3);
        let teacher = random_params(&arch, 4);
        let batch = random_batch(2, 6, 3, 5);
        let prev: BTreeSet<usize> = [0, 1, 2].into_iter().collect();
        let a = grad(&arch, &params, &batch, Some(&teacher), &prev, 0.0).unwrap();
        let b = grad(&arch, &params, &batch, None, &prev, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn teacher_equal_to_student_adds_no_gradient() {
        let arch = tiny_arch();
        let params = random_params(&arch, 3);
        let batch = random_batch(2, 6, 3, 5);
        let prev: BTreeSet<usize> = [0, 1, 2].into_iter().collect();
        let a = grad(&arch, &params, &batch, Some(&params), &prev, 3.0).unwrap();
        let b = grad(&arch, &params, &batch, None, &prev, 0.0).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_epochs_return_init() {
        let arch = tiny_arch();
        let init = random_params(&arch, 8);
        let batch = random_batch(2, 10, 3, 9);
        let cfg = SgdConfig {
            epochs: 0,
            ..SgdConfig::default()
        };
        let out = sgd_train(&arch, &init, &batch, &cfg, &Objective::supervised(), 1).unwrap();
        assert_eq!(out.params, init);
        assert!(out.epoch_losses.is_empty());
    }

    #[test]
    fn divergence_reports_epoch() {
        let arch = tiny_arch();
        let init = random_params(&arch, 8);
        let batch = random_batch(2, 10, 3, 9);
        let cfg = SgdConfig {
            learning_rate: 1e200,
            momentum: 0.0,
            weight_decay: 0.0,
            epochs: 5,
            batch_size: 10,
        };
        let err = sgd_train(&arch, &init, &batch, &cfg, &Objective::supervised(), 1).unwrap_err();
        assert!(matches!(err, ModelError::Diverged { .. }));
    }

    #[test]
    fn mix_examples() {
        let arch = ModelArch::new(1, vec![], 2, Activation::Relu).unwrap();
        // 1 -> 2 has 4 parameters
        let a = ParamVector::new(&arch, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = ParamVector::new(&arch, vec![4.0, 8.0, 4.0, 8.0]).unwrap();
        let w = AggregationWeights::new(vec![0.25, 0.75]).unwrap();
        let m = mix_params(&[a.clone(), b.clone()], &w).unwrap();
        assert_eq!(m.values(), &[3.0, 6.0, 3.0, 6.0]);
        let one = mix_params(&[a.clone(), b.clone()], &AggregationWeights::one_hot(2, 1)).unwrap();
        assert_eq!(one, b);
        let other = ModelArch::new(1, vec![], 2, Activation::Tanh).unwrap();
        let c = ParamVector::new(&other, vec![0.0; 4]).unwrap();
        assert!(matches!(
            mix_params(&[a, c], &AggregationWeights::uniform(2)),
            Err(ModelError::ArchMismatch { .. })
        ));
    }

    #[test]
    fn weights_reject_off_simplex() {
        assert!(AggregationWeights::new(vec![0.5, 0.6]).is_err());
        assert!(AggregationWeights::new(vec![-0.1, 1.1]).is_err());
        assert!(AggregationWeights::new(vec![]).is_err());
    }

    #[test]
    fn accuracy_tie_break_and_hand_count() {
        let arch = tiny_arch();
        let batch = LabeledBatch::new(Array2::zeros((5, 2)), vec![0, 1, 0, 2, 0]).unwrap();
        assert_eq!(accuracy(&arch, &arch.zeros(), &batch).unwrap(), 0.6);

        // identity net on 10 hand-picked rows: 7 of 10 argmax hits
        let arch = ModelArch::new(2, vec![], 2, Activation::Relu).unwrap();
        let params = ParamVector::new(&arch, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let x = array![
            [1.0, 0.0], [0.0, 1.0], [2.0, 1.0], [1.0, 2.0], [0.5, 0.5],
            [0.5, 0.5], [3.0, 0.0], [0.0, 3.0], [1.0, 0.0], [0.0, 1.0]
        ];
        let labels = vec![0, 1, 0, 1, 0, 1, 1, 0, 0, 1];
        // predictions: 0 1 0 1 0 0 0 1 0 1 -> rows 5, 6, 7 wrong
        let batch = LabeledBatch::new(x, labels).unwrap();
        assert_eq!(accuracy(&arch, &params, &batch).unwrap(), 0.7);
        assert!(accuracy(&arch, &params, &LabeledBatch::empty(2)).is_err());
    }
}
