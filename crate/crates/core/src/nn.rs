//! Small fully connected networks with exact backpropagation.
//!
//! Parameters live in one flat vector. Layer `l` occupies a contiguous block
//! holding its weight matrix (row-major, `out x in`) followed by its bias.
//! Every routine here is a pure function of its arguments.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to sigmoid probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and activation `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputKind {
    /// Single logistic unit trained with binary cross-entropy.
    SigmoidBinary,
    /// Raw outputs trained with half mean squared error.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_widths: Vec<usize>,
    hidden_activation: Activation,
    output: OutputKind,
}

impl MlpSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        hidden_activation: Activation,
        output: OutputKind,
    ) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::invalid("an MLP needs at least input and output widths"));
        }
        if let Some(pos) = layer_widths.iter().position(|&w| w == 0) {
            return Err(Error::invalid(format!("layer width at index {pos} is zero")));
        }
        Ok(Self {
            layer_widths,
            hidden_activation,
            output,
        })
    }

    /// Logistic classifier with the given hidden layers.
    pub fn classifier(input_dim: usize, hidden: &[usize], activation: Activation) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input_dim);
        widths.extend_from_slice(hidden);
        widths.push(1);
        Self::new(widths, activation, OutputKind::SigmoidBinary)
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output(&self) -> OutputKind {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Offset of each layer's weight block inside the flat parameter vector.
    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.num_layers());
        let mut acc = 0;
        for w in self.layer_widths.windows(2) {
            offsets.push(acc);
            acc += w[0] * w[1] + w[1];
        }
        offsets
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        Ok(())
    }

    fn check_scalar_output(&self) -> Result<()> {
        if self.output_dim() != 1 {
            return Err(Error::invalid(format!(
                "loss requires a single output unit, spec has {}",
                self.output_dim()
            )));
        }
        Ok(())
    }
}

/// Flat real-valued parameter vector exchanged between clients and server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, scale: f64, other: &[f64]) {
        axpy(scale, other, &mut self.0);
    }

    pub fn scaled(&self, scale: f64) -> Self {
        Self(self.0.iter().map(|v| v * scale).collect())
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn axpy(scale: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += scale * xi;
    }
}

/// Labeled examples. Group tags ride along for evaluation only; nothing in
/// the training path reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<Vec<f64>>,
    labels: Vec<u8>,
    group_tags: Option<Vec<u32>>,
}

impl Batch {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<u8>,
        group_tags: Option<Vec<u32>>,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::invalid("batch must contain at least one example"));
        }
        if labels.len() != features.len() {
            return Err(Error::DimensionMismatch {
                context: "batch labels",
                expected: features.len(),
                got: labels.len(),
            });
        }
        let d = features[0].len();
        if let Some(row) = features.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                context: "batch feature row",
                expected: d,
                got: row.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::invalid(format!("label {bad} is not binary")));
        }
        if let Some(tags) = &group_tags {
            if tags.len() != features.len() {
                return Err(Error::DimensionMismatch {
                    context: "batch group tags",
                    expected: features.len(),
                    got: tags.len(),
                });
            }
        }
        Ok(Self {
            features,
            labels,
            group_tags,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn group_tags(&self) -> Option<&[u32]> {
        self.group_tags.as_deref()
    }

    /// Copy of the batch without group tags, as handed to training code.
    pub fn without_tags(&self) -> Self {
        Self {
            features: self.features.clone(),
            labels: self.labels.clone(),
            group_tags: None,
        }
    }

    /// Examples at `indices`, in that order. Panics on out-of-range indices.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let features = indices.iter().map(|&i| self.features[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let tags = self
            .group_tags
            .as_ref()
            .map(|t| indices.iter().map(|&i| t[i]).collect());
        Self::new(features, labels, tags)
    }

    /// Concatenate batches sharing a feature dimension.
    pub fn concat(parts: &[&Batch]) -> Result<Self> {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let all_tagged = parts.iter().all(|b| b.group_tags.is_some());
        let mut tags = Vec::new();
        for b in parts {
            features.extend(b.features.iter().cloned());
            labels.extend_from_slice(&b.labels);
            if let Some(t) = &b.group_tags {
                tags.extend_from_slice(t);
            }
        }
        Self::new(features, labels, all_tagged.then_some(tags))
    }

    fn check_dim(&self, spec: &MlpSpec) -> Result<()> {
        if self.dim() != spec.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "feature dimension",
                expected: spec.input_dim(),
                got: self.dim(),
            });
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-layer pre-activations and activations for one example.
struct Trace {
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
}

fn forward_trace(spec: &MlpSpec, offsets: &[usize], params: &[f64], x: &[f64]) -> Result<Trace> {
    let layers = spec.num_layers();
    let mut pre = Vec::with_capacity(layers);
    let mut act = Vec::with_capacity(layers + 1);
    act.push(x.to_vec());
    for l in 0..layers {
        let (fan_in, fan_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let w = &params[offsets[l]..offsets[l] + fan_in * fan_out];
        let b = &params[offsets[l] + fan_in * fan_out..offsets[l] + fan_in * fan_out + fan_out];
        let input = &act[l];
        let z: Vec<f64> = (0..fan_out)
            .map(|o| dot(&w[o * fan_in..(o + 1) * fan_in], input) + b[o])
            .collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: l });
        }
        let a = if l + 1 < layers {
            z.iter().map(|&v| spec.hidden_activation.apply(v)).collect()
        } else {
            match spec.output {
                OutputKind::SigmoidBinary => z.iter().map(|&v| sigmoid(v)).collect(),
                OutputKind::Linear => z.clone(),
            }
        };
        pre.push(z);
        act.push(a);
    }
    Ok(Trace { pre, act })
}

/// Backpropagate `d_out` (gradient w.r.t. the output layer's pre-activation)
/// and accumulate `scale * grad` into `out`.
fn backward_into(
    spec: &MlpSpec,
    offsets: &[usize],
    params: &[f64],
    trace: &Trace,
    d_out: Vec<f64>,
    scale: f64,
    out: &mut [f64],
) -> Result<()> {
    let layers = spec.num_layers();
    let mut delta = d_out;
    for l in (0..layers).rev() {
        let (fan_in, fan_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let w_off = offsets[l];
        let b_off = w_off + fan_in * fan_out;
        let input = &trace.act[l];
        for o in 0..fan_out {
            let d = scale * delta[o];
            let row = &mut out[w_off + o * fan_in..w_off + (o + 1) * fan_in];
            axpy(d, input, row);
            out[b_off + o] += d;
        }
        if l > 0 {
            let w = &params[w_off..b_off];
            let mut prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                axpy(delta[o], &w[o * fan_in..(o + 1) * fan_in], &mut prev);
            }
            for (i, p) in prev.iter_mut().enumerate() {
                *p *= spec
                    .hidden_activation
                    .derivative(trace.pre[l - 1][i], trace.act[l][i]);
            }
            if prev.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: l - 1 });
            }
            delta = prev;
        }
    }
    Ok(())
}

/// Network outputs for every row of `features` (probabilities for
/// sigmoid outputs, raw values for linear outputs).
pub fn forward(spec: &MlpSpec, params: &[f64], features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    spec.check_params(params)?;
    let offsets = spec.layer_offsets();
    features
        .iter()
        .map(|x| {
            if x.len() != spec.input_dim() {
                return Err(Error::DimensionMismatch {
                    context: "feature dimension",
                    expected: spec.input_dim(),
                    got: x.len(),
                });
            }
            let mut trace = forward_trace(spec, &offsets, params, x)?;
            Ok(trace.act.pop().unwrap())
        })
        .collect()
}

/// Scalar output per example; requires a single output unit.
pub fn predict(spec: &MlpSpec, params: &[f64], features: &[Vec<f64>]) -> Result<Vec<f64>> {
    spec.check_scalar_output()?;
    Ok(forward(spec, params, features)?
        .into_iter()
        .map(|o| o[0])
        .collect())
}

/// Output-layer logits (pre-sigmoid) for a single-output network.
pub fn logits(spec: &MlpSpec, params: &[f64], features: &[Vec<f64>]) -> Result<Vec<f64>> {
    spec.check_scalar_output()?;
    spec.check_params(params)?;
    let offsets = spec.layer_offsets();
    features
        .iter()
        .map(|x| Ok(forward_trace(spec, &offsets, params, x)?.pre.last().unwrap()[0]))
        .collect()
}

fn example_loss(output: OutputKind, out: f64, y: u8) -> f64 {
    let y = y as f64;
    match output {
        OutputKind::SigmoidBinary => {
            let p = out.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        }
        OutputKind::Linear => 0.5 * (out - y) * (out - y),
    }
}

/// Per-example losses.
pub fn per_sample_losses(spec: &MlpSpec, params: &[f64], batch: &Batch) -> Result<Vec<f64>> {
    batch.check_dim(spec)?;
    let outs = predict(spec, params, batch.features())?;
    Ok(outs
        .iter()
        .zip(batch.labels())
        .map(|(&o, &y)| example_loss(spec.output, o, y))
        .collect())
}

/// Mean loss: binary cross-entropy for sigmoid outputs, half squared error
/// for linear outputs.
pub fn loss(spec: &MlpSpec, params: &[f64], batch: &Batch) -> Result<f64> {
    let losses = per_sample_losses(spec, params, batch)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Per-example gradients where the gradient of each example's loss with
/// respect to its output logit is supplied by `d_logit(index, logit)`.
pub fn per_sample_grads_with<F>(
    spec: &MlpSpec,
    params: &[f64],
    features: &[Vec<f64>],
    d_logit: F,
) -> Result<Vec<ParamVector>>
where
    F: Fn(usize, f64) -> f64,
{
    spec.check_scalar_output()?;
    spec.check_params(params)?;
    let offsets = spec.layer_offsets();
    let p = spec.param_count();
    features
        .iter()
        .enumerate()
        .map(|(i, x)| {
            if x.len() != spec.input_dim() {
                return Err(Error::DimensionMismatch {
                    context: "feature dimension",
                    expected: spec.input_dim(),
                    got: x.len(),
                });
            }
            let trace = forward_trace(spec, &offsets, params, x)?;
            let z = trace.pre.last().unwrap()[0];
            let mut g = vec![0.0; p];
            backward_into(spec, &offsets, params, &trace, vec![d_logit(i, z)], 1.0, &mut g)?;
            Ok(ParamVector(g))
        })
        .collect()
}

/// Mean gradient for a custom per-example logit gradient.
pub fn grad_with<F>(spec: &MlpSpec, params: &[f64], features: &[Vec<f64>], d_logit: F) -> Result<ParamVector>
where
    F: Fn(usize, f64) -> f64,
{
    let per = per_sample_grads_with(spec, params, features, d_logit)?;
    Ok(mean_of(&per, spec.param_count()))
}

pub(crate) fn mean_of(vectors: &[ParamVector], len: usize) -> ParamVector {
    let mut acc = vec![0.0; len];
    for v in vectors {
        axpy(1.0, v, &mut acc);
    }
    let inv = 1.0 / vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    ParamVector(acc)
}

fn loss_logit_grad(output: OutputKind, z: f64, y: u8) -> f64 {
    let y = y as f64;
    match output {
        OutputKind::SigmoidBinary => sigmoid(z) - y,
        OutputKind::Linear => z - y,
    }
}

/// Gradient of each example's own loss.
pub fn per_sample_grads(spec: &MlpSpec, params: &[f64], batch: &Batch) -> Result<Vec<ParamVector>> {
    batch.check_dim(spec)?;
    let labels = batch.labels();
    let output = spec.output;
    per_sample_grads_with(spec, params, batch.features(), |i, z| {
        loss_logit_grad(output, z, labels[i])
    })
}

/// Gradient of the mean loss. Computed as the mean of per-example gradients.
pub fn grad(spec: &MlpSpec, params: &[f64], batch: &Batch) -> Result<ParamVector> {
    let per = per_sample_grads(spec, params, batch)?;
    Ok(mean_of(&per, spec.param_count()))
}

/// Hard predictions (`output >= threshold` is class 1) and the mask of
/// examples whose prediction matches the label.
pub fn classify(
    spec: &MlpSpec,
    params: &[f64],
    batch: &Batch,
    threshold: f64,
) -> Result<(Vec<u8>, Vec<bool>)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    batch.check_dim(spec)?;
    let outs = predict(spec, params, batch.features())?;
    let preds: Vec<u8> = outs.iter().map(|&p| u8::from(p >= threshold)).collect();
    let correct = preds
        .iter()
        .zip(batch.labels())
        .map(|(p, y)| p == y)
        .collect();
    Ok((preds, correct))
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and zero biases.
pub fn init_params<R: rand::Rng>(spec: &MlpSpec, rng: &mut R) -> ParamVector {
    let mut out = Vec::with_capacity(spec.param_count());
    for w in spec.layer_widths.windows(2) {
        let bound = 1.0 / (w[0] as f64).sqrt();
        out.extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)));
        out.extend(std::iter::repeat_n(0.0, w[1]));
    }
    ParamVector(out)
}
