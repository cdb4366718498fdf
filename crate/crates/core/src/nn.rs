//! Minimal dense MLP: forward pass with a recorded trace, backward pass that
//! returns both parameter gradients and the gradient with respect to the
//! input batch, softmax cross-entropy, and plain SGD.
//!
//! Layers compute `z = x·W + b` with `W` stored as `in_dim x out_dim`, so a
//! batch is a `batch x in_dim` matrix and flows left to right.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `in_dim x out_dim`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec::new(self.weight.rows(), self.weight.cols(), self.activation)
    }
}

/// Parameters of a feed-forward network. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<DenseLayer>,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Matrix,
    pub pre_activations: Vec<Matrix>,
    pub activations: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.activations.last().unwrap_or(&self.input)
    }

    pub fn into_output(mut self) -> Matrix {
        self.activations.pop().unwrap_or(self.input)
    }
}

fn check_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::invalid("a network needs at least one layer"));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::invalid(format!("layer {i} has a zero dimension")));
        }
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::shape(format!(
                "layer {i} outputs {} values but layer {} expects {}",
                pair[0].out_dim,
                i + 1,
                pair[1].in_dim
            )));
        }
    }
    Ok(())
}

/// Weights uniform in `[-1/sqrt(in_dim), 1/sqrt(in_dim)]`, biases zero.
pub fn mlp_init(specs: &[LayerSpec], seed: u64) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mlp_init_with_rng(specs, &mut rng)
}

pub fn mlp_init_with_rng<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<ModelParams> {
    check_chain(specs)?;
    let layers = specs
        .iter()
        .map(|s| {
            let limit = 1.0 / (s.in_dim as f64).sqrt();
            let data = (0..s.in_dim * s.out_dim)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            DenseLayer {
                weight: Matrix::from_vec(s.in_dim, s.out_dim, data)
                    .expect("length matches by construction"),
                bias: vec![0.0; s.out_dim],
                activation: s.activation,
            }
        })
        .collect();
    Ok(ModelParams { layers })
}

impl ModelParams {
    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(DenseLayer::spec).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                    activation: l.activation,
                })
                .collect(),
        }
    }

    /// Chains `self` followed by `next` into a single network.
    pub fn stack(&self, next: &ModelParams) -> Result<Self> {
        if self.out_dim() != next.in_dim() {
            return Err(Error::shape(format!(
                "cannot stack a {}-output network onto a {}-input network",
                self.out_dim(),
                next.in_dim()
            )));
        }
        let mut layers = self.layers.clone();
        layers.extend(next.layers.iter().cloned());
        Ok(Self { layers })
    }

    /// Splits into the first `depth` layers and the rest.
    pub fn split_at(&self, depth: usize) -> (Self, Self) {
        let (a, b) = self.layers.split_at(depth);
        (Self { layers: a.to_vec() }, Self { layers: b.to_vec() })
    }

    fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.len() == b.bias.len())
    }

    /// `self += factor · other`
    pub fn add_scaled(&mut self, other: &ModelParams, factor: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape("parameter sets differ in shape"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_scaled(&b.weight, factor);
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += factor * y;
            }
        }
        Ok(())
    }

    /// All parameters in layer order, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight
                .as_mut_slice()
                .copy_from_slice(&values[offset..offset + n]);
            offset += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn forward(params: &ModelParams, x: &Matrix) -> Result<ForwardTrace> {
    if x.cols() != params.in_dim() {
        return Err(Error::shape(format!(
            "input has {} columns, network expects {}",
            x.cols(),
            params.in_dim()
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("network input"));
    }
    let mut pre_activations = Vec::with_capacity(params.depth());
    let mut activations: Vec<Matrix> = Vec::with_capacity(params.depth());
    for layer in &params.layers {
        let prev = activations.last().unwrap_or(x);
        let mut z = prev.matmul(&layer.weight);
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        let a = z.map(|v| layer.activation.apply(v));
        pre_activations.push(z);
        activations.push(a);
    }
    Ok(ForwardTrace {
        input: x.clone(),
        pre_activations,
        activations,
    })
}

/// Forward pass returning only the network output.
pub fn predict(params: &ModelParams, x: &Matrix) -> Result<Matrix> {
    forward(params, x).map(ForwardTrace::into_output)
}

/// Returns `(param_grads, input_grads)` for upstream gradient `dout`.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    dout: &Matrix,
) -> Result<(ModelParams, Matrix)> {
    if trace.activations.len() != params.depth() {
        return Err(Error::shape("trace depth differs from network depth"));
    }
    if dout.shape() != trace.output().shape() {
        return Err(Error::shape(format!(
            "upstream gradient is {:?}, output is {:?}",
            dout.shape(),
            trace.output().shape()
        )));
    }
    let mut grads = params.zeros_like();
    let mut delta = dout.clone();
    for (idx, layer) in params.layers.iter().enumerate().rev() {
        let z = &trace.pre_activations[idx];
        for (d, &zv) in delta.as_mut_slice().iter_mut().zip(z.as_slice()) {
            *d *= layer.activation.derivative(zv);
        }
        let input = if idx == 0 {
            &trace.input
        } else {
            &trace.activations[idx - 1]
        };
        grads.layers[idx].weight = input.t_matmul(&delta);
        grads.layers[idx].bias = delta.col_sums();
        delta = delta.matmul_t(&layer.weight);
    }
    Ok((grads, delta))
}

pub fn sgd_step(params: &ModelParams, grads: &ModelParams, lr: f64) -> Result<ModelParams> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate {lr} must be finite and >= 0"
        )));
    }
    let mut next = params.clone();
    next.add_scaled(grads, -lr)?;
    Ok(next)
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::invalid("cross-entropy of an empty batch"));
    }
    let classes = logits.cols();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let n = labels.len() as f64;
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += log_sum - row[y];
        grad[(i, y)] -= 1.0;
    }
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}

pub fn predict_proba(params: &ModelParams, x: &Matrix) -> Result<Matrix> {
    predict(params, x).map(|logits| softmax_rows(&logits))
}

/// One cross-entropy SGD step on a labelled batch. Returns the updated
/// parameters and the batch loss.
pub fn supervised_step(
    params: &ModelParams,
    x: &Matrix,
    labels: &[usize],
    lr: f64,
) -> Result<(ModelParams, f64)> {
    let trace = forward(params, x)?;
    let (loss, dlogits) = softmax_cross_entropy(trace.output(), labels)?;
    let (grads, _) = backward(params, &trace, &dlogits)?;
    Ok((sgd_step(params, &grads, lr)?, loss))
}

/// Minibatch SGD over shuffled batches for a number of epochs.
pub fn train_classifier<R: Rng + ?Sized>(
    mut params: ModelParams,
    x: &Matrix,
    labels: &[usize],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut R,
) -> Result<ModelParams> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if x.rows() != labels.len() {
        return Err(Error::shape("features and labels differ in length"));
    }
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let xb = x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            params = supervised_step(&params, &xb, &yb, lr)?.0;
        }
    }
    Ok(params)
}
