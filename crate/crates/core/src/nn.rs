//! Dense network substrate: layers, batched forward/backward, MSE, SGD and
//! ADAM. Batches are row-major matrices, one sample per row.

use alloc::vec;
use alloc::vec::Vec;


use crate::error::{Error, Result};
use crate::linalg::{matmul_nn, matmul_nt, matmul_tn, Matrix};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::Identity => v,
        }
    }
}

/// `y = act(W x + b)` with `W: [out × in]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "LayerRepr"))]
pub struct DenseLayer {
    weights: Matrix,
    biases: Vec<f64>,
    activation: Activation,
}

#[cfg(feature = "serde")]
#[derive(serde::Deserialize)]
struct LayerRepr {
    weights: Matrix,
    biases: Vec<f64>,
    activation: Activation,
}

#[cfg(feature = "serde")]
impl TryFrom<LayerRepr> for DenseLayer {
    type Error = Error;

    fn try_from(r: LayerRepr) -> Result<Self> {
        DenseLayer::new(r.weights, r.biases, r.activation)
    }
}

impl DenseLayer {
    pub fn new(weights: Matrix, biases: Vec<f64>, activation: Activation) -> Result<Self> {
        if biases.len() != weights.rows() {
            return Err(Error::dims("layer biases", weights.rows(), biases.len()));
        }
        Ok(DenseLayer {
            weights,
            biases,
            activation,
        })
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        DenseLayer {
            weights: Matrix::zeros(output, input),
            biases: vec![0.0; output],
            activation,
        }
    }

    /// Uniform He initialization, `U(-√(6/fan_in), √(6/fan_in))`, zero bias.
    pub fn he_uniform<R: rand::Rng>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = libm::sqrt(6.0 / input.max(1) as f64);
        let mut layer = DenseLayer::zeros(input, output, activation);
        for w in layer.weights.as_mut_slice() {
            *w = rng.random_range(-limit..limit);
        }
        layer
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_params(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.biases.len()
    }

    fn pre_activation(&self, x: &Matrix) -> Matrix {
        let mut z = matmul_nt(x, &self.weights);
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.biases) {
                *v += b;
            }
        }
        z
    }
}

/// Per-layer gradient of a dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

/// Gradients of one network, layer by layer, mirroring its parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LayerGrad>,
    /// Number of samples the gradient was averaged over.
    pub samples: usize,
}

impl GradientBundle {
    pub fn zeros_like(net: &Mlp) -> Self {
        GradientBundle {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Matrix::zeros(l.output_dim(), l.input_dim()),
                    biases: vec![0.0; l.output_dim()],
                })
                .collect(),
            samples: 0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.biases.len())
            .sum()
    }

    pub fn shape_matches(&self, net: &Mlp) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(g, l)| {
                g.weights.shape() == l.weights.shape() && g.biases.len() == l.biases.len()
            })
    }

    pub fn same_shape(&self, other: &GradientBundle) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.shape() == b.weights.shape() && a.biases.len() == b.biases.len()
            })
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(l.biases.iter()))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.as_mut_slice().iter_mut().chain(l.biases.iter_mut()))
    }

    /// Flattened in layer order, weights (row-major) before biases.
    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values().map(|v| v * v).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor · other`.
    pub fn add_scaled(&mut self, other: &GradientBundle, factor: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::InvalidConfig("gradient bundle shapes differ".into()));
        }
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += factor * b;
        }
        Ok(())
    }
}

/// Activations recorded by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
    dims: Vec<(usize, usize)>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }
}

/// A feed-forward stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "MlpRepr"))]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

#[cfg(feature = "serde")]
#[derive(serde::Deserialize)]
struct MlpRepr {
    layers: Vec<DenseLayer>,
}

#[cfg(feature = "serde")]
impl TryFrom<MlpRepr> for Mlp {
    type Error = Error;

    fn try_from(r: MlpRepr) -> Result<Self> {
        Mlp::new(r.layers)
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::dims(
                    "layer chaining",
                    pair[0].output_dim(),
                    pair[1].input_dim(),
                ));
            }
        }
        Ok(Mlp { layers })
    }

    /// He-initialized network through `widths` (input, hidden..., output):
    /// ReLU on hidden layers, identity on the output. Layer `i` draws from
    /// its own stream derived from `(seed, stream, i)`.
    pub fn seeded(widths: &[usize], seed: u64, stream: u64) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("network widths must be >= 1".into()));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                let mut r = rng::seeded(seed, rng::stream_id(&[stream, i as u64]));
                DenseLayer::he_uniform(widths[i], widths[i + 1], act, &mut r)
            })
            .collect();
        Mlp::new(layers)
    }

    /// Same architecture, every weight and bias zero.
    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.input_dim(), l.output_dim(), l.activation))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.shape() == b.weights.shape() && a.activation == b.activation
            })
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(l.biases.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.as_mut_slice().iter_mut().chain(l.biases.iter_mut()))
    }

    /// Parameters flattened in the same order as [`GradientBundle::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        self.params().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dims("flat parameters", self.num_params(), flat.len()));
        }
        for (p, v) in self.params_mut().zip(flat) {
            *p = *v;
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::dims("network input", self.input_dim(), x.cols()));
        }
        Ok(())
    }

    /// Forward pass without recording activations.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.pre_activation(&h);
            let act = layer.activation;
            h.map_inplace(|v| act.apply(v));
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let z = layer.pre_activation(&h);
            let mut a = z.clone();
            let act = layer.activation;
            a.map_inplace(|v| act.apply(v));
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        let dims = self
            .layers
            .iter()
            .map(|l| (l.input_dim(), l.output_dim()))
            .collect();
        Ok((h, ForwardCache { inputs, pre, dims }))
    }

    /// Back-propagates `upstream = dL/dy` (one row per sample). Returns the
    /// parameter gradients and `dL/dx` for chaining into an upstream network.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &Matrix,
    ) -> Result<(GradientBundle, Matrix)> {
        let matches = cache.dims.len() == self.layers.len()
            && cache
                .dims
                .iter()
                .zip(&self.layers)
                .all(|(&(i, o), l)| i == l.input_dim() && o == l.output_dim());
        if !matches || upstream.shape() != (cache.batch_size(), self.output_dim()) {
            return Err(Error::StaleCache);
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                for (d, z) in delta
                    .as_mut_slice()
                    .iter_mut()
                    .zip(cache.pre[idx].as_slice())
                {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let dw = matmul_tn(&delta, &cache.inputs[idx]);
            let mut db = vec![0.0; layer.output_dim()];
            for row in delta.row_iter() {
                for (b, d) in db.iter_mut().zip(row) {
                    *b += d;
                }
            }
            let dx = matmul_nn(&delta, &layer.weights);
            grads.push(LayerGrad {
                weights: dw,
                biases: db,
            });
            delta = dx;
        }
        grads.reverse();
        Ok((
            GradientBundle {
                layers: grads,
                samples: cache.batch_size(),
            },
            delta,
        ))
    }
}

/// Mean squared error over every component of the batch, with its gradient
/// with respect to `pred`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(Error::dims(
            "mse operands",
            target.as_slice().len(),
            pred.as_slice().len(),
        ));
    }
    let count = pred.as_slice().len();
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let inv = 1.0 / count as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for ((g, p), t) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(pred.as_slice())
        .zip(target.as_slice())
    {
        let diff = p - t;
        loss += diff * diff;
        *g = 2.0 * diff * inv;
    }
    Ok((loss * inv, grad))
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidConfig("learning rate must be positive".into()));
    }
    Ok(())
}

/// `params ← params − lr · grads`.
pub fn sgd_step(net: &mut Mlp, grads: &GradientBundle, lr: f64) -> Result<()> {
    check_lr(lr)?;
    if !grads.shape_matches(net) {
        return Err(Error::InvalidConfig("gradient shape does not match network".into()));
    }
    for (p, g) in net.params_mut().zip(grads.values()) {
        *p -= lr * g;
    }
    Ok(())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First/second moment estimates for one network.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamState {
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        AdamState {
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }

    pub fn for_net(net: &Mlp) -> Self {
        AdamState::new(net.num_params())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second
    }
}

/// Bias-corrected ADAM update.
pub fn adam_step(
    net: &mut Mlp,
    grads: &GradientBundle,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    check_lr(lr)?;
    if !grads.shape_matches(net) || state.first.len() != net.num_params() {
        return Err(Error::InvalidConfig("ADAM state does not match network".into()));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - libm::pow(b1, t);
    let c2 = 1.0 - libm::pow(b2, t);
    for (((p, g), m), v) in net
        .params_mut()
        .zip(grads.values())
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (libm::sqrt(v_hat) + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Optimizer bound to one network.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Optimizer {
    Sgd,
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, net: &Mlp) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(AdamState::for_net(net)),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd => OptimizerKind::Sgd,
            Optimizer::Adam(_) => OptimizerKind::Adam,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &GradientBundle, lr: f64) -> Result<()> {
        match self {
            Optimizer::Sgd => sgd_step(net, grads, lr),
            Optimizer::Adam(state) => adam_step(net, grads, state, lr),
        }
    }
}
