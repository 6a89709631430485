//! Multilayer perceptron encoder with a final projection onto the unit
//! sphere, its reverse-mode gradient and an Adam step with decoupled weight
//! decay.
//!
//! Parameters live in one flat buffer. Layer `l` stores its weight matrix
//! (`out x in`, row-major) followed by its bias. The nonlinearity is applied
//! after every layer except the last.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::matrix::{dot, Matrix};
use crate::sampler::EmbeddingBatch;

/// Rows with a smaller pre-projection norm cannot be mapped to the sphere.
pub const MIN_PROJECTION_NORM: f64 = 1e-12;
pub const SMOOTH_RELU_SHARPNESS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(&'static str),
    #[error("shape mismatch: {0}")]
    DimensionMismatch(&'static str),
    #[error("row {row} has pre-projection norm {norm:e}; no direction to project")]
    ZeroVectorProjection { row: usize, norm: f64 },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Tanh,
    /// `softplus(k x) / k` with `k = SMOOTH_RELU_SHARPNESS`.
    SmoothRelu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => libm::tanh(x),
            Activation::SmoothRelu => {
                let z = SMOOTH_RELU_SHARPNESS * x;
                (z.max(0.0) + libm::log1p(libm::exp(-z.abs()))) / SMOOTH_RELU_SHARPNESS
            }
        }
    }

    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::SmoothRelu => {
                let z = SMOOTH_RELU_SHARPNESS * x;
                if z >= 0.0 {
                    1.0 / (1.0 + libm::exp(-z))
                } else {
                    let e = libm::exp(z);
                    e / (1.0 + e)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    dims: Vec<usize>,
    activation: Activation,
    data: Vec<f64>,
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl EncoderParams {
    fn check_dims(dims: &[usize]) -> Result<(), EncoderError> {
        if dims.len() < 2 {
            return Err(EncoderError::InvalidArchitecture(
                "need an input and an output dimension",
            ));
        }
        if dims.contains(&0) {
            return Err(EncoderError::InvalidArchitecture("dimensions must be positive"));
        }
        Ok(())
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self, EncoderError> {
        Self::check_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            activation,
            data: vec![0.0; param_count(dims)],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self, EncoderError> {
        let mut p = Self::zeros(dims, activation)?;
        for l in 0..p.num_layers() {
            let bound = libm::sqrt(6.0 / (p.dims[l] + p.dims[l + 1]) as f64);
            for w in p.weights_mut(l) {
                *w = (2.0 * rng.random::<f64>() - 1.0) * bound;
            }
        }
        Ok(p)
    }

    pub fn from_flat(dims: &[usize], activation: Activation, data: Vec<f64>) -> Result<Self, EncoderError> {
        Self::check_dims(dims)?;
        if data.len() != param_count(dims) {
            return Err(EncoderError::DimensionMismatch(
                "flat parameter length does not match the architecture",
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(EncoderError::NonFinite("parameters"));
        }
        Ok(Self {
            dims: dims.to_vec(),
            activation,
            data,
        })
    }

    /// Single linear layer with identity weights, zero bias.
    pub fn identity(dim: usize) -> Result<Self, EncoderError> {
        let mut p = Self::zeros(&[dim, dim], Activation::Identity)?;
        for (k, w) in p.weights_mut(0).iter_mut().enumerate() {
            *w = if k / dim == k % dim { 1.0 } else { 0.0 };
        }
        Ok(p)
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    #[inline]
    pub fn activation(&self) -> Activation {
        self.activation
    }

    #[inline]
    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn offset(&self, layer: usize) -> usize {
        param_count(&self.dims[..=layer])
    }

    fn weight_range(&self, layer: usize) -> core::ops::Range<usize> {
        let start = self.offset(layer);
        start..start + self.dims[layer + 1] * self.dims[layer]
    }

    fn bias_range(&self, layer: usize) -> core::ops::Range<usize> {
        let start = self.weight_range(layer).end;
        start..start + self.dims[layer + 1]
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.data[self.weight_range(layer)]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.weight_range(layer);
        &mut self.data[r]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.data[self.bias_range(layer)]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.bias_range(layer);
        &mut self.data[r]
    }
}

/// Cached intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    inputs: Matrix,
    /// Pre-activations per layer; the last entry is the raw output `g(x)`.
    pre: Vec<Matrix>,
    /// Post-activations of the hidden layers.
    hidden: Vec<Matrix>,
    norms: Vec<f64>,
    embeddings: Matrix,
}

impl ForwardTape {
    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    /// Row norms of `g(x)` before projection.
    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn raw_outputs(&self) -> &Matrix {
        self.pre.last().expect("at least one layer")
    }
}

fn affine(input: &Matrix, weights: &[f64], bias: &[f64], out_dim: usize) -> Matrix {
    let in_dim = input.cols();
    let mut out = Matrix::zeros(input.rows(), out_dim);
    for (i, x) in input.row_iter().enumerate() {
        let row = out.row_mut(i);
        for (k, o) in row.iter_mut().enumerate() {
            *o = bias[k] + dot(&weights[k * in_dim..(k + 1) * in_dim], x);
        }
    }
    out
}

/// Embeds each input row as `g(x) / ‖g(x)‖`.
pub fn forward(params: &EncoderParams, inputs: &Matrix) -> Result<(EmbeddingBatch, ForwardTape), EncoderError> {
    if inputs.cols() != params.input_dim() {
        return Err(EncoderError::DimensionMismatch(
            "input width differs from the encoder input dimension",
        ));
    }
    if inputs.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(EncoderError::NonFinite("inputs"));
    }
    let layers = params.num_layers();
    let mut pre = Vec::with_capacity(layers);
    let mut hidden = Vec::with_capacity(layers - 1);
    for l in 0..layers {
        let input = if l == 0 { inputs } else { &hidden[l - 1] };
        let z = affine(input, params.weights(l), params.bias(l), params.dims[l + 1]);
        if l + 1 < layers {
            let mut a = z.clone();
            a.as_mut_slice()
                .iter_mut()
                .for_each(|x| *x = params.activation.apply(*x));
            hidden.push(a);
        }
        pre.push(z);
    }
    let raw = pre.last().expect("at least one layer");
    let mut embeddings = raw.clone();
    let mut norms = Vec::with_capacity(raw.rows());
    for i in 0..embeddings.rows() {
        let r = embeddings.row_mut(i);
        let norm = libm::sqrt(dot(r, r));
        if !norm.is_finite() {
            return Err(EncoderError::NonFinite("encoder outputs"));
        }
        if norm < MIN_PROJECTION_NORM {
            return Err(EncoderError::ZeroVectorProjection { row: i, norm });
        }
        r.iter_mut().for_each(|x| *x /= norm);
        norms.push(norm);
    }
    let batch = EmbeddingBatch::new(embeddings.clone()).map_err(|_| EncoderError::NonFinite("projection"))?;
    Ok((
        batch,
        ForwardTape {
            inputs: inputs.clone(),
            pre,
            hidden,
            norms,
            embeddings,
        },
    ))
}

/// Gradient of a scalar with respect to every parameter, given its gradient
/// with respect to the projected embeddings. Same layout as the parameters.
pub fn backward(tape: &ForwardTape, params: &EncoderParams, d_embeddings: &Matrix) -> Result<Vec<f64>, EncoderError> {
    if d_embeddings.shape() != tape.embeddings.shape() {
        return Err(EncoderError::DimensionMismatch(
            "upstream gradient shape differs from the embeddings",
        ));
    }
    let n = tape.embeddings.rows();
    let mut grads = vec![0.0; params.len()];

    // through the projection: (I - u u^T) / ‖g‖
    let mut delta = Matrix::zeros(n, params.output_dim());
    for i in 0..n {
        let u = tape.embeddings.row(i);
        let du = d_embeddings.row(i);
        let radial = dot(u, du);
        let inv = 1.0 / tape.norms[i];
        for ((d, x), y) in delta.row_mut(i).iter_mut().zip(du).zip(u) {
            *d = (x - y * radial) * inv;
        }
    }

    for l in (0..params.num_layers()).rev() {
        let in_dim = params.dims[l];
        let out_dim = params.dims[l + 1];
        let input = if l == 0 { &tape.inputs } else { &tape.hidden[l - 1] };
        let w_range = params.weight_range(l);
        let b_range = params.bias_range(l);
        for i in 0..n {
            let d = delta.row(i);
            let x = input.row(i);
            for k in 0..out_dim {
                if d[k] == 0.0 {
                    continue;
                }
                let gw = &mut grads[w_range.start + k * in_dim..w_range.start + (k + 1) * in_dim];
                for (g, xv) in gw.iter_mut().zip(x) {
                    *g += d[k] * xv;
                }
                grads[b_range.start + k] += d[k];
            }
        }
        if l == 0 {
            break;
        }
        let w = params.weights(l);
        let z_prev = &tape.pre[l - 1];
        let a_prev = &tape.hidden[l - 1];
        let mut next = Matrix::zeros(n, in_dim);
        for i in 0..n {
            let d = delta.row(i);
            let row = next.row_mut(i);
            for k in 0..out_dim {
                if d[k] == 0.0 {
                    continue;
                }
                for (r, wv) in row.iter_mut().zip(&w[k * in_dim..(k + 1) * in_dim]) {
                    *r += d[k] * wv;
                }
            }
            for (c, r) in row.iter_mut().enumerate() {
                *r *= params.activation.derivative(z_prev[(i, c)], a_prev[(i, c)]);
            }
        }
        delta = next;
    }
    Ok(grads)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: parameters shrink by `lr * weight_decay` each step.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
        }
    }
}

pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), EncoderError> {
    if params.len() != grads.len()
        || params.len() != state.first_moment.len()
        || params.len() != state.second_moment.len()
    {
        return Err(EncoderError::DimensionMismatch(
            "parameters, gradients and moments must have equal length",
        ));
    }
    state.step += 1;
    let step = state.step as f64;
    let c1 = 1.0 - libm::pow(cfg.beta1, step);
    let c2 = 1.0 - libm::pow(cfg.beta2, step);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *p -= cfg.lr * cfg.weight_decay * *p;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
    }
    Ok(())
}
