//! Dense layers, activations and the Adam optimizer.
//!
//! Layers are plain `W·x + b` followed by an element-wise activation. Every
//! backward pass is written out by hand; there is no autodiff tape.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::{ensure_finite, Tensor};
use crate::{Error, Result};

pub mod kernels {
    //! Inner loops shared by the layers. Reductions use eight independent
    //! accumulators combined in a fixed order, so they vectorize and still
    //! give the same bits on every run.

    #[inline]
    pub fn dot(a: &[f32], b: &[f32]) -> f32 {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = [0.0f32; 8];
        let ca = a.chunks_exact(8);
        let cb = b.chunks_exact(8);
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            for l in 0..8 {
                acc[l] += x[l] * y[l];
            }
        }
        let mut tail = 0.0f32;
        for (x, y) in ra.iter().zip(rb) {
            tail += x * y;
        }
        ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
    }

    /// `y += alpha * x`
    #[inline]
    pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
        debug_assert_eq!(x.len(), y.len());
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += alpha * xi;
        }
    }

    #[inline]
    pub fn norm(a: &[f32]) -> f32 {
        dot(a, a).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, pre: f32) -> f32 {
        match self {
            Activation::Identity => pre,
            Activation::Relu => pre.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-pre).exp()),
        }
    }

    /// d(out)/d(pre), given both the pre-activation and the activation output.
    #[inline]
    pub fn derivative(self, pre: f32, out: f32) -> f32 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => out * (1.0 - out),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Zeros,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// Uniform in `±sqrt(6 / fan_in)`.
    He,
}

/// Values cached by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct DenseTrace {
    pub input: Vec<f32>,
    pub pre: Vec<f32>,
    pub output: Vec<f32>,
}

/// Parameter gradients of one layer (same layout as the parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl DenseGrads {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &DenseGrads) {
        kernels::axpy(1.0, &other.weights, &mut self.weights);
        kernels::axpy(1.0, &other.bias, &mut self.bias);
    }

    pub fn scale(&mut self, factor: f32) {
        self.weights.iter_mut().for_each(|v| *v *= factor);
        self.bias.iter_mut().for_each(|v| *v *= factor);
    }
}

/// `activation(W·x + b)` with `W` stored row-major as `[out × in]`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    weights: Tensor,
    bias: Tensor,
    activation: Activation,
    cache: Option<DenseTrace>,
}

impl PartialEq for DenseLayer {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
            && self.bias == other.bias
            && self.activation == other.activation
    }
}

impl DenseLayer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config("layer dims must be positive".into()));
        }
        let mut w = vec![0.0f32; in_dim * out_dim];
        let limit = match init {
            Init::Zeros => 0.0,
            Init::Xavier => (6.0 / (in_dim + out_dim) as f64).sqrt(),
            Init::He => (6.0 / in_dim as f64).sqrt(),
        };
        if limit > 0.0 {
            for v in &mut w {
                *v = rng.uniform_range(-limit, limit) as f32;
            }
        }
        Ok(Self {
            weights: Tensor::new(vec![out_dim, in_dim], w)?,
            bias: Tensor::zeros(vec![out_dim]),
            activation,
            cache: None,
        })
    }

    pub fn from_parts(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.shape().len() != 2 || bias.shape() != [weights.shape()[0]] {
            return Err(Error::Dimension(format!(
                "weights {:?} and bias {:?} are inconsistent",
                weights.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
            cache: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        self.weights.data_mut()
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        self.bias.data_mut()
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.in_dim() {
            return Err(Error::Dimension(format!(
                "layer expects input of length {}, got {len}",
                self.in_dim()
            )));
        }
        Ok(())
    }

    /// Writes the pre-activation and activation output for `x`.
    #[inline]
    pub fn forward_into(&self, x: &[f32], pre: &mut [f32], out: &mut [f32]) {
        let in_dim = self.in_dim();
        let w = self.weights.data();
        let b = self.bias.data();
        for o in 0..self.out_dim() {
            let p = b[o] + kernels::dot(&w[o * in_dim..(o + 1) * in_dim], x);
            pre[o] = p;
            out[o] = self.activation.apply(p);
        }
    }

    /// Accumulates parameter gradients into `grads` and, when requested,
    /// overwrites `grad_x` with the input gradient.
    pub fn backward_accumulate(
        &self,
        x: &[f32],
        pre: &[f32],
        out: &[f32],
        grad_out: &[f32],
        grads: &mut DenseGrads,
        grad_x: Option<&mut [f32]>,
    ) {
        let in_dim = self.in_dim();
        let w = self.weights.data();
        let g_pre: Vec<f32> = (0..self.out_dim())
            .map(|o| grad_out[o] * self.activation.derivative(pre[o], out[o]))
            .collect();
        for (o, &g) in g_pre.iter().enumerate() {
            grads.bias[o] += g;
            if g != 0.0 {
                kernels::axpy(g, x, &mut grads.weights[o * in_dim..(o + 1) * in_dim]);
            }
        }
        if let Some(gx) = grad_x {
            gx.iter_mut().for_each(|v| *v = 0.0);
            for (o, &g) in g_pre.iter().enumerate() {
                if g != 0.0 {
                    kernels::axpy(g, &w[o * in_dim..(o + 1) * in_dim], gx);
                }
            }
        }
    }

    pub fn trace(&self, x: &[f32]) -> Result<DenseTrace> {
        self.check_input(x.len())?;
        let mut pre = vec![0.0; self.out_dim()];
        let mut output = vec![0.0; self.out_dim()];
        self.forward_into(x, &mut pre, &mut output);
        ensure_finite(&output, "dense forward")?;
        Ok(DenseTrace {
            input: x.to_vec(),
            pre,
            output,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.trace(x.data())?.output))
    }

    /// Forward pass that remembers its inputs for [`DenseLayer::backward`].
    pub fn forward_cached(&mut self, x: &Tensor) -> Result<Tensor> {
        let trace = self.trace(x.data())?;
        let out = Tensor::from_vec(trace.output.clone());
        self.cache = Some(trace);
        Ok(out)
    }

    /// Gradients of the most recent [`DenseLayer::forward_cached`] call.
    pub fn backward(&self, grad_out: &Tensor) -> Result<(Tensor, DenseGrads)> {
        let trace = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        self.backward_trace(trace, grad_out)
    }

    pub fn backward_trace(&self, trace: &DenseTrace, grad_out: &Tensor) -> Result<(Tensor, DenseGrads)> {
        if grad_out.len() != self.out_dim() || trace.input.len() != self.in_dim() {
            return Err(Error::Dimension(format!(
                "grad_out has {} entries, layer produces {}",
                grad_out.len(),
                self.out_dim()
            )));
        }
        let mut grads = DenseGrads::zeros_like(self);
        let mut gx = vec![0.0; self.in_dim()];
        self.backward_accumulate(
            &trace.input,
            &trace.pre,
            &trace.output,
            grad_out.data(),
            &mut grads,
            Some(&mut gx),
        );
        ensure_finite(&gx, "dense backward")?;
        Ok((Tensor::from_vec(gx), grads))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for a single parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `param` in place.
    pub fn update(&mut self, param: &mut [f32], grad: &[f32]) -> Result<()> {
        if param.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "adam state has {} entries, param {} and grad {}",
                self.m.len(),
                param.len(),
                grad.len()
            )));
        }
        ensure_finite(grad, "adam gradient")?;
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - (beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.step as i32);
        let (bc1, bc2) = (bc1 as f32, bc2 as f32);
        for i in 0..param.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
