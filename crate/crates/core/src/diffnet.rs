//! Minimal differentiable-computation core: multilayer perceptrons with
//! explicit forward tapes, reverse-mode gradients, Glorot-uniform
//! initialization, finite-difference checking, and the Adam update rule.
//!
//! Only MLP-shaped compositions are supported; modules that need gradients
//! through richer structures (coupling layers, reparameterized samples) chain
//! these pieces by hand.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::Prng;

/// Elementwise nonlinearity applied between or after layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    Tanh,
    Identity,
    Sigmoid,
}

impl Activation {
    /// Applies the nonlinearity to a preactivation value.
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp() - 1.0
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative with respect to the preactivation value.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log(1 + exp(x)).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// One affine layer; weights are row-major `[out_dim x in_dim]`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Layer { in_dim, out_dim, weight: vec![0.0; out_dim * in_dim], bias: vec![0.0; out_dim] }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim);
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, xi) in row.iter().zip(x) {
                acc = w.mul_add(*xi, acc);
            }
            out.push(acc);
        }
    }
}

/// Fully connected network. The hidden `activation` is applied after every
/// layer except the last, which gets `output_activation`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub output_activation: Activation,
}

/// Cached intermediates from one forward pass, sufficient for one backward
/// pass through the same network.
#[derive(Debug, Clone)]
pub struct GradTape {
    /// Input seen by each layer (`inputs[0]` is the network input).
    inputs: Vec<Vec<f64>>,
    /// Preactivation of each layer.
    pre: Vec<Vec<f64>>,
}

/// Gradients shaped exactly like the network parameters, plus the gradient
/// with respect to the network input.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Mlp {
    /// Zero-initialized network with the given layer widths.
    /// `dims = [in, h1, ..., out]` needs at least one layer.
    pub fn zeros(dims: &[usize], activation: Activation, output_activation: Activation) -> Self {
        assert!(dims.len() >= 2, "need at least an input and an output width");
        let layers = dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Mlp { layers, activation, output_activation }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn xavier(
        dims: &[usize],
        activation: Activation,
        output_activation: Activation,
        rng: &mut Prng,
    ) -> Self {
        let mut net = Mlp::zeros(dims, activation, output_activation);
        for layer in &mut net.layers {
            layer.weight = xavier_init(layer.in_dim, layer.out_dim, rng);
        }
        net
    }

    /// Clears the last layer so the network outputs zero everywhere while
    /// earlier layers keep their weights.
    pub fn zero_last_layer(&mut self) {
        let last = self.layers.last_mut().expect("nonempty");
        last.weight.fill(0.0);
        last.bias.fill(0.0);
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().expect("nonempty").in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim
    }

    /// Layer widths `[in, h1, ..., out]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(|l| l.out_dim));
        d
    }

    fn activation_for_layer(&self, l: usize) -> Activation {
        if l + 1 == self.layers.len() {
            self.output_activation
        } else {
            self.activation
        }
    }

    /// Evaluates the network and records a tape for [`Mlp::backward`].
    ///
    /// Fails with a numerical error naming the first layer whose output is
    /// not finite.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, GradTape)> {
        assert_eq!(x.len(), self.in_dim(), "input length must match the first layer");
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let mut z = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut z);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite output at layer {l}")));
            }
            let act = self.activation_for_layer(l);
            inputs.push(std::mem::take(&mut cur));
            cur = z.iter().map(|&v| act.apply(v)).collect();
            pre.push(std::mem::replace(&mut z, Vec::new()));
        }
        Ok((cur, GradTape { inputs, pre }))
    }

    /// Output without the tape, for evaluation-only call sites.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Gradients of `upstream . y` with respect to every parameter and the
    /// input, given the tape of the matching forward pass.
    pub fn backward(&self, tape: &GradTape, upstream: &[f64]) -> MlpGrads {
        assert_eq!(tape.inputs.len(), self.layers.len(), "tape does not match this network");
        assert_eq!(upstream.len(), self.out_dim(), "upstream length must match the output");
        let mut grads: Vec<LayerGrads> = self
            .layers
            .iter()
            .map(|l| LayerGrads { weight: vec![0.0; l.weight.len()], bias: vec![0.0; l.out_dim] })
            .collect();

        // delta holds d(objective)/d(pre-activation) of the current layer.
        let mut delta = vec![0.0; upstream.len()];
        let last = self.layers.len() - 1;
        for (i, u) in upstream.iter().enumerate() {
            delta[i] = u * self.output_activation.derivative(tape.pre[last][i]);
        }
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &tape.inputs[l];
            let g = &mut grads[l];
            for o in 0..layer.out_dim {
                let d = delta[o];
                g.bias[o] = d;
                let row = &mut g.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (slot, xi) in row.iter_mut().zip(input) {
                    *slot = d * xi;
                }
            }
            let mut d_input = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let d = delta[o];
                let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (slot, w) in d_input.iter_mut().zip(row) {
                    *slot += d * w;
                }
            }
            if l == 0 {
                return MlpGrads { layers: grads, input: d_input };
            }
            let act = self.activation_for_layer(l - 1);
            delta = d_input
                .iter()
                .zip(&tape.pre[l - 1])
                .map(|(di, z)| di * act.derivative(*z))
                .collect();
        }
        unreachable!("loop returns at layer 0");
    }

    /// Total number of scalar parameters.
    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Appends all parameters (per layer: weights row-major, then bias).
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
    }

    /// Reads parameters back in [`Mlp::write_params`] order; returns the rest
    /// of the slice.
    pub fn read_params<'a>(&mut self, mut flat: &'a [f64]) -> &'a [f64] {
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[..nw]);
            flat = &flat[nw..];
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[..nb]);
            flat = &flat[nb..];
        }
        flat
    }
}

impl MlpGrads {
    /// Shaped like `net`, all zeros.
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads { weight: vec![0.0; l.weight.len()], bias: vec![0.0; l.out_dim] })
                .collect(),
            input: vec![0.0; net.in_dim()],
        }
    }

    /// Adds `other`, coordinate by coordinate.
    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        for (x, y) in self.input.iter_mut().zip(&other.input) {
            *x += y;
        }
    }

    /// Multiplies every coordinate by `c`.
    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            for x in &mut l.weight {
                *x *= c;
            }
            for x in &mut l.bias {
                *x *= c;
            }
        }
        for x in &mut self.input {
            *x *= c;
        }
    }

    /// Appends parameter gradients in [`Mlp::write_params`] order.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
    }
}

/// Glorot-uniform draw: entries uniform on [-a, a] with
/// a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_init(fan_in: usize, fan_out: usize, rng: &mut Prng) -> Vec<f64> {
    assert!(fan_in >= 1 && fan_out >= 1);
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.gen_range(-a..=a)).collect()
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    /// Standard defaults with the given learning rate.
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Bias-corrected Adam state over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(n_params: usize, hyper: AdamHyper) -> Self {
        AdamState { step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params], hyper }
    }

    /// One descent step in place: `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    ///
    /// Callers maximizing an objective pass the negated gradient. Non-finite
    /// gradients reject the whole update and signal divergence.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "parameter count fixed at construction");
        assert_eq!(grads.len(), params.len(), "gradient and parameter shapes must agree");
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite gradient in Adam update".into()));
        }
        self.step += 1;
        let h = self.hyper;
        let c1 = 1.0 - h.beta1.powi(self.step as i32);
        let c2 = 1.0 - h.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g;
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= h.lr * m_hat / (v_hat.sqrt() + h.epsilon);
        }
        Ok(())
    }
}

/// Central finite differences of a scalar function of the parameters:
/// `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)`.
pub fn finite_difference_grad<F>(mut f: F, params: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(eps > 0.0);
    let mut scratch = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let p = params[i];
        scratch[i] = p + eps;
        let up = f(&scratch);
        scratch[i] = p - eps;
        let down = f(&scratch);
        scratch[i] = p;
        grad.push((up - down) / (2.0 * eps));
    }
    grad
}

/// Symmetric relative error with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-4)
}
