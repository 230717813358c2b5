//! Minimal dense-network engine with exact analytic gradients.
//!
//! A [`DenseNet`] is a chain of affine layers, each followed by an element-wise
//! activation. Weights are row-major with shape `(out, in)`. Everything is
//! computed in `f64` so finite-difference checks stay meaningful.
//!
//! [`DenseNet::backward`] returns the gradient of `<upstream, forward(x)>`
//! with respect to every parameter and to the input. It is linear in
//! `upstream`, which the agent and the off-policy code rely on when they mix
//! several scalar objectives through a shared trunk.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z`.
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
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_code(code: u8, offset: u64) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            other => Err(Error::format(offset, format!("unknown activation {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// Row-major, shape (out_dim, in_dim).
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let weights = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Self {
            in_dim,
            out_dim,
            activation,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

/// Intermediate values of one forward pass, reused by the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// inputs[k] is the input to layer k; the last entry is the network output.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("trace always holds the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients congruent with the network they came from, plus the
/// gradient with respect to the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub input: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            input: vec![0.0; net.input_dim()],
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(&mut a.weights, &b.weights, scale);
            axpy(&mut a.bias, &b.bias, scale);
        }
        axpy(&mut self.input, &other.input, scale);
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w *= s);
            l.bias.iter_mut().for_each(|b| *b *= s);
        }
        self.input.iter_mut().for_each(|x| *x *= s);
    }

    /// Parameter gradients in the same order as [`DenseNet::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn is_congruent(&self, net: &DenseNet) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len())
            && self.input.len() == net.input_dim()
    }
}

pub(crate) fn axpy(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

impl DenseNet {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for l in &layers {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::invalid("layer dims must be positive"));
            }
            if l.weights.len() != l.in_dim * l.out_dim {
                return Err(Error::dim("layer weights", l.in_dim * l.out_dim, l.weights.len()));
            }
            if l.bias.len() != l.out_dim {
                return Err(Error::dim("layer bias", l.out_dim, l.bias.len()));
            }
        }
        for pair in layers.windows(2) {
            if pair[1].in_dim != pair[0].out_dim {
                return Err(Error::dim("layer chaining", pair[0].out_dim, pair[1].in_dim));
            }
        }
        Ok(Self { layers })
    }

    /// `dims` lists every width including input and output, so
    /// `dims.len() == activations.len() + 1`.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        Self::check_shape(dims, activations)?;
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &a)| Layer::glorot(d[0], d[1], a, rng))
            .collect();
        Self::from_layers(layers)
    }

    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        Self::check_shape(dims, activations)?;
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &a)| Layer::zeros(d[0], d[1], a))
            .collect();
        Self::from_layers(layers)
    }

    fn check_shape(dims: &[usize], activations: &[Activation]) -> Result<()> {
        if dims.len() < 2 || dims.len() != activations.len() + 1 {
            return Err(Error::invalid(format!(
                "{} dims do not match {} activations",
                dims.len(),
                activations.len()
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        for layer in &self.layers {
            let act = layer.activation;
            h = layer.affine(&h).into_iter().map(|z| act.apply(z)).collect();
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_vec());
        for layer in &self.layers {
            let z = layer.affine(inputs.last().unwrap());
            let act = layer.activation;
            inputs.push(z.iter().map(|&v| act.apply(v)).collect());
            pre.push(z);
        }
        Ok(Trace { inputs, pre })
    }

    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Gradients> {
        let trace = self.forward_trace(x)?;
        self.backward_trace(&trace, upstream)
    }

    pub fn backward_trace(&self, trace: &Trace, upstream: &[f64]) -> Result<Gradients> {
        if upstream.len() != self.output_dim() {
            return Err(Error::dim("upstream gradient", self.output_dim(), upstream.len()));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut delta_out = upstream.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[k];
            let dz: Vec<f64> = delta_out
                .iter()
                .zip(&trace.pre[k])
                .map(|(d, &z)| d * layer.activation.derivative(z))
                .collect();
            let mut dw = vec![0.0; layer.weights.len()];
            for (row, &g) in dw.chunks_exact_mut(layer.in_dim).zip(&dz) {
                if g != 0.0 {
                    for (w, xi) in row.iter_mut().zip(x) {
                        *w = g * xi;
                    }
                }
            }
            let mut dx = vec![0.0; layer.in_dim];
            for (row, &g) in layer.weights.chunks_exact(layer.in_dim).zip(&dz) {
                if g != 0.0 {
                    axpy(&mut dx, row, g);
                }
            }
            layers.push(LayerGrad {
                weights: dw,
                bias: dz,
            });
            delta_out = dx;
        }
        layers.reverse();
        Ok(Gradients {
            layers,
            input: delta_out,
        })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), x.len()));
        }
        Ok(())
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim("flat parameters", self.num_params(), flat.len()));
        }
        let mut rest = flat;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.weights.len());
            l.weights.copy_from_slice(w);
            let (b, r) = r.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = r;
        }
        Ok(())
    }

    /// `params += scale * grads`
    pub fn add_scaled(&mut self, grads: &Gradients, scale: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            axpy(&mut l.weights, &g.weights, scale);
            axpy(&mut l.bias, &g.bias, scale);
        }
    }

    pub fn same_shape(&self, other: &DenseNet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.in_dim == b.in_dim && a.out_dim == b.out_dim)
    }

    pub fn encode(&self, w: &mut Writer) {
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.u32(l.in_dim as u32);
            w.u32(l.out_dim as u32);
            w.u8(l.activation.code());
            w.f64s(&l.weights);
            w.f64s(&l.bias);
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let at = r.offset();
        let n = r.u32()? as usize;
        if n == 0 || n > 1024 {
            return Err(Error::format(at, format!("implausible layer count {n}")));
        }
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset();
            let in_dim = r.u32()? as usize;
            let out_dim = r.u32()? as usize;
            let act_at = r.offset();
            let activation = Activation::from_code(r.u8()?, act_at)?;
            let weights = r.f64s()?;
            let bias = r.f64s()?;
            if weights.len() != in_dim * out_dim || bias.len() != out_dim {
                return Err(Error::format(at, "layer shape does not match its parameters"));
            }
            layers.push(Layer {
                in_dim,
                out_dim,
                activation,
                weights,
                bias,
            });
        }
        Self::from_layers(layers).map_err(|e| Error::format(at, e.to_string()))
    }
}

/// Softmax with max-subtraction.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[label]`
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok((log_sum_exp(logits) - logits[label]).max(0.0))
}

/// Gradient of [`cross_entropy`] with respect to the logits: `softmax - onehot`.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let mut g = softmax(logits)?;
    g[label] -= 1.0;
    Ok(g)
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One ascent step: `params += lr * adam(grad)`. Pass a negated gradient to descend.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        if lr == 0.0 {
            return;
        }
        let d = self.direction(grad);
        axpy(params, &d, lr);
    }

    /// Updates the moments with `grad` and returns the unit-rate step
    /// `m̂ / (√v̂ + eps)` without applying it.
    pub fn direction(&mut self, grad: &[f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut out = Vec::with_capacity(grad.len());
        for (i, &g) in grad.iter().enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            out.push(mh / (vh.sqrt() + self.eps));
        }
        out
    }

    /// Applies an ascent step directly to a network.
    pub fn ascend_net(&mut self, net: &mut DenseNet, grads: &Gradients, lr: f64) {
        let mut p = net.flat_params();
        self.ascend(&mut p, &grads.flat(), lr);
        net.set_flat_params(&p).expect("optimizer sized for this network");
    }

    pub fn encode(&self, w: &mut Writer) {
        w.f64(self.beta1);
        w.f64(self.beta2);
        w.f64(self.eps);
        w.u64(self.step);
        w.f64s(&self.m);
        w.f64s(&self.v);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let step = r.u64()?;
        let at = r.offset();
        let m = r.f64s()?;
        let v = r.f64s()?;
        if m.len() != v.len() {
            return Err(Error::format(at, "optimizer moment lengths differ"));
        }
        Ok(Self {
            beta1,
            beta2,
            eps,
            step,
            m,
            v,
        })
    }
}
