//! Small dense feed-forward networks: single-sample and batched evaluation,
//! reverse-mode gradients, Adam, and the exported policy format used to
//! rebuild an actor from its raw weight matrices.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const POLICY_FORMAT_VERSION: u32 = 1;
const BINARY_MAGIC: &[u8; 8] = b"QTPOLICY";

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unsupported activation: {0}")]
    UnsupportedActivation(String),
    #[error("malformed policy file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn mismatch<T>(msg: impl Into<String>) -> Result<T, NeuralError> {
    Err(NeuralError::DimensionMismatch(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Tanh,
    Linear,
    /// `min(upper, max(lower, z))`.
    ClippedRelu {
        lower: f64,
        upper: f64,
    },
}

impl Activation {
    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
            Activation::ClippedRelu { lower, upper } => upper.min(lower.max(z)),
        }
    }

    /// Derivative with respect to the pre-activation, given both `z` and `y = f(z)`.
    #[inline]
    fn derivative(&self, z: f64, y: f64) -> f64 {
        match *self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
            Activation::ClippedRelu { lower, upper } => {
                if z > lower && z < upper {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
            Activation::ClippedRelu { .. } => "clipped_relu",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], biases: vec![0.0; outputs], activation }
    }

    /// Uniform in `±1/√fan_in` for weights and biases.
    pub fn random<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs, activation);
        for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
            *w = rng.random_range(-bound..=bound);
        }
        layer
    }

    /// `activation(W x + b)` with the dot products accumulated left to right.
    pub fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.inputs).zip(&self.biases) {
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(self.activation.apply(acc + b));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<DenseLayer>,
}

/// Per-layer gradients shaped like the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient { weights: vec![0.0; l.weights.len()], biases: vec![0.0; l.biases.len()] })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases))
    }
}

/// Activations recorded by a batched forward pass, consumed by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// Network output, `batch × outputs` row-major.
    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&self.input)
    }

    /// Output-layer pre-activations, `batch × outputs` row-major.
    pub fn output_pre(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&self.input)
    }
}

/// `C = A·B + beta·C` through strided views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(m == 0 || n == 0 || c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted extents cover every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

impl DenseNet {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self, NeuralError> {
        if layers.is_empty() {
            return mismatch("network needs at least one layer");
        }
        for (k, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return mismatch(format!("layer {k} parameter count does not match {}x{}", l.outputs, l.inputs));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return mismatch(format!(
                    "layer {k} emits {} values but layer {} expects {}",
                    pair[0].outputs,
                    k + 1,
                    pair[1].inputs
                ));
            }
        }
        Ok(Self { layers })
    }

    /// Fully connected stack with `sizes[0]` inputs and one activation per layer.
    pub fn random<R: Rng + ?Sized>(
        sizes: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self, NeuralError> {
        if sizes.len() != activations.len() + 1 {
            return mismatch("need one activation per layer");
        }
        let layers =
            sizes.windows(2).zip(activations).map(|(d, &act)| DenseLayer::random(d[0], d[1], act, rng)).collect();
        Self::new(layers)
    }

    /// `obs → hidden tanh layers → clipped ReLU [lower, upper]`.
    pub fn actor<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        act_dim: usize,
        (lower, upper): (f64, f64),
        rng: &mut R,
    ) -> Result<Self, NeuralError> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(act_dim);
        let mut acts = vec![Activation::Tanh; hidden.len()];
        acts.push(Activation::ClippedRelu { lower, upper });
        Self::random(&sizes, &acts, rng)
    }

    /// `(obs, action) → hidden tanh layers → scalar Q`.
    pub fn critic<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self, NeuralError> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut acts = vec![Activation::Tanh; hidden.len()];
        acts.push(Activation::Linear);
        Self::random(&sizes, &acts, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn same_shape(&self, other: &DenseNet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs && a.activation == b.activation)
    }

    /// Single-sample evaluation.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        if x.len() != self.input_dim() {
            return mismatch(format!("input has {} values, network expects {}", x.len(), self.input_dim()));
        }
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.forward_into(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Batched evaluation of `batch` row-major samples, keeping what the
    /// backward pass needs.
    pub fn forward_cached(&self, x: &[f64], batch: usize) -> Result<ForwardCache, NeuralError> {
        if x.len() != batch * self.input_dim() {
            return mismatch(format!("batch input has {} values, expected {}x{}", x.len(), batch, self.input_dim()));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = post.last().map(Vec::as_slice).unwrap_or(x);
            let (fan_in, fan_out) = (layer.inputs, layer.outputs);
            let mut z = Vec::with_capacity(batch * fan_out);
            for _ in 0..batch {
                z.extend_from_slice(&layer.biases);
            }
            gemm(batch, fan_in, fan_out, input, (fan_in, 1), &layer.weights, (1, fan_in), 1.0, &mut z, (fan_out, 1));
            let y = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(z);
            post.push(y);
        }
        Ok(ForwardCache { batch, input: x.to_vec(), pre, post })
    }

    /// Reverse-mode pass. `upstream` is `∂L/∂output`, `batch × outputs`.
    /// Returns parameter gradients summed over the batch and `∂L/∂input`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<(Gradients, Vec<f64>), NeuralError> {
        let mut grads = Gradients::zeros_like(self);
        let dx = self.backprop(cache, upstream, None, Some(&mut grads))?;
        Ok((grads, dx))
    }

    /// As [`Self::backward`], with `output_pre` added to `∂L/∂z` of the
    /// output layer after the activation derivative is applied. Lets a loss
    /// term act on pre-activations that the output activation clips away.
    pub fn backward_with_output_pre(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        output_pre: &[f64],
    ) -> Result<(Gradients, Vec<f64>), NeuralError> {
        if output_pre.len() != upstream.len() {
            return mismatch("pre-activation gradient and upstream gradient differ in size");
        }
        let mut grads = Gradients::zeros_like(self);
        let dx = self.backprop(cache, upstream, Some(output_pre), Some(&mut grads))?;
        Ok((grads, dx))
    }

    /// `∂L/∂input` only; skips the parameter gradients.
    pub fn input_gradient(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.backprop(cache, upstream, None, None)
    }

    fn backprop(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        output_pre: Option<&[f64]>,
        mut grads: Option<&mut Gradients>,
    ) -> Result<Vec<f64>, NeuralError> {
        let batch = cache.batch;
        if upstream.len() != batch * self.output_dim() {
            return mismatch(format!(
                "upstream gradient has {} values, expected {}x{}",
                upstream.len(),
                batch,
                self.output_dim()
            ));
        }
        if cache.pre.len() != self.layers.len() {
            return mismatch("forward cache belongs to a different network");
        }
        let mut delta = upstream.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let (fan_in, fan_out) = (layer.inputs, layer.outputs);
            for ((d, &z), &y) in delta.iter_mut().zip(&cache.pre[k]).zip(&cache.post[k]) {
                *d *= layer.activation.derivative(z, y);
            }
            if k + 1 == self.layers.len() {
                if let Some(extra) = output_pre {
                    delta.iter_mut().zip(extra).for_each(|(d, e)| *d += e);
                }
            }
            if let Some(grads) = grads.as_deref_mut() {
                let input = if k == 0 { &cache.input } else { &cache.post[k - 1] };
                let g = &mut grads.layers[k];
                gemm(
                    fan_out,
                    batch,
                    fan_in,
                    &delta,
                    (1, fan_out),
                    input,
                    (fan_in, 1),
                    0.0,
                    &mut g.weights,
                    (fan_in, 1),
                );
                g.biases.iter_mut().for_each(|b| *b = 0.0);
                for row in delta.chunks_exact(fan_out) {
                    for (gb, d) in g.biases.iter_mut().zip(row) {
                        *gb += d;
                    }
                }
            }
            let mut dx = vec![0.0; batch * fan_in];
            gemm(batch, fan_out, fan_in, &delta, (fan_out, 1), &layer.weights, (fan_in, 1), 0.0, &mut dx, (fan_in, 1));
            delta = dx;
        }
        Ok(delta)
    }

    /// `θ ← τ·θ_source + (1 − τ)·θ`.
    pub fn soft_update_from(&mut self, source: &DenseNet, tau: f64) -> Result<(), NeuralError> {
        if !self.same_shape(source) {
            return mismatch("soft update between different architectures");
        }
        for (t, s) in self.params_mut().zip(source.params()) {
            *t = tau * s + (1.0 - tau) * *t;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Coefficient of the `λ·w` term added to every gradient.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, l2: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, net: &DenseNet) -> Self {
        let n = net.num_params();
        Self { config, first: vec![0.0; n], second: vec![0.0; n], step: 0 }
    }

    /// One bias-corrected Adam update of `net` along `grads`.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<(), NeuralError> {
        if net.num_params() != self.first.len() || grads.iter().count() != self.first.len() {
            return mismatch("optimizer state, network and gradients differ in size");
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon, l2 } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let moments = self.first.iter_mut().zip(self.second.iter_mut());
        for ((w, &g), (m, v)) in net.params_mut().zip(grads.iter()).zip(moments) {
            let g = g + l2 * *w;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionBounds {
    /// Largest allowed action value.
    pub upper: f64,
    /// Smallest allowed action value.
    pub lower: f64,
}

impl Default for ActionBounds {
    fn default() -> Self {
        Self { upper: 1.0, lower: -1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyLayer {
    pub rows: usize,
    pub cols: usize,
    /// `rows × cols`, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: String,
}

/// Exported actor: raw matrices plus the metadata needed to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub version: u32,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub bounds: ActionBounds,
    pub layers: Vec<PolicyLayer>,
}

/// Serializes an actor (tanh hidden layers, clipped-ReLU output with the
/// given bounds) into a [`PolicyFile`].
pub fn export_policy(net: &DenseNet, bounds: ActionBounds) -> Result<PolicyFile, NeuralError> {
    let last = net.layers.len() - 1;
    for (k, layer) in net.layers.iter().enumerate() {
        match (k == last, layer.activation) {
            (false, Activation::Tanh) => {}
            (true, Activation::ClippedRelu { lower, upper }) => {
                if lower != bounds.lower || upper != bounds.upper {
                    return Err(NeuralError::UnsupportedActivation(format!(
                        "output clip [{lower}, {upper}] differs from declared bounds [{}, {}]",
                        bounds.lower, bounds.upper
                    )));
                }
            }
            (_, act) => {
                return Err(NeuralError::UnsupportedActivation(format!(
                    "layer {k} uses {}; actors need tanh hidden layers and a clipped_relu output",
                    act.tag()
                )))
            }
        }
    }
    let file = PolicyFile {
        version: POLICY_FORMAT_VERSION,
        obs_dim: net.input_dim(),
        act_dim: net.output_dim(),
        bounds,
        layers: net
            .layers
            .iter()
            .map(|l| PolicyLayer {
                rows: l.outputs,
                cols: l.inputs,
                weights: l.weights.clone(),
                biases: l.biases.clone(),
                activation: l.activation.tag().to_string(),
            })
            .collect(),
    };
    file.validate()?;
    Ok(file)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

impl PolicyFile {
    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.version != POLICY_FORMAT_VERSION {
            return Err(NeuralError::Format(format!("unsupported version {}", self.version)));
        }
        if self.layers.is_empty() {
            return mismatch("policy has no layers");
        }
        if !(self.bounds.lower < self.bounds.upper) {
            return Err(NeuralError::Format("bounds must satisfy lower < upper".into()));
        }
        if self.layers[0].cols != self.obs_dim {
            return mismatch(format!("obs_dim {} but first layer takes {}", self.obs_dim, self.layers[0].cols));
        }
        let last = self.layers.len() - 1;
        if self.layers[last].rows != self.act_dim {
            return mismatch(format!("act_dim {} but last layer emits {}", self.act_dim, self.layers[last].rows));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.rows * l.cols {
                return mismatch(format!("layer {k}: {} weights for a {}x{} matrix", l.weights.len(), l.rows, l.cols));
            }
            if l.biases.len() != l.rows {
                return mismatch(format!("layer {k}: {} biases for {} rows", l.biases.len(), l.rows));
            }
            if k < last && self.layers[k + 1].cols != l.rows {
                return mismatch(format!(
                    "layer {k} emits {} values, layer {} takes {}",
                    l.rows,
                    k + 1,
                    self.layers[k + 1].cols
                ));
            }
            let expected = if k == last { "clipped_relu" } else { "tanh" };
            if l.activation != expected {
                return Err(NeuralError::UnsupportedActivation(format!(
                    "layer {k} declares {:?}, expected {expected}",
                    l.activation
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds the actor as a [`DenseNet`].
    pub fn to_network(&self) -> Result<DenseNet, NeuralError> {
        self.validate()?;
        let last = self.layers.len() - 1;
        DenseNet::new(
            self.layers
                .iter()
                .enumerate()
                .map(|(k, l)| DenseLayer {
                    inputs: l.cols,
                    outputs: l.rows,
                    weights: l.weights.clone(),
                    biases: l.biases.clone(),
                    activation: if k == last {
                        Activation::ClippedRelu { lower: self.bounds.lower, upper: self.bounds.upper }
                    } else {
                        Activation::Tanh
                    },
                })
                .collect(),
        )
    }

    /// Evaluates the stored matrices directly: `tanh(W x + b)` for hidden
    /// layers and `min(N, max(Q, W h + b))` at the output.
    pub fn reconstruct_action(&self, observation: &[f64]) -> Result<Vec<f64>, NeuralError> {
        if observation.len() != self.obs_dim {
            return mismatch(format!("observation has {} values, policy expects {}", observation.len(), self.obs_dim));
        }
        let last = self.layers.len() - 1;
        let mut hidden = observation.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.rows);
            for i in 0..layer.rows {
                let mut acc = 0.0;
                for j in 0..layer.cols {
                    acc += layer.weights[i * layer.cols + j] * hidden[j];
                }
                let z = acc + layer.biases[i];
                out.push(if k == last { self.bounds.upper.min(self.bounds.lower.max(z)) } else { z.tanh() });
            }
            hidden = out;
        }
        Ok(hidden)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NeuralError> {
        let file: PolicyFile = serde_json::from_str(text).map_err(|e| NeuralError::Format(e.to_string()))?;
        file.validate()?;
        Ok(file)
    }

    /// Little-endian binary form: magic, header, then per layer
    /// `rows, cols, activation tag, weights, biases`.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.obs_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.act_dim as u32).to_le_bytes());
        out.extend_from_slice(&self.bounds.upper.to_le_bytes());
        out.extend_from_slice(&self.bounds.lower.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.rows as u32).to_le_bytes());
            out.extend_from_slice(&(l.cols as u32).to_le_bytes());
            let tag: u8 = match l.activation.as_str() {
                "tanh" => 0,
                "linear" => 1,
                "clipped_relu" => 2,
                _ => 255,
            };
            out.push(tag);
            for v in l.weights.iter().chain(&l.biases) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self, NeuralError> {
        let eof = |e: io::Error| NeuralError::Format(format!("truncated binary policy: {e}"));
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != BINARY_MAGIC {
            return Err(NeuralError::Format("missing binary policy magic".into()));
        }
        let version = read_u32(&mut r).map_err(eof)?;
        let obs_dim = read_u32(&mut r).map_err(eof)? as usize;
        let act_dim = read_u32(&mut r).map_err(eof)? as usize;
        let upper = read_f64(&mut r).map_err(eof)?;
        let lower = read_f64(&mut r).map_err(eof)?;
        let n_layers = read_u32(&mut r).map_err(eof)? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(64));
        for _ in 0..n_layers {
            let rows = read_u32(&mut r).map_err(eof)? as usize;
            let cols = read_u32(&mut r).map_err(eof)? as usize;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag).map_err(eof)?;
            let activation = match tag[0] {
                0 => "tanh",
                1 => "linear",
                2 => "clipped_relu",
                t => return Err(NeuralError::UnsupportedActivation(format!("binary tag {t}"))),
            }
            .to_string();
            let count = rows
                .checked_mul(cols)
                .filter(|&n| n.saturating_add(rows).saturating_mul(8) <= r.len())
                .ok_or_else(|| NeuralError::Format("layer larger than file".into()))?;
            let weights = (0..count).map(|_| read_f64(&mut r)).collect::<io::Result<_>>().map_err(eof)?;
            let biases = (0..rows).map(|_| read_f64(&mut r)).collect::<io::Result<_>>().map_err(eof)?;
            layers.push(PolicyLayer { rows, cols, weights, biases, activation });
        }
        if !r.is_empty() {
            return Err(NeuralError::Format(format!("{} trailing bytes", r.len())));
        }
        let file = PolicyFile { version, obs_dim, act_dim, bounds: ActionBounds { upper, lower }, layers };
        file.validate()?;
        Ok(file)
    }

    /// Writes JSON, or the binary form when the extension is `.bin`.
    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        let bytes =
            if path.extension().is_some_and(|e| e == "bin") { self.to_binary() } else { self.to_json().into_bytes() };
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    /// Reads either form, recognizing the binary one by its magic bytes.
    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(BINARY_MAGIC) {
            Self::from_binary(&bytes)
        } else {
            let text = String::from_utf8(bytes)
                .map_err(|_| NeuralError::Format("policy file is neither binary nor UTF-8".into()))?;
            Self::from_json(&text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer() {
        let mut l = DenseLayer::zeros(3, 3, Activation::Linear);
        for i in 0..3 {
            l.weights[i * 3 + i] = 1.0;
        }
        let net = DenseNet::new(vec![l]).unwrap();
        assert_eq!(net.forward(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
        assert!(matches!(net.forward(&[1.0]), Err(NeuralError::DimensionMismatch(_))));
    }

    #[test]
    fn clipped_relu_bounds() {
        let mut l = DenseLayer::zeros(3, 3, Activation::ClippedRelu { lower: -1.0, upper: 1.0 });
        for i in 0..3 {
            l.weights[i * 3 + i] = 1.0;
        }
        let net = DenseNet::new(vec![l]).unwrap();
        assert_eq!(net.forward(&[3.0, -2.0, 0.5]).unwrap(), vec![1.0, -1.0, 0.5]);
    }

    #[test]
    fn linear_square_loss_gradient() {
        // y = w·x + b, L = y², dL/dw = 2 y x.
        let mut l = DenseLayer::zeros(2, 1, Activation::Linear);
        l.weights = vec![0.5, -1.5];
        l.biases = vec![0.25];
        let net = DenseNet::new(vec![l]).unwrap();
        let x = [2.0, 1.0];
        let cache = net.forward_cached(&x, 1).unwrap();
        let y = cache.output()[0];
        assert_eq!(y, 0.5 * 2.0 - 1.5 + 0.25);
        let (g, dx) = net.backward(&cache, &[2.0 * y]).unwrap();
        assert_eq!(g.layers[0].weights, vec![2.0 * y * 2.0, 2.0 * y * 1.0]);
        assert_eq!(g.layers[0].biases, vec![2.0 * y]);
        assert_eq!(dx, vec![2.0 * y * 0.5, 2.0 * y * -1.5]);
    }

    #[test]
    fn saturated_unit_blocks_gradient() {
        let mut l = DenseLayer::zeros(1, 2, Activation::ClippedRelu { lower: -1.0, upper: 1.0 });
        l.weights = vec![5.0, 0.5];
        let net = DenseNet::new(vec![l]).unwrap();
        let cache = net.forward_cached(&[1.0], 1).unwrap();
        let (g, dx) = net.backward(&cache, &[1.0, 1.0]).unwrap();
        assert_eq!(g.layers[0].weights, vec![0.0, 1.0]);
        assert_eq!(dx, vec![0.5]);

        // A pre-activation term still reaches the saturated unit.
        assert_eq!(cache.output_pre(), &[5.0, 0.5]);
        let (g, dx) = net.backward_with_output_pre(&cache, &[1.0, 1.0], &[2.0, 0.0]).unwrap();
        assert_eq!(g.layers[0].weights, vec![2.0, 1.0]);
        assert_eq!(dx, vec![2.0 * 5.0 + 0.5]);
    }

    #[test]
    fn adam_fixed_point_and_first_step() {
        let mut l = DenseLayer::zeros(1, 1, Activation::Linear);
        l.weights = vec![1.0];
        let mut net = DenseNet::new(vec![l]).unwrap();
        let cfg = AdamConfig { l2: 0.0, ..Default::default() };
        let mut adam = AdamState::new(cfg, &net);
        let zero = Gradients::zeros_like(&net);
        adam.step(&mut net, &zero).unwrap();
        assert_eq!(net.layers[0].weights[0], 1.0);

        let mut adam = AdamState::new(cfg, &net);
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].weights[0] = 1.0;
        adam.step(&mut net, &g).unwrap();
        let expected = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((net.layers[0].weights[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn soft_update_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = DenseNet::random(&[2, 3, 1], &[Activation::Tanh, Activation::Linear], &mut rng).unwrap();
        let orig = DenseNet::random(&[2, 3, 1], &[Activation::Tanh, Activation::Linear], &mut rng).unwrap();
        let mut t = orig.clone();
        t.soft_update_from(&src, 0.0).unwrap();
        assert_eq!(t, orig);
        t.soft_update_from(&src, 1.0).unwrap();
        assert_eq!(t, src);

        let mut a = DenseLayer::zeros(1, 1, Activation::Linear);
        let mut b = a.clone();
        b.weights[0] = 2.0;
        a.weights[0] = 0.0;
        let mut ta = DenseNet::new(vec![a]).unwrap();
        ta.soft_update_from(&DenseNet::new(vec![b]).unwrap(), 0.5).unwrap();
        assert_eq!(ta.layers[0].weights[0], 1.0);

        let other = DenseNet::random(&[2, 4, 1], &[Activation::Tanh, Activation::Linear], &mut rng).unwrap();
        assert!(t.soft_update_from(&other, 0.5).is_err());
    }

    #[test]
    fn export_rejects_non_actor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let critic = DenseNet::critic(4, &[8], &mut rng).unwrap();
        assert!(matches!(export_policy(&critic, ActionBounds::default()), Err(NeuralError::UnsupportedActivation(_))));
        let actor = DenseNet::actor(4, &[8], 2, (-1.0, 1.0), &mut rng).unwrap();
        let file = export_policy(&actor, ActionBounds::default()).unwrap();
        assert_eq!(file.bounds, ActionBounds { upper: 1.0, lower: -1.0 });
        assert!(export_policy(&actor, ActionBounds { upper: 2.0, lower: -1.0 }).is_err());
    }

    #[test]
    fn tampered_files_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let actor = DenseNet::actor(4, &[8, 8], 2, (-1.0, 1.0), &mut rng).unwrap();
        let file = export_policy(&actor, ActionBounds::default()).unwrap();

        let mut bad = file.clone();
        bad.obs_dim = 5;
        assert!(matches!(PolicyFile::from_json(&bad.to_json()), Err(NeuralError::DimensionMismatch(_))));
        let mut bad = file.clone();
        bad.layers[1].cols = 7;
        assert!(matches!(PolicyFile::from_json(&bad.to_json()), Err(NeuralError::DimensionMismatch(_))));
        let mut bad = file.clone();
        bad.layers[0].activation = "sigmoid".into();
        assert!(matches!(PolicyFile::from_json(&bad.to_json()), Err(NeuralError::UnsupportedActivation(_))));

        let mut bin = file.to_binary();
        bin.pop();
        assert!(PolicyFile::from_binary(&bin).is_err());
        assert!(PolicyFile::from_binary(b"nonsense").is_err());
    }

    #[test]
    fn zero_policy_reconstructs_to_zero() {
        let mut net = DenseNet::actor(12, &[16, 16], 5, (-1.0, 1.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for l in &mut net.layers {
            l.biases.iter_mut().for_each(|b| *b = 0.0);
        }
        let file = export_policy(&net, ActionBounds::default()).unwrap();
        assert_eq!(file.reconstruct_action(&[0.0; 12]).unwrap(), vec![0.0; 5]);
    }
}
