//! Dense multilayer perceptrons with hand-written reverse-mode gradients.
//!
//! Every network in the model is a stack of affine layers with LeakyReLU on the
//! hidden layers and a linear output layer. A contiguous slice of output
//! digits may be marked as a *variance slot*; those digits go through Softplus
//! and are floored at [`VARIANCE_FLOOR`] so downstream log-densities never see
//! a zero variance.
//!
//! # Parameter layout
//!
//! Parameters live in one flat `f64` vector, layer by layer. Each layer stores
//! its weight matrix first, row-major with shape `(fan_in, fan_out)` (row `i`
//! holds the weights leaving input unit `i`), followed by its `fan_out`
//! biases. A layer therefore occupies `(fan_in + 1) * fan_out` entries. The
//! layout is part of the checkpoint format.

use std::ops::{Deref, DerefMut, Range};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Negative-side slope of the hidden-layer activation, `max(0.2 x, x)`.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Lower clamp applied to every predicted variance after Softplus.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
fn leaky_relu_grad(pre: f64) -> f64 {
    if pre >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// `ln(1 + e^x)`, stable for large `|x|`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `max(0.2 x, x)`
    #[default]
    LeakyRelu,
}

/// Location of one dense layer inside a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Index of the first weight; biases start at `offset + fan_in * fan_out`.
    pub offset: usize,
}

impl LayerShape {
    #[inline]
    pub fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    #[inline]
    pub fn biases(&self) -> Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }

    #[inline]
    pub fn len(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }
}

/// Architecture of a fixed MLP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMlpSpec", into = "RawMlpSpec")]
pub struct MlpSpec {
    widths: Vec<usize>,
    activation: Activation,
    variance_slot: Option<Range<usize>>,
    layers: Vec<LayerShape>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMlpSpec {
    widths: Vec<usize>,
    activation: Activation,
    variance_slot: Option<Range<usize>>,
}

impl TryFrom<RawMlpSpec> for MlpSpec {
    type Error = Error;
    fn try_from(raw: RawMlpSpec) -> Result<Self> {
        MlpSpec::new(raw.widths, raw.variance_slot)
    }
}

impl From<MlpSpec> for RawMlpSpec {
    fn from(spec: MlpSpec) -> Self {
        RawMlpSpec {
            widths: spec.widths,
            activation: spec.activation,
            variance_slot: spec.variance_slot,
        }
    }
}

impl MlpSpec {
    /// `widths` lists input, hidden and output sizes; at least one hidden layer is required.
    pub fn new(widths: Vec<usize>, variance_slot: Option<Range<usize>>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::InvalidConfig(format!(
                "an MLP needs input, at least one hidden and an output width, got {widths:?}"
            )));
        }
        if let Some(w) = widths.iter().find(|&&w| w == 0) {
            return Err(Error::InvalidConfig(format!(
                "layer widths must be positive, got {w} in {widths:?}"
            )));
        }
        let out = *widths.last().unwrap();
        if let Some(slot) = &variance_slot {
            if slot.start >= slot.end || slot.end > out {
                return Err(Error::InvalidConfig(format!(
                    "variance slot {slot:?} is not inside the output range 0..{out}"
                )));
            }
        }
        let mut spec = MlpSpec {
            widths,
            activation: Activation::LeakyRelu,
            variance_slot,
            layers: Vec::new(),
        };
        spec.layers = spec.compute_layers();
        Ok(spec)
    }

    fn compute_layers(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let shape = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += shape.len();
                shape
            })
            .collect()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn variance_slot(&self) -> Option<Range<usize>> {
        self.variance_slot.clone()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(0)
    }

    /// Total number of weights and biases.
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LayerShape::len).sum()
    }

    /// Xavier-uniform weights and zero biases.
    pub fn xavier_init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut params = vec![0.0; self.num_params()];
        for layer in &self.layers {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            for w in &mut params[layer.weights()] {
                *w = dist.sample(rng);
            }
        }
        ParamVector(params)
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::shape("mlp parameters", self.num_params(), params.len()));
        }
        Ok(())
    }

    /// Evaluates the network on one input.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if input.len() != self.input_dim() {
            return Err(Error::shape("mlp input", self.input_dim(), input.len()));
        }
        let mut trace = Trace::new(self);
        self.forward_trace(params, input, &mut trace);
        Ok(trace.output().to_vec())
    }

    /// Gradients of `<output, cotangent>` with respect to parameters and input.
    pub fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        cotangent: &[f64],
    ) -> Result<(ParamVector, Vec<f64>)> {
        self.check_params(params)?;
        if input.len() != self.input_dim() {
            return Err(Error::shape("mlp input", self.input_dim(), input.len()));
        }
        if cotangent.len() != self.output_dim() {
            return Err(Error::shape("mlp cotangent", self.output_dim(), cotangent.len()));
        }
        let mut trace = Trace::new(self);
        self.forward_trace(params, input, &mut trace);
        let mut grad = vec![0.0; self.num_params()];
        let mut input_grad = vec![0.0; self.input_dim()];
        let mut scratch = BackwardScratch::new(self);
        self.backward_acc(
            params,
            &trace,
            cotangent,
            Some(&mut grad),
            Some(&mut input_grad),
            &mut scratch,
        );
        Ok((ParamVector(grad), input_grad))
    }

    /// Forward pass recording activations. Panics on shape mismatch.
    pub fn forward_trace(&self, params: &[f64], input: &[f64], trace: &mut Trace) {
        assert_eq!(input.len(), self.input_dim(), "mlp input width");
        trace.post[0].copy_from_slice(input);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = trace.post.split_at_mut(l + 1);
            let x = &before[l];
            let pre = &mut trace.pre[l];
            affine(&params[layer.weights()], &params[layer.biases()], x, pre);
            let out = &mut after[0];
            if l < last {
                for (o, &a) in out.iter_mut().zip(pre.iter()) {
                    *o = leaky_relu(a);
                }
            } else {
                out.copy_from_slice(pre);
                self.apply_output_head(out);
            }
        }
    }

    #[inline]
    pub(crate) fn apply_output_head(&self, out: &mut [f64]) {
        if let Some(slot) = &self.variance_slot {
            for o in &mut out[slot.clone()] {
                *o = softplus(*o).max(VARIANCE_FLOOR);
            }
        }
    }

    /// Converts a cotangent on the head outputs into one on the linear output
    /// layer, in place. `pre` holds the linear outputs.
    #[inline]
    pub(crate) fn output_head_backward(&self, pre: &[f64], delta: &mut [f64]) {
        if let Some(slot) = &self.variance_slot {
            for k in slot.clone() {
                let a = pre[k];
                delta[k] *= if softplus(a) > VARIANCE_FLOOR {
                    sigmoid(a)
                } else {
                    0.0
                };
            }
        }
    }

    /// Accumulates `d<output, cotangent>/dparams` into `grad` and writes the
    /// input gradient, each when requested, from a trace produced by
    /// [`forward_trace`].
    ///
    /// [`forward_trace`]: MlpSpec::forward_trace
    pub fn backward_acc(
        &self,
        params: &[f64],
        trace: &Trace,
        cotangent: &[f64],
        mut grad: Option<&mut [f64]>,
        mut input_grad: Option<&mut [f64]>,
        scratch: &mut BackwardScratch,
    ) {
        let last = self.layers.len() - 1;
        let delta = &mut scratch.delta[..self.output_dim()];
        delta.copy_from_slice(cotangent);
        self.output_head_backward(&trace.pre[last], delta);
        for l in (0..self.layers.len()).rev() {
            let layer = self.layers[l];
            let x = &trace.post[l];
            let (delta, next) = split_delta(scratch, layer);
            if let Some(g) = grad.as_deref_mut() {
                accumulate_layer_grad(g, layer, x, delta);
            }
            if l == 0 {
                if let Some(ig) = input_grad.as_deref_mut() {
                    propagate(&params[layer.weights()], delta, ig);
                }
            } else {
                propagate(&params[layer.weights()], delta, next);
                for (d, &a) in next.iter_mut().zip(trace.pre[l - 1].iter()) {
                    *d *= leaky_relu_grad(a);
                }
                std::mem::swap(&mut scratch.delta, &mut scratch.next);
            }
        }
    }
}

fn split_delta(scratch: &mut BackwardScratch, layer: LayerShape) -> (&[f64], &mut [f64]) {
    (
        &scratch.delta[..layer.fan_out],
        &mut scratch.next[..layer.fan_in],
    )
}

/// `out = x W + b` with `W` stored `(fan_in, fan_out)` row-major.
#[inline]
pub(crate) fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_out = out.len();
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n_out..(i + 1) * n_out];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// `dx = W delta`.
#[inline]
pub(crate) fn propagate(w: &[f64], delta: &[f64], dx: &mut [f64]) {
    let n_out = delta.len();
    for (i, d) in dx.iter_mut().enumerate() {
        let row = &w[i * n_out..(i + 1) * n_out];
        *d = row.iter().zip(delta).map(|(a, b)| a * b).sum();
    }
}

/// `grad_W += x^T delta`, `grad_b += delta`.
#[inline]
pub(crate) fn accumulate_layer_grad(grad: &mut [f64], layer: LayerShape, x: &[f64], delta: &[f64]) {
    let n_out = layer.fan_out;
    let gw = &mut grad[layer.weights()];
    for (i, &xi) in x.iter().enumerate() {
        let row = &mut gw[i * n_out..(i + 1) * n_out];
        for (g, &d) in row.iter_mut().zip(delta) {
            *g += xi * d;
        }
    }
    for (g, &d) in grad[layer.biases()].iter_mut().zip(delta) {
        *g += d;
    }
}

/// Recorded activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Linear (pre-activation) outputs of every layer.
    pub(crate) pre: Vec<Vec<f64>>,
    /// `post[0]` is the input; `post[l + 1]` is the activated output of layer `l`.
    pub(crate) post: Vec<Vec<f64>>,
}

impl Trace {
    pub fn new(spec: &MlpSpec) -> Self {
        Trace {
            pre: spec.widths[1..].iter().map(|&w| vec![0.0; w]).collect(),
            post: spec.widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }

    pub fn output(&self) -> &[f64] {
        self.post.last().unwrap()
    }

    pub fn input(&self) -> &[f64] {
        &self.post[0]
    }

    /// Linear outputs of every layer, before activation.
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

/// Reusable buffers for [`MlpSpec::backward_acc`].
#[derive(Debug, Clone)]
pub struct BackwardScratch {
    pub(crate) delta: Vec<f64>,
    pub(crate) next: Vec<f64>,
}

impl BackwardScratch {
    pub fn new(spec: &MlpSpec) -> Self {
        let w = spec.max_width();
        BackwardScratch {
            delta: vec![0.0; w],
            next: vec![0.0; w],
        }
    }
}

/// Flat vector of weights and biases in canonical layer order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
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
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

/// A deterministic network: architecture plus one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamVector,
}

impl Mlp {
    pub fn new_xavier<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let params = spec.xavier_init(rng);
        Mlp { spec, params }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.spec.forward(&self.params, input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Adam moments and step counter for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        AdamState {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One bias-corrected Adam step that *decreases* the objective whose gradient is `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.update(params, grads, 1.0)
    }

    /// One Adam step that *increases* the objective whose gradient is `grads`.
    pub fn ascend(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.update(params, grads, -1.0)
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64], sign: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape("adam parameters", self.m.len(), params.len()));
        }
        if grads.len() != self.m.len() {
            return Err(Error::shape("adam gradient", self.m.len(), grads.len()));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::numerical(
                "adam step",
                format!("non-finite gradient {} at index {i}", grads[i]),
            ));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = sign * g;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(spec: &MlpSpec, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new(-1.0, 1.0).unwrap();
        ParamVector((0..spec.num_params()).map(|_| dist.sample(&mut rng)).collect())
    }

    #[test]
    fn leaky_relu_values() {
        assert_eq!(leaky_relu(-1.0), -0.2);
        assert_eq!(leaky_relu(3.0), 3.0);
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3, 2], None).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], None).is_err());
        assert!(MlpSpec::new(vec![3, 4, 2], Some(1..3)).is_err());
        assert!(MlpSpec::new(vec![3, 4, 2], Some(1..1)).is_err());
        let spec = MlpSpec::new(vec![3, 4, 2], Some(1..2)).unwrap();
        assert_eq!(spec.num_params(), 4 * 4 + 5 * 2);
    }

    #[test]
    fn zero_params_give_ln2_variance() {
        let spec = MlpSpec::new(vec![3, 3, 3], Some(2..3)).unwrap();
        let out = spec
            .forward(&vec![0.0; spec.num_params()], &[1.0, -2.0, 0.5])
            .unwrap();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 0.0);
        assert!((out[2] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_hand_expanded_algebra() {
        let spec = MlpSpec::new(vec![2, 4, 2], None).unwrap();
        let p = random_params(&spec, 11);
        let x = [0.7, -1.3];
        // W1 is 2x4 row-major, b1 4, W2 is 4x2, b2 2.
        let w1 = |i: usize, j: usize| p[i * 4 + j];
        let b1 = |j: usize| p[8 + j];
        let w2 = |i: usize, j: usize| p[12 + i * 2 + j];
        let b2 = |j: usize| p[20 + j];
        let mut h = [0.0; 4];
        for (j, hj) in h.iter_mut().enumerate() {
            let a = x[0] * w1(0, j) + x[1] * w1(1, j) + b1(j);
            *hj = if a > 0.0 { a } else { 0.2 * a };
        }
        let expected: Vec<f64> = (0..2)
            .map(|j| (0..4).map(|i| h[i] * w2(i, j)).sum::<f64>() + b2(j))
            .collect();
        let out = spec.forward(&p, &x).unwrap();
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let spec = MlpSpec::new(vec![2, 4, 2], None).unwrap();
        let p = ParamVector::zeros(spec.num_params());
        assert!(matches!(
            spec.forward(&p, &[1.0]),
            Err(Error::Shape { .. })
        ));
        assert!(spec.forward(&p[1..], &[1.0, 2.0]).is_err());
        assert!(spec.backward(&p, &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn zero_cotangent_zero_gradient() {
        let spec = MlpSpec::new(vec![3, 5, 2], Some(1..2)).unwrap();
        let p = random_params(&spec, 3);
        let (g, gi) = spec.backward(&p, &[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(gi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_neuron_gradient() {
        // 1-1-1 net whose hidden unit stays in the positive regime: y = w2 (w1 x + b1) + b2.
        let spec = MlpSpec::new(vec![1, 1, 1], None).unwrap();
        let p = ParamVector(vec![2.0, 0.5, 1.0, 0.0]);
        let x = 1.5;
        let (g, gi) = spec.backward(&p, &[x], &[1.0]).unwrap();
        assert!((g[0] - x).abs() < 1e-15); // d/dw1 = w2 * x
        assert!((g[1] - 1.0).abs() < 1e-15); // d/db1 = w2
        assert!((g[2] - (2.0 * x + 0.5)).abs() < 1e-15);
        assert!((g[3] - 1.0).abs() < 1e-15);
        assert!((gi[0] - 2.0).abs() < 1e-15);
    }

    fn fd_check(spec: &MlpSpec, seed: u64) -> f64 {
        let p = random_params(spec, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let dist = Uniform::new(-1.0, 1.0).unwrap();
        let x: Vec<f64> = (0..spec.input_dim()).map(|_| dist.sample(&mut rng)).collect();
        let c: Vec<f64> = (0..spec.output_dim()).map(|_| dist.sample(&mut rng)).collect();
        let f = |p: &[f64], x: &[f64]| -> f64 {
            spec.forward(p, x)
                .unwrap()
                .iter()
                .zip(&c)
                .map(|(a, b)| a * b)
                .sum()
        };
        let (g, gi) = spec.backward(&p, &x, &c).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut pp = p.clone();
        for k in 0..p.len() {
            let orig = pp[k];
            pp[k] = orig + h;
            let fp = f(&pp, &x);
            pp[k] = orig - h;
            let fm = f(&pp, &x);
            pp[k] = orig;
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max((fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-3));
        }
        let mut xx = x.clone();
        for k in 0..x.len() {
            let orig = xx[k];
            xx[k] = orig + h;
            let fp = f(&p, &xx);
            xx[k] = orig - h;
            let fm = f(&p, &xx);
            xx[k] = orig;
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max((fd - gi[k]).abs() / fd.abs().max(gi[k].abs()).max(1e-3));
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences_3_8_1() {
        let spec = MlpSpec::new(vec![3, 8, 1], None).unwrap();
        for seed in 0..5 {
            let err = fd_check(&spec, seed);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn gradient_with_variance_slot() {
        let spec = MlpSpec::new(vec![4, 6, 5, 3], Some(2..3)).unwrap();
        for seed in 0..5 {
            let err = fd_check(&spec, seed);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut st = AdamState::new(AdamConfig::default(), 3);
        let mut p = vec![1.0, -2.0, 3.0];
        st.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for &g in &[0.5, -3.0, 0.25, 42.0] {
            let cfg = AdamConfig::with_lr(0.01);
            let mut st = AdamState::new(cfg, 1);
            let mut p = vec![0.0];
            st.step(&mut p, &[g]).unwrap();
            // closed form: -lr * g / (|g| + eps)
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((p[0] - expected).abs() < 1e-15);
            assert!((p[0].abs() - 0.01).abs() < 1e-9);
            assert_eq!(p[0].signum(), -g.signum());
        }
    }

    #[test]
    fn adam_scalar_descent() {
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), 1);
        let mut w = vec![0.0];
        for _ in 0..200 {
            let g = 2.0 * (w[0] - 3.0);
            st.step(&mut w, &[g]).unwrap();
        }
        assert!((w[0] - 3.0).abs() < 0.05, "w = {}", w[0]);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut st = AdamState::new(AdamConfig::default(), 3);
        let mut p = vec![0.0; 3];
        let err = st.step(&mut p, &[0.0, f64::NAN, 1.0]).unwrap_err();
        assert!(err.to_string().contains("index 1"), "{err}");
        assert_eq!(st.t, 0);
    }
}
