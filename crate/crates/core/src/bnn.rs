//! Mean-field Gaussian variational networks.
//!
//! A [`VariationalNet`] holds a mean `mu` and an unconstrained scale `rho` for
//! every weight and bias; the standard deviation is `softplus(rho)`, clamped
//! below at [`SIGMA_MIN`]. Parameters are drawn by reparameterization,
//! `theta = mu + sigma * eps`. Mini-batch passes use Flipout: one shared
//! `eps` per pass, decorrelated across examples by per-example Rademacher
//! sign vectors on the input and output side of every layer, so example `n`
//! sees the perturbation `(sigma * eps) ∘ (s_n r_nᵀ)` on the weights and
//! `(sigma * eps) ∘ r_n` on the biases.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    accumulate_layer_grad, affine, leaky_relu, propagate, sigmoid, softplus, softplus_inv,
    BackwardScratch, MlpSpec, ParamVector, Trace,
};

/// Smallest standard deviation a variational parameter may take.
pub const SIGMA_MIN: f64 = 1e-12;

/// Initial posterior standard deviation of every parameter.
pub const DEFAULT_INIT_SIGMA: f64 = 0.05;

#[inline]
fn sigma_of(rho: f64) -> f64 {
    softplus(rho).max(SIGMA_MIN)
}

/// `d sigma / d rho`, zero where the clamp is active.
#[inline]
fn dsigma_drho(rho: f64) -> f64 {
    if softplus(rho) > SIGMA_MIN {
        sigmoid(rho)
    } else {
        0.0
    }
}

/// Closed-form `KL(N(mu, diag sigma²) || N(0, I))`.
pub fn kl_standard_normal(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::shape("kl sigma", mu.len(), sigma.len()));
    }
    if let Some(i) = sigma.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::InvalidData(format!(
            "kl requires positive sigma, got {} at index {i}",
            sigma[i]
        )));
    }
    Ok(mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| -s.ln() + 0.5 * (s * s + m * m - 1.0))
        .sum())
}

/// One reparameterized draw, `theta = mu + sigma * epsilon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledParams {
    pub theta: ParamVector,
    pub epsilon: ParamVector,
}

/// How per-example parameter perturbations are built in a mini-batch pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// Pseudo-independent perturbations via random sign flips.
    #[default]
    Flipout,
    /// One parameter draw shared by the whole batch.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalNet {
    pub spec: MlpSpec,
    pub mu: ParamVector,
    pub rho: ParamVector,
}

impl VariationalNet {
    /// Xavier-uniform means, zero bias means, and `sigma = init_sigma` everywhere.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, init_sigma: f64, rng: &mut R) -> Self {
        let mu = spec.xavier_init(rng);
        let rho = ParamVector(vec![softplus_inv(init_sigma); spec.num_params()]);
        VariationalNet { spec, mu, rho }
    }

    pub fn from_parts(spec: MlpSpec, mu: ParamVector, rho: ParamVector) -> Result<Self> {
        let d = spec.num_params();
        if mu.len() != d {
            return Err(Error::shape("variational mean", d, mu.len()));
        }
        if rho.len() != d {
            return Err(Error::shape("variational scale", d, rho.len()));
        }
        Ok(VariationalNet { spec, mu, rho })
    }

    pub fn num_params(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| sigma_of(r)).collect()
    }

    pub fn kl(&self) -> f64 {
        self.mu
            .iter()
            .zip(self.rho.iter())
            .map(|(&m, &r)| {
                let s = sigma_of(r);
                -s.ln() + 0.5 * (s * s + m * m - 1.0)
            })
            .sum()
    }

    pub fn sample_params<R: Rng + ?Sized>(&self, rng: &mut R) -> SampledParams {
        let epsilon: Vec<f64> = (0..self.num_params())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let theta = self
            .mu
            .iter()
            .zip(self.rho.iter())
            .zip(&epsilon)
            .map(|((&m, &r), &e)| m + sigma_of(r) * e)
            .collect();
        SampledParams {
            theta: ParamVector(theta),
            epsilon: ParamVector(epsilon),
        }
    }

    /// Parameters at the variational mean, with zero noise.
    pub fn mean_params(&self) -> SampledParams {
        SampledParams {
            theta: self.mu.clone(),
            epsilon: ParamVector::zeros(self.num_params()),
        }
    }

    /// Flipout forward pass over a row-major batch. Returns the outputs
    /// (row-major, `batch × output_dim`) and the KL of the whole net.
    pub fn flipout_forward<R: Rng + ?Sized>(
        &self,
        inputs: &[f64],
        rng: &mut R,
    ) -> Result<(Vec<f64>, f64)> {
        let batch = self.batch_size(inputs)?;
        let noise = FlipoutNoise::sample(&self.spec, batch, Perturbation::Flipout, rng);
        let pass = self.pass(inputs, &noise)?;
        Ok((pass.outputs(), self.kl()))
    }

    fn batch_size(&self, inputs: &[f64]) -> Result<usize> {
        let d_in = self.spec.input_dim();
        if inputs.is_empty() {
            return Err(Error::InvalidData("empty mini-batch".into()));
        }
        if !inputs.len().is_multiple_of(d_in) {
            return Err(Error::shape("batch input row width", d_in, inputs.len() % d_in));
        }
        Ok(inputs.len() / d_in)
    }

    /// Runs a batch pass with the given noise, keeping everything needed for
    /// the backward pass.
    pub fn pass(&self, inputs: &[f64], noise: &FlipoutNoise) -> Result<FlipoutPass> {
        let batch = self.batch_size(inputs)?;
        if noise.batch != batch && noise.mode == Perturbation::Flipout {
            return Err(Error::shape("flipout noise batch", batch, noise.batch));
        }
        if noise.epsilon.len() != self.num_params() {
            return Err(Error::shape("flipout noise", self.num_params(), noise.epsilon.len()));
        }
        let sigma = self.sigma();
        let delta: Vec<f64> = sigma.iter().zip(&noise.epsilon).map(|(s, e)| s * e).collect();
        let d_in = self.spec.input_dim();
        let mut traces = Vec::with_capacity(batch);
        let mut xs = vec![0.0; self.spec.max_width()];
        let mut tmp = vec![0.0; self.spec.max_width()];
        let last = self.spec.layers().len() - 1;
        for n in 0..batch {
            let mut trace = Trace::new(&self.spec);
            trace.post[0].copy_from_slice(&inputs[n * d_in..(n + 1) * d_in]);
            let (s_all, r_all) = noise.signs(n);
            let (mut s_off, mut r_off) = (0, 0);
            for (l, layer) in self.spec.layers().iter().enumerate() {
                let (before, after) = trace.post.split_at_mut(l + 1);
                let x = &before[l];
                let pre = &mut trace.pre[l];
                affine(&self.mu[layer.weights()], &self.mu[layer.biases()], x, pre);
                let xs = &mut xs[..layer.fan_in];
                let tmp = &mut tmp[..layer.fan_out];
                match (s_all, r_all) {
                    (Some(s_all), Some(r_all)) => {
                        let s = &s_all[s_off..s_off + layer.fan_in];
                        let r = &r_all[r_off..r_off + layer.fan_out];
                        for ((o, &a), &b) in xs.iter_mut().zip(x.iter()).zip(s) {
                            *o = a * b;
                        }
                        affine(&delta[layer.weights()], &delta[layer.biases()], xs, tmp);
                        for ((p, &t), &rr) in pre.iter_mut().zip(tmp.iter()).zip(r) {
                            *p += t * rr;
                        }
                    }
                    _ => {
                        affine(&delta[layer.weights()], &delta[layer.biases()], x, tmp);
                        for (p, &t) in pre.iter_mut().zip(tmp.iter()) {
                            *p += t;
                        }
                    }
                }
                s_off += layer.fan_in;
                r_off += layer.fan_out;
                let out = &mut after[0];
                if l < last {
                    for (o, &a) in out.iter_mut().zip(pre.iter()) {
                        *o = leaky_relu(a);
                    }
                } else {
                    out.copy_from_slice(pre);
                    self.spec.apply_output_head(out);
                }
            }
            traces.push(trace);
        }
        Ok(FlipoutPass {
            traces,
            delta,
            sigma,
        })
    }

    /// Gradient of `scale * Σ <output_n, cot_n> - kl_weight * KL` with respect
    /// to `(mu, rho)`, from a pass and its output cotangents.
    pub fn elbo_gradient(
        &self,
        pass: &FlipoutPass,
        noise: &FlipoutNoise,
        grads: &FlipoutGrads,
        loglik_scale: f64,
        kl_weight: f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let d = self.num_params();
        let mut g_mu = Vec::with_capacity(d);
        let mut g_rho = Vec::with_capacity(d);
        for k in 0..d {
            let m = self.mu[k];
            let s = pass.sigma[k];
            g_mu.push(loglik_scale * grads.mu[k] - kl_weight * m);
            let d_sigma = loglik_scale * grads.perturbation[k] * noise.epsilon[k]
                - kl_weight * (s - 1.0 / s);
            g_rho.push(d_sigma * dsigma_drho(self.rho[k]));
        }
        (g_mu, g_rho)
    }
}

/// Random quantities of one mini-batch pass: the shared Gaussian draw and
/// the per-example sign vectors.
#[derive(Debug, Clone)]
pub struct FlipoutNoise {
    pub mode: Perturbation,
    pub batch: usize,
    pub epsilon: Vec<f64>,
    in_signs: Vec<f64>,
    out_signs: Vec<f64>,
    in_len: usize,
    out_len: usize,
}

impl FlipoutNoise {
    pub fn sample<R: Rng + ?Sized>(
        spec: &MlpSpec,
        batch: usize,
        mode: Perturbation,
        rng: &mut R,
    ) -> Self {
        let epsilon = (0..spec.num_params())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let in_len: usize = spec.layers().iter().map(|l| l.fan_in).sum();
        let out_len: usize = spec.layers().iter().map(|l| l.fan_out).sum();
        let (in_signs, out_signs) = match mode {
            Perturbation::Flipout => (
                rademacher(batch * in_len, rng),
                rademacher(batch * out_len, rng),
            ),
            Perturbation::Shared => (Vec::new(), Vec::new()),
        };
        FlipoutNoise {
            mode,
            batch,
            epsilon,
            in_signs,
            out_signs,
            in_len,
            out_len,
        }
    }

    /// Noise with `epsilon = 0`: every example sees the mean parameters.
    pub fn zero(spec: &MlpSpec, batch: usize) -> Self {
        FlipoutNoise {
            mode: Perturbation::Shared,
            batch,
            epsilon: vec![0.0; spec.num_params()],
            in_signs: Vec::new(),
            out_signs: Vec::new(),
            in_len: 0,
            out_len: 0,
        }
    }

    fn signs(&self, n: usize) -> (Option<&[f64]>, Option<&[f64]>) {
        match self.mode {
            Perturbation::Flipout => (
                Some(&self.in_signs[n * self.in_len..(n + 1) * self.in_len]),
                Some(&self.out_signs[n * self.out_len..(n + 1) * self.out_len]),
            ),
            Perturbation::Shared => (None, None),
        }
    }
}

fn rademacher<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let bits: u64 = rng.random();
        for b in 0..64.min(len - out.len()) {
            out.push(if (bits >> b) & 1 == 1 { 1.0 } else { -1.0 });
        }
    }
    out
}

/// Activations of a batch pass.
#[derive(Debug, Clone)]
pub struct FlipoutPass {
    traces: Vec<Trace>,
    /// `sigma * epsilon`
    delta: Vec<f64>,
    sigma: Vec<f64>,
}

/// Batch-summed gradients from [`FlipoutPass::backward`].
#[derive(Debug, Clone)]
pub struct FlipoutGrads {
    /// `d/d mu` of `Σ_n <output_n, cot_n>`.
    pub mu: Vec<f64>,
    /// `d/d(perturbation)`: multiply elementwise by epsilon for `d/d sigma`.
    pub perturbation: Vec<f64>,
    /// Per-example input gradients, row-major, when requested.
    pub inputs: Option<Vec<f64>>,
}

impl FlipoutPass {
    pub fn batch(&self) -> usize {
        self.traces.len()
    }

    pub fn output(&self, n: usize) -> &[f64] {
        self.traces[n].output()
    }

    pub fn outputs(&self) -> Vec<f64> {
        self.traces.iter().flat_map(|t| t.output().iter().copied()).collect()
    }

    /// Backpropagates row-major output cotangents through the pass.
    pub fn backward(
        &self,
        net: &VariationalNet,
        noise: &FlipoutNoise,
        cotangents: &[f64],
        want_input_grads: bool,
    ) -> Result<FlipoutGrads> {
        let spec = &net.spec;
        let d_out = spec.output_dim();
        let d_in = spec.input_dim();
        if cotangents.len() != self.batch() * d_out {
            return Err(Error::shape(
                "flipout cotangents",
                self.batch() * d_out,
                cotangents.len(),
            ));
        }
        let d = net.num_params();
        let mut g_mu = vec![0.0; d];
        let mut g_pert = vec![0.0; d];
        let mut g_in = want_input_grads.then(|| vec![0.0; self.batch() * d_in]);
        let mut scratch = BackwardScratch::new(spec);
        let w = spec.max_width();
        let mut delta_r = vec![0.0; w];
        let mut xs = vec![0.0; w];
        let mut dx_pert = vec![0.0; w];
        let layers = spec.layers();
        let last = layers.len() - 1;
        let in_offsets: Vec<usize> = layers
            .iter()
            .scan(0, |acc, l| {
                let o = *acc;
                *acc += l.fan_in;
                Some(o)
            })
            .collect();
        let out_offsets: Vec<usize> = layers
            .iter()
            .scan(0, |acc, l| {
                let o = *acc;
                *acc += l.fan_out;
                Some(o)
            })
            .collect();

        for (n, trace) in self.traces.iter().enumerate() {
            let (s_all, r_all) = noise.signs(n);
            scratch.delta[..d_out].copy_from_slice(&cotangents[n * d_out..(n + 1) * d_out]);
            spec.output_head_backward(&trace.pre[last], &mut scratch.delta[..d_out]);
            for l in (0..layers.len()).rev() {
                let layer = layers[l];
                let x = &trace.post[l];
                let delta = &scratch.delta[..layer.fan_out];
                accumulate_layer_grad(&mut g_mu, layer, x, delta);
                let dr = &mut delta_r[..layer.fan_out];
                let xs = &mut xs[..layer.fan_in];
                match (s_all, r_all) {
                    (Some(s_all), Some(r_all)) => {
                        let s = &s_all[in_offsets[l]..in_offsets[l] + layer.fan_in];
                        let r = &r_all[out_offsets[l]..out_offsets[l] + layer.fan_out];
                        for ((o, &a), &b) in dr.iter_mut().zip(delta).zip(r) {
                            *o = a * b;
                        }
                        for ((o, &a), &b) in xs.iter_mut().zip(x.iter()).zip(s) {
                            *o = a * b;
                        }
                    }
                    _ => {
                        dr.copy_from_slice(delta);
                        xs.copy_from_slice(x);
                    }
                }
                accumulate_layer_grad(&mut g_pert, layer, xs, dr);

                let need_dx = l > 0 || g_in.is_some();
                if !need_dx {
                    continue;
                }
                let dxp = &mut dx_pert[..layer.fan_in];
                propagate(&self.delta[layer.weights()], dr, dxp);
                if let Some(s_all) = s_all {
                    let s = &s_all[in_offsets[l]..in_offsets[l] + layer.fan_in];
                    for (o, &b) in dxp.iter_mut().zip(s) {
                        *o *= b;
                    }
                }
                let next = &mut scratch.next[..layer.fan_in];
                propagate(&net.mu[layer.weights()], delta, next);
                for (o, &p) in next.iter_mut().zip(dxp.iter()) {
                    *o += p;
                }
                if l > 0 {
                    for (o, &a) in next.iter_mut().zip(trace.pre[l - 1].iter()) {
                        *o *= if a >= 0.0 { 1.0 } else { crate::nn::LEAKY_SLOPE };
                    }
                    std::mem::swap(&mut scratch.delta, &mut scratch.next);
                } else if let Some(g_in) = g_in.as_mut() {
                    g_in[n * d_in..(n + 1) * d_in].copy_from_slice(next);
                }
            }
        }
        Ok(FlipoutGrads {
            mu: g_mu,
            perturbation: g_pert,
            inputs: g_in,
        })
    }
}
