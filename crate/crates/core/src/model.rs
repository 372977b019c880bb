//! The three generative models and their log-likelihoods.
//!
//! * covariates: `V | Z ~ N(mu_v(Z), sigma_v²(Z) I_p)`, net input `z`, output `[mu_v (p) | sigma_v²]`
//! * treatment: `X | Z0, Z2 ~ N(mu_x, sigma_x²)` when continuous, or
//!   `P(X = 1) = 1 / (1 + e^{-xi})` with `xi ~ N(mu_x, sigma_x²)` when binary;
//!   net input `[z0 | z2]`, output `[mu_x | sigma_x²]`
//! * outcome: `Y | X, Z0, Z1 ~ N(mu_y, sigma_y²)`, net input `[x | z0 | z1]`,
//!   output `[mu_y | sigma_y²]`
//!
//! All log-likelihoods are full densities including their normalizing constants.
//! The input layouts above are part of the checkpoint contract.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bnn::{SampledParams, VariationalNet, DEFAULT_INIT_SIGMA};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softplus, Mlp, MlpSpec, Trace};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Sizes of the four latent blocks `(z0, z1, z2, z3)`.
///
/// `z0` drives treatment and outcome, `z1` only the outcome, `z2` only the
/// treatment and `z3` neither. Blocks are laid out in that order inside `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentConfig {
    pub q0: usize,
    pub q1: usize,
    pub q2: usize,
    pub q3: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig {
            q0: 1,
            q1: 1,
            q2: 1,
            q3: 7,
        }
    }
}

impl LatentConfig {
    pub fn new(q0: usize, q1: usize, q2: usize, q3: usize) -> Result<Self> {
        let cfg = LatentConfig { q0, q1, q2, q3 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.q0 == 0 {
            return Err(Error::InvalidConfig(
                "the confounder block z0 needs at least one dimension".into(),
            ));
        }
        Ok(())
    }

    pub fn q(&self) -> usize {
        self.q0 + self.q1 + self.q2 + self.q3
    }

    pub fn z0(&self) -> Range<usize> {
        0..self.q0
    }

    pub fn z1(&self) -> Range<usize> {
        self.q0..self.q0 + self.q1
    }

    pub fn z2(&self) -> Range<usize> {
        let s = self.q0 + self.q1;
        s..s + self.q2
    }

    pub fn z3(&self) -> Range<usize> {
        let s = self.q0 + self.q1 + self.q2;
        s..s + self.q3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentKind {
    #[default]
    Continuous,
    Binary,
}

/// Hidden-layer widths of the three generative networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub v_hidden: Vec<usize>,
    pub x_hidden: Vec<usize>,
    pub y_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            v_hidden: vec![64; 5],
            x_hidden: vec![64, 32, 8],
            y_hidden: vec![64, 32, 8],
        }
    }
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalBgmModel {
    pub latent: LatentConfig,
    pub treatment_kind: TreatmentKind,
    /// Covariate dimension.
    pub p: usize,
    pub net_v: VariationalNet,
    pub net_x: VariationalNet,
    pub net_y: VariationalNet,
}

/// One parameter draw for each of the three networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDraw {
    pub v: SampledParams,
    pub x: SampledParams,
    pub y: SampledParams,
}

impl CausalBgmModel {
    pub fn new<R: Rng + ?Sized>(
        latent: LatentConfig,
        treatment_kind: TreatmentKind,
        p: usize,
        arch: &Architecture,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_init_sigma(latent, treatment_kind, p, arch, DEFAULT_INIT_SIGMA, rng)
    }

    pub fn with_init_sigma<R: Rng + ?Sized>(
        latent: LatentConfig,
        treatment_kind: TreatmentKind,
        p: usize,
        arch: &Architecture,
        init_sigma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        latent.validate()?;
        if p == 0 {
            return Err(Error::InvalidConfig("covariate dimension must be positive".into()));
        }
        if !(init_sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "initial variational sigma must be positive, got {init_sigma}"
            )));
        }
        let q = latent.q();
        let spec_v = MlpSpec::new(widths(q, &arch.v_hidden, p + 1), Some(p..p + 1))?;
        let spec_x = MlpSpec::new(widths(latent.q0 + latent.q2, &arch.x_hidden, 2), Some(1..2))?;
        let spec_y = MlpSpec::new(
            widths(1 + latent.q0 + latent.q1, &arch.y_hidden, 2),
            Some(1..2),
        )?;
        Ok(CausalBgmModel {
            latent,
            treatment_kind,
            p,
            net_v: VariationalNet::new(spec_v, init_sigma, rng),
            net_x: VariationalNet::new(spec_x, init_sigma, rng),
            net_y: VariationalNet::new(spec_y, init_sigma, rng),
        })
    }

    pub fn q(&self) -> usize {
        self.latent.q()
    }

    /// Checks that network shapes agree with the latent config and `p`.
    pub fn validate(&self) -> Result<()> {
        self.latent.validate()?;
        let q = self.latent.q();
        let check = |net: &VariationalNet, name: &'static str, inp: usize, out: usize| {
            if net.spec.input_dim() != inp {
                return Err(Error::shape(name, inp, net.spec.input_dim()));
            }
            if net.spec.output_dim() != out {
                return Err(Error::shape(name, out, net.spec.output_dim()));
            }
            Ok(())
        };
        check(&self.net_v, "covariate net", q, self.p + 1)?;
        check(&self.net_x, "treatment net", self.latent.q0 + self.latent.q2, 2)?;
        check(&self.net_y, "outcome net", 1 + self.latent.q0 + self.latent.q1, 2)?;
        Ok(())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelDraw {
        ModelDraw {
            v: self.net_v.sample_params(rng),
            x: self.net_x.sample_params(rng),
            y: self.net_y.sample_params(rng),
        }
    }

    /// Draw at the variational means.
    pub fn mean_draw(&self) -> ModelDraw {
        ModelDraw {
            v: self.net_v.mean_params(),
            x: self.net_x.mean_params(),
            y: self.net_y.mean_params(),
        }
    }

    /// Writes the treatment-net input `[z0 | z2]` taken from a full latent vector.
    pub fn x_input_into(&self, z: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&z[self.latent.z0()]);
        out.extend_from_slice(&z[self.latent.z2()]);
    }

    /// Writes the outcome-net input `[x | z0 | z1]` taken from a full latent vector.
    pub fn y_input_into(&self, x: f64, z: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.push(x);
        out.extend_from_slice(&z[self.latent.z0()]);
        out.extend_from_slice(&z[self.latent.z1()]);
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.q() {
            return Err(Error::shape("latent vector", self.q(), z.len()));
        }
        Ok(())
    }

    pub fn loglik_v(&self, v: &[f64], z: &[f64], theta_v: &SampledParams) -> Result<f64> {
        self.check_z(z)?;
        if v.len() != self.p {
            return Err(Error::shape("covariate vector", self.p, v.len()));
        }
        let out = self.net_v.spec.forward(&theta_v.theta, z)?;
        finite("covariate log-likelihood", isotropic_head(v, &out, None))
    }

    /// `xi_noise` holds the standard-normal draws used for a binary treatment
    /// (one per averaged draw); it is ignored for continuous treatments.
    pub fn loglik_x(
        &self,
        x: f64,
        z0: &[f64],
        z2: &[f64],
        theta_x: &SampledParams,
        xi_noise: &[f64],
    ) -> Result<f64> {
        if z0.len() != self.latent.q0 {
            return Err(Error::shape("z0", self.latent.q0, z0.len()));
        }
        if z2.len() != self.latent.q2 {
            return Err(Error::shape("z2", self.latent.q2, z2.len()));
        }
        let input: Vec<f64> = z0.iter().chain(z2).copied().collect();
        let out = self.net_x.spec.forward(&theta_x.theta, &input)?;
        let ll = match self.treatment_kind {
            TreatmentKind::Continuous => gaussian_head(x, &out, None),
            TreatmentKind::Binary => {
                check_binary(x)?;
                if xi_noise.is_empty() {
                    return Err(Error::InvalidData(
                        "binary treatment likelihood needs at least one xi draw".into(),
                    ));
                }
                bernoulli_head(x, &out, xi_noise, None)
            }
        };
        finite("treatment log-likelihood", ll)
    }

    pub fn loglik_y(
        &self,
        y: f64,
        x: f64,
        z0: &[f64],
        z1: &[f64],
        theta_y: &SampledParams,
    ) -> Result<f64> {
        let (mean, var) = self.predict_outcome(x, z0, z1, theta_y)?;
        finite("outcome log-likelihood", gaussian_log_density(y, mean, var))
    }

    /// Conditional mean and variance of the outcome.
    pub fn predict_outcome(
        &self,
        x: f64,
        z0: &[f64],
        z1: &[f64],
        theta_y: &SampledParams,
    ) -> Result<(f64, f64)> {
        if z0.len() != self.latent.q0 {
            return Err(Error::shape("z0", self.latent.q0, z0.len()));
        }
        if z1.len() != self.latent.q1 {
            return Err(Error::shape("z1", self.latent.q1, z1.len()));
        }
        let mut input = Vec::with_capacity(1 + z0.len() + z1.len());
        input.push(x);
        input.extend_from_slice(z0);
        input.extend_from_slice(z1);
        let out = self.net_y.spec.forward(&theta_y.theta, &input)?;
        Ok((out[0], out[1]))
    }
}

fn finite(context: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numerical(context, format!("value {v}")))
    }
}

pub(crate) fn check_binary(x: f64) -> Result<()> {
    if x == 0.0 || x == 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidData(format!(
            "binary treatment must be 0 or 1, got {x}"
        )))
    }
}

/// `ln N(y | mean, var)`.
#[inline]
pub fn gaussian_log_density(y: f64, mean: f64, var: f64) -> f64 {
    let r = y - mean;
    -0.5 * (LN_2PI + var.ln()) - 0.5 * r * r / var
}

/// Gaussian head over outputs `[mean, var]`; optionally writes `d ll / d outputs`.
#[inline]
pub(crate) fn gaussian_head(target: f64, out: &[f64], cot: Option<&mut [f64]>) -> f64 {
    let (mean, var) = (out[0], out[1]);
    let r = target - mean;
    if let Some(c) = cot {
        c[0] = r / var;
        c[1] = -0.5 / var + 0.5 * r * r / (var * var);
    }
    -0.5 * (LN_2PI + var.ln()) - 0.5 * r * r / var
}

/// Isotropic Gaussian head over outputs `[means (p) | var]`.
#[inline]
pub(crate) fn isotropic_head(target: &[f64], out: &[f64], cot: Option<&mut [f64]>) -> f64 {
    let p = target.len();
    let var = out[p];
    let mut ss = 0.0;
    match cot {
        Some(c) => {
            for j in 0..p {
                let r = target[j] - out[j];
                c[j] = r / var;
                ss += r * r;
            }
            c[p] = -0.5 * p as f64 / var + 0.5 * ss / (var * var);
        }
        None => {
            for j in 0..p {
                let r = target[j] - out[j];
                ss += r * r;
            }
        }
    }
    -0.5 * p as f64 * (LN_2PI + var.ln()) - 0.5 * ss / var
}

/// `ln P(X = x | xi)` for the logistic link.
#[inline]
pub fn bernoulli_logit_log_prob(x: f64, xi: f64) -> f64 {
    if x == 1.0 {
        -softplus(-xi)
    } else {
        -softplus(xi)
    }
}

/// Binary treatment head: `ln( (1/k) Σ_j P(x | xi_j) )` with
/// `xi_j = mean + sqrt(var) * eta_j`.
pub(crate) fn bernoulli_head(target: f64, out: &[f64], etas: &[f64], cot: Option<&mut [f64]>) -> f64 {
    let (mean, var) = (out[0], out[1]);
    let sd = var.sqrt();
    if etas.len() == 1 {
        let xi = mean + sd * etas[0];
        if let Some(c) = cot {
            let d = target - sigmoid(xi);
            c[0] = d;
            c[1] = d * etas[0] / (2.0 * sd);
        }
        return bernoulli_logit_log_prob(target, xi);
    }
    let logs: Vec<f64> = etas
        .iter()
        .map(|&e| bernoulli_logit_log_prob(target, mean + sd * e))
        .collect();
    let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logs.iter().map(|&l| (l - mx).exp()).sum();
    if let Some(c) = cot {
        c[0] = 0.0;
        c[1] = 0.0;
        for (&l, &e) in logs.iter().zip(etas) {
            let w = (l - mx).exp() / sum;
            let d = target - sigmoid(mean + sd * e);
            c[0] += w * d;
            c[1] += w * d * e / (2.0 * sd);
        }
    }
    mx + (sum / etas.len() as f64).ln()
}

/// Draws the standard-normal noise for a binary treatment likelihood.
pub fn sample_xi_noise<R: Rng + ?Sized>(draws: usize, rng: &mut R) -> Vec<f64> {
    (0..draws).map(|_| rng.sample(StandardNormal)).collect()
}

/// Deterministic encoder `V -> Z`, used only during initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder(pub Mlp);

impl Encoder {
    pub fn new<R: Rng + ?Sized>(p: usize, q: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        Ok(Encoder(Mlp::new_xavier(MlpSpec::new(widths(p, hidden, q), None)?, rng)))
    }

    pub fn forward(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.0.forward(v)
    }
}

/// Deterministic discriminator `Z -> logit`, used only during initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator(pub Mlp);

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(q: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        Ok(Discriminator(Mlp::new_xavier(
            MlpSpec::new(widths(q, hidden, 1), None)?,
            rng,
        )))
    }

    pub fn forward(&self, z: &[f64]) -> Result<f64> {
        Ok(self.0.forward(z)?[0])
    }
}

/// Reusable buffers for evaluating one network at fixed parameters.
#[derive(Debug, Clone)]
pub(crate) struct NetScratch {
    pub trace: Trace,
    pub input: Vec<f64>,
}

impl NetScratch {
    pub fn new(spec: &MlpSpec) -> Self {
        NetScratch {
            trace: Trace::new(spec),
            input: Vec::with_capacity(spec.input_dim()),
        }
    }
}
