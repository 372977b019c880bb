//! Per-individual latent posterior: log-density, gradient steps during
//! training, and random-walk Metropolis–Hastings at estimation time.
//!
//! The target is
//! `ln pi(z) + ln P(v | z) + ln P(x | z0, z2) + ln P(y | x, z0, z1)` with a
//! standard-normal prior. Terms that depend only on the model parameters are
//! left out, so the value is a log-posterior up to an additive constant.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    bernoulli_head, check_binary, gaussian_head, isotropic_head, CausalBgmModel, ModelDraw,
    NetScratch, TreatmentKind,
};
use crate::nn::{AdamState, BackwardScratch};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One observed unit `(x, y, v)`.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub x: f64,
    pub y: f64,
    pub v: &'a [f64],
}

/// The four additive pieces of the latent log-posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPosteriorTerms {
    pub prior: f64,
    pub v: f64,
    pub x: f64,
    pub y: f64,
}

impl LogPosteriorTerms {
    pub fn total(&self) -> f64 {
        self.prior + self.v + self.x + self.y
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("prior", self.prior),
            ("covariate", self.v),
            ("treatment", self.x),
            ("outcome", self.y),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    fn into_result(self) -> Result<f64> {
        match self.non_finite_term() {
            Some(term) => Err(Error::numerical(
                "latent log-posterior",
                format!("non-finite {term} term ({self:?})"),
            )),
            None => Ok(self.total()),
        }
    }
}

/// `ln N(z | 0, I)`.
pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    -0.5 * (z.len() as f64 * LN_2PI + z.iter().map(|a| a * a).sum::<f64>())
}

/// Evaluates the latent log-posterior (and its gradient) for one parameter
/// draw, reusing internal buffers across calls.
pub struct LatentEvaluator<'a> {
    model: &'a CausalBgmModel,
    draw: &'a ModelDraw,
    v: NetScratch,
    x: NetScratch,
    y: NetScratch,
    back_v: BackwardScratch,
    back_x: BackwardScratch,
    back_y: BackwardScratch,
    cot: Vec<f64>,
    in_grad: Vec<f64>,
}

impl<'a> LatentEvaluator<'a> {
    pub fn new(model: &'a CausalBgmModel, draw: &'a ModelDraw) -> Self {
        LatentEvaluator {
            model,
            draw,
            v: NetScratch::new(&model.net_v.spec),
            x: NetScratch::new(&model.net_x.spec),
            y: NetScratch::new(&model.net_y.spec),
            back_v: BackwardScratch::new(&model.net_v.spec),
            back_x: BackwardScratch::new(&model.net_x.spec),
            back_y: BackwardScratch::new(&model.net_y.spec),
            cot: vec![0.0; model.p + 1],
            in_grad: vec![0.0; model.q().max(1) + 1],
        }
    }

    pub fn model(&self) -> &CausalBgmModel {
        self.model
    }

    fn check(&self, obs: &Observation, z: &[f64], xi_noise: &[f64]) -> Result<()> {
        if z.len() != self.model.q() {
            return Err(Error::shape("latent vector", self.model.q(), z.len()));
        }
        if obs.v.len() != self.model.p {
            return Err(Error::shape("covariate vector", self.model.p, obs.v.len()));
        }
        if self.model.treatment_kind == TreatmentKind::Binary {
            check_binary(obs.x)?;
            if xi_noise.is_empty() {
                return Err(Error::InvalidData(
                    "binary treatment likelihood needs at least one xi draw".into(),
                ));
            }
        }
        Ok(())
    }

    /// Term-by-term evaluation. Panics on shape mismatch; see [`latent_log_posterior`]
    /// for the checked entry point.
    pub fn terms(&mut self, obs: &Observation, z: &[f64], xi_noise: &[f64]) -> LogPosteriorTerms {
        let m = self.model;
        let prior = standard_normal_log_density(z);

        m.net_v.spec.forward_trace(&self.draw.v.theta, z, &mut self.v.trace);
        let v = isotropic_head(obs.v, self.v.trace.output(), None);

        m.x_input_into(z, &mut self.x.input);
        m.net_x
            .spec
            .forward_trace(&self.draw.x.theta, &self.x.input, &mut self.x.trace);
        let x = match m.treatment_kind {
            TreatmentKind::Continuous => gaussian_head(obs.x, self.x.trace.output(), None),
            TreatmentKind::Binary => bernoulli_head(obs.x, self.x.trace.output(), xi_noise, None),
        };

        m.y_input_into(obs.x, z, &mut self.y.input);
        m.net_y
            .spec
            .forward_trace(&self.draw.y.theta, &self.y.input, &mut self.y.trace);
        let y = gaussian_head(obs.y, self.y.trace.output(), None);

        LogPosteriorTerms { prior, v, x, y }
    }

    /// Value and `d/dz` of the log-posterior; the gradient is written to `grad`.
    pub fn value_and_grad(
        &mut self,
        obs: &Observation,
        z: &[f64],
        xi_noise: &[f64],
        grad: &mut [f64],
    ) -> LogPosteriorTerms {
        let m = self.model;
        let lat = m.latent;
        let q = m.q();
        let prior = standard_normal_log_density(z);
        for (g, &zi) in grad.iter_mut().zip(z) {
            *g = -zi;
        }

        // covariates: input is the full z
        m.net_v.spec.forward_trace(&self.draw.v.theta, z, &mut self.v.trace);
        let cot = &mut self.cot[..m.p + 1];
        let v = isotropic_head(obs.v, self.v.trace.output(), Some(cot));
        let ig = &mut self.in_grad[..q];
        m.net_v.spec.backward_acc(
            &self.draw.v.theta,
            &self.v.trace,
            cot,
            None,
            Some(ig),
            &mut self.back_v,
        );
        for (g, &d) in grad.iter_mut().zip(ig.iter()) {
            *g += d;
        }

        // treatment: input is [z0 | z2]
        m.x_input_into(z, &mut self.x.input);
        m.net_x
            .spec
            .forward_trace(&self.draw.x.theta, &self.x.input, &mut self.x.trace);
        let cot = &mut self.cot[..2];
        let x = match m.treatment_kind {
            TreatmentKind::Continuous => gaussian_head(obs.x, self.x.trace.output(), Some(cot)),
            TreatmentKind::Binary => {
                bernoulli_head(obs.x, self.x.trace.output(), xi_noise, Some(cot))
            }
        };
        let ig = &mut self.in_grad[..lat.q0 + lat.q2];
        m.net_x.spec.backward_acc(
            &self.draw.x.theta,
            &self.x.trace,
            cot,
            None,
            Some(ig),
            &mut self.back_x,
        );
        for (k, idx) in lat.z0().chain(lat.z2()).enumerate() {
            grad[idx] += ig[k];
        }

        // outcome: input is [x | z0 | z1]
        m.y_input_into(obs.x, z, &mut self.y.input);
        m.net_y
            .spec
            .forward_trace(&self.draw.y.theta, &self.y.input, &mut self.y.trace);
        let cot = &mut self.cot[..2];
        let y = gaussian_head(obs.y, self.y.trace.output(), Some(cot));
        let ig = &mut self.in_grad[..1 + lat.q0 + lat.q1];
        m.net_y.spec.backward_acc(
            &self.draw.y.theta,
            &self.y.trace,
            cot,
            None,
            Some(ig),
            &mut self.back_y,
        );
        for (k, idx) in lat.z0().chain(lat.z1()).enumerate() {
            grad[idx] += ig[k + 1];
        }

        LogPosteriorTerms { prior, v, x, y }
    }
}

/// Checked evaluation of the latent log-posterior.
pub fn latent_log_posterior(
    model: &CausalBgmModel,
    obs: &Observation,
    z: &[f64],
    draw: &ModelDraw,
    xi_noise: &[f64],
) -> Result<f64> {
    let mut ev = LatentEvaluator::new(model, draw);
    ev.check(obs, z, xi_noise)?;
    ev.terms(obs, z, xi_noise).into_result()
}

/// Checked evaluation of the latent log-posterior and its gradient in `z`.
pub fn latent_log_posterior_grad(
    model: &CausalBgmModel,
    obs: &Observation,
    z: &[f64],
    draw: &ModelDraw,
    xi_noise: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let mut ev = LatentEvaluator::new(model, draw);
    ev.check(obs, z, xi_noise)?;
    let mut grad = vec![0.0; z.len()];
    let value = ev.value_and_grad(obs, z, xi_noise, &mut grad).into_result()?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::numerical(
            "latent log-posterior gradient",
            format!("non-finite entry {} at index {i}", grad[i]),
        ));
    }
    Ok((value, grad))
}

/// Latent vector of one individual, persisted across training epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub owner: usize,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Updated,
    /// The gradient was not finite; `z` was redrawn from the prior.
    Reset,
}

/// One Adam ascent step on the latent log-posterior for a single individual.
///
/// A non-finite gradient does not abort: `z` is redrawn from the prior, the
/// optimizer moments are cleared and a warning is logged.
pub fn latent_sgd_step<R: Rng + ?Sized>(
    ev: &mut LatentEvaluator,
    state: &mut LatentState,
    obs: &Observation,
    adam: &mut AdamState,
    xi_noise: &[f64],
    rng: &mut R,
) -> Result<(StepOutcome, LogPosteriorTerms)> {
    ev.check(obs, &state.z, xi_noise)?;
    let mut grad = vec![0.0; state.z.len()];
    let terms = ev.value_and_grad(obs, &state.z, xi_noise, &mut grad);
    if terms.non_finite_term().is_some() || grad.iter().any(|g| !g.is_finite()) {
        log::warn!(
            "individual {}: non-finite latent gradient, resetting z from the prior",
            state.owner
        );
        for zi in &mut state.z {
            *zi = rng.sample(StandardNormal);
        }
        *adam = AdamState::new(adam.config, state.z.len());
        return Ok((StepOutcome::Reset, terms));
    }
    adam.ascend(&mut state.z, &grad)?;
    Ok((StepOutcome::Updated, terms))
}

/// Random-walk Metropolis–Hastings settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    pub burn_in: usize,
    pub keep: usize,
    pub proposal_std: f64,
    /// Robbins–Monro adaptation of the proposal scale during burn-in only.
    pub tune_proposal: bool,
    pub target_acceptance: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            burn_in: 5000,
            keep: 3000,
            proposal_std: 1.0,
            tune_proposal: false,
            target_acceptance: 0.3,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.keep == 0 {
            return Err(Error::InvalidConfig("mcmc keep must be positive".into()));
        }
        if !(self.proposal_std >= 0.0 && self.proposal_std.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "proposal std must be finite and non-negative, got {}",
                self.proposal_std
            )));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "target acceptance must be in (0, 1), got {}",
                self.target_acceptance
            )));
        }
        Ok(())
    }
}

/// Retained draws of one chain, row-major `keep × q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorChain {
    pub owner: usize,
    pub dim: usize,
    pub draws: Vec<f64>,
    /// Accepted proposals after burn-in.
    pub accepted: usize,
    /// Proposals made after burn-in.
    pub proposed: usize,
    pub burn_in: usize,
    /// Proposal scale in effect after burn-in.
    pub proposal_std: f64,
}

impl PosteriorChain {
    pub fn len(&self) -> usize {
        self.draws.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn draw(&self, s: usize) -> &[f64] {
        &self.draws[s * self.dim..(s + 1) * self.dim]
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    /// One row per draw, header `z1,...,zq`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record((1..=self.dim).map(|k| format!("z{k}")))?;
        for s in 0..self.len() {
            w.write_record(self.draw(s).iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("chain csv", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// A log-density for the random-walk sampler. Targets may consume randomness
/// (for unbiased likelihood estimates); the current state's value is kept, so
/// that case runs as a pseudo-marginal sampler.
pub trait LogTarget {
    fn dim(&self) -> usize;
    fn log_density<R: Rng + ?Sized>(&mut self, z: &[f64], rng: &mut R) -> f64;
}

/// Gaussian random-walk Metropolis–Hastings.
pub fn random_walk_metropolis<T: LogTarget, R: Rng + ?Sized>(
    target: &mut T,
    init: &[f64],
    owner: usize,
    config: &McmcConfig,
    rng: &mut R,
) -> Result<PosteriorChain> {
    config.validate()?;
    let dim = target.dim();
    if init.len() != dim {
        return Err(Error::shape("chain initial state", dim, init.len()));
    }
    let mut current = init.to_vec();
    let mut current_lp = target.log_density(&current, rng);
    if !current_lp.is_finite() {
        return Err(Error::numerical(
            "metropolis-hastings initial state",
            format!("log density {current_lp} at {current:?}"),
        ));
    }
    let mut log_std = config.proposal_std.ln();
    let mut std = config.proposal_std;
    let mut proposal = vec![0.0; dim];
    let mut draws = Vec::with_capacity(config.keep * dim);
    let (mut accepted, mut proposed, mut rejected_run) = (0usize, 0usize, 0usize);
    let stall_limit = 10 * config.keep;

    for it in 0..config.burn_in + config.keep {
        for (p, &c) in proposal.iter_mut().zip(&current) {
            let e: f64 = rng.sample(StandardNormal);
            *p = c + std * e;
        }
        let lp = target.log_density(&proposal, rng);
        let u: f64 = rng.random();
        let accept = lp.is_finite() && u.ln() < lp - current_lp;
        if accept {
            current.copy_from_slice(&proposal);
            current_lp = lp;
            rejected_run = 0;
        } else {
            rejected_run += 1;
            if rejected_run > stall_limit {
                return Err(Error::ChainStalled {
                    rejections: rejected_run,
                    log_density: current_lp,
                    proposal_std: std,
                });
            }
        }
        if it < config.burn_in {
            if config.tune_proposal && config.proposal_std > 0.0 {
                let rate = 1.0 / ((it + 1) as f64).powf(0.6);
                let a = if accept { 1.0 } else { 0.0 };
                log_std += rate * (a - config.target_acceptance);
                std = log_std.exp();
            }
        } else {
            proposed += 1;
            accepted += accept as usize;
            draws.extend_from_slice(&current);
        }
    }
    Ok(PosteriorChain {
        owner,
        dim,
        draws,
        accepted,
        proposed,
        burn_in: config.burn_in,
        proposal_std: std,
    })
}

/// Latent posterior of one individual as an MH target. Binary treatments
/// draw fresh `xi` noise per evaluation.
pub struct LatentTarget<'a, 'o> {
    ev: LatentEvaluator<'a>,
    obs: Observation<'o>,
    xi_draws: usize,
    xi: Vec<f64>,
}

impl<'a, 'o> LatentTarget<'a, 'o> {
    pub fn new(
        model: &'a CausalBgmModel,
        draw: &'a ModelDraw,
        obs: Observation<'o>,
        xi_draws: usize,
    ) -> Result<Self> {
        let ev = LatentEvaluator::new(model, draw);
        let xi_draws = xi_draws.max(1);
        ev.check(&obs, &vec![0.0; model.q()], &vec![0.0; xi_draws])?;
        Ok(LatentTarget {
            ev,
            obs,
            xi_draws,
            xi: vec![0.0; xi_draws],
        })
    }
}

impl LogTarget for LatentTarget<'_, '_> {
    fn dim(&self) -> usize {
        self.ev.model.q()
    }

    fn log_density<R: Rng + ?Sized>(&mut self, z: &[f64], rng: &mut R) -> f64 {
        if self.ev.model.treatment_kind == TreatmentKind::Binary {
            for e in self.xi.iter_mut().take(self.xi_draws) {
                *e = rng.sample(StandardNormal);
            }
        }
        let t = self.ev.terms(&self.obs, z, &self.xi);
        let v = t.total();
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }
}

/// Runs one MH chain on the latent posterior of `obs` under a fixed parameter draw.
#[allow(clippy::too_many_arguments)]
pub fn mh_sample<R: Rng + ?Sized>(
    model: &CausalBgmModel,
    obs: &Observation,
    draw: &ModelDraw,
    init: &[f64],
    owner: usize,
    config: &McmcConfig,
    xi_draws: usize,
    rng: &mut R,
) -> Result<PosteriorChain> {
    let mut target = LatentTarget::new(model, draw, *obs, xi_draws)?;
    random_walk_metropolis(&mut target, init, owner, config, rng)
}
