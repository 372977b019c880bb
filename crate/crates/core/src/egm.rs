//! Encoder-based initialization.
//!
//! An encoder `E: v -> z` is trained jointly with the three generative
//! networks so that `z = E(v)` explains `(v, x, y)`, while a discriminator
//! pushes the distribution of `E(V)` toward `N(0, I_q)` (non-saturating GAN
//! loss, one discriminator step per encoder step). Variance outputs carry an
//! L2 penalty. Afterwards each latent vector is set to `E(v_i)` and the
//! encoder and discriminator are dropped.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    bernoulli_head, gaussian_head, isotropic_head, CausalBgmModel, Discriminator, Encoder,
    TreatmentKind,
};
use crate::nn::{sigmoid, softplus, AdamConfig, AdamState, BackwardScratch, Trace};
use crate::trainer::{elbo_step, NetOptimizer, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgmConfig {
    pub batches: usize,
    /// Adam step size of the encoder and discriminator.
    pub lr: f64,
    pub encoder_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    /// Weight of the L2 penalty on predicted variances.
    pub variance_l2_weight: f64,
    /// Weight of the adversarial term in the encoder loss.
    pub adversarial_weight: f64,
    /// Trace sampling interval, in batches.
    pub log_every: usize,
}

impl Default for EgmConfig {
    fn default() -> Self {
        EgmConfig {
            batches: 30_000,
            lr: 1e-4,
            encoder_hidden: vec![64, 64, 64],
            discriminator_hidden: vec![64, 64, 64],
            variance_l2_weight: 1e-3,
            adversarial_weight: 1.0,
            log_every: 500,
        }
    }
}

impl EgmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("egm lr must be positive, got {}", self.lr)));
        }
        if !(self.variance_l2_weight >= 0.0 && self.adversarial_weight >= 0.0) {
            return Err(Error::InvalidConfig("egm weights must be non-negative".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig("egm log interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EgmReport {
    pub batches: usize,
    /// Sampled discriminator loss.
    pub discriminator_loss: Vec<f64>,
    /// Sampled mean per-example log-likelihood of `(v, x, y)` given `E(v)`.
    pub reconstruction: Vec<f64>,
    /// Encoder outputs for every individual, row-major `n × q`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latents: Option<Vec<f64>>,
}

fn penalize(out: &[f64], cot: &mut [f64], slot: usize, weight: f64) -> f64 {
    let var = out[slot];
    cot[slot] -= 2.0 * weight * var;
    weight * var * var
}

/// Runs the initialization phase. With zero batches nothing is changed and
/// no latents are returned.
#[allow(clippy::too_many_arguments)]
pub fn initialize<R: Rng + ?Sized>(
    model: &mut CausalBgmModel,
    opt_v: &mut NetOptimizer,
    opt_x: &mut NetOptimizer,
    opt_y: &mut NetOptimizer,
    data: &Dataset,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<EgmReport> {
    let cfg = &config.egm;
    cfg.validate()?;
    let mut report = EgmReport::default();
    if cfg.batches == 0 {
        return Ok(report);
    }
    let n = data.len();
    let p = data.p;
    let q = model.q();
    let lat = model.latent;
    let kind = model.treatment_kind;
    let mode = config.perturbation;
    let lambda = cfg.variance_l2_weight;
    let xi_draws = config.xi_draws;

    let mut encoder = Encoder::new(p, q, &cfg.encoder_hidden, rng)?;
    let mut disc = Discriminator::new(q, &cfg.discriminator_hidden, rng)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut enc_opt = AdamState::new(adam, encoder.0.spec.num_params());
    let mut disc_opt = AdamState::new(adam, disc.0.spec.num_params());
    let b = config.batch_size.min(n);
    let kl_weight = b as f64 / n as f64;

    let mut enc_traces: Vec<Trace> = (0..b).map(|_| Trace::new(&encoder.0.spec)).collect();
    let mut disc_trace = Trace::new(&disc.0.spec);
    let mut enc_scratch = BackwardScratch::new(&encoder.0.spec);
    let mut disc_scratch = BackwardScratch::new(&disc.0.spec);
    let mut enc_grad = vec![0.0; encoder.0.spec.num_params()];
    let mut disc_grad = vec![0.0; disc.0.spec.num_params()];
    let mut dz = vec![0.0; b * q];
    let mut z = vec![0.0; b * q];
    let mut real = vec![0.0; q];
    let mut dd = vec![0.0; q];

    for step in 0..cfg.batches {
        let members = index::sample(rng, n, b).into_vec();
        for (k, &i) in members.iter().enumerate() {
            encoder
                .0
                .spec
                .forward_trace(&encoder.0.params, data.row(i), &mut enc_traces[k]);
            z[k * q..(k + 1) * q].copy_from_slice(enc_traces[k].output());
        }

        // discriminator: real draws from the prior, fake from the encoder
        disc_grad.iter_mut().for_each(|g| *g = 0.0);
        let mut d_loss = 0.0;
        for k in 0..b {
            real.iter_mut().for_each(|r| *r = rng.sample(StandardNormal));
            disc.0.spec.forward_trace(&disc.0.params, &real, &mut disc_trace);
            let d = disc_trace.output()[0];
            d_loss += softplus(-d);
            let c = [-(1.0 - sigmoid(d)) / b as f64];
            disc.0
                .spec
                .backward_acc(&disc.0.params, &disc_trace, &c, Some(&mut disc_grad), None, &mut disc_scratch);

            disc.0
                .spec
                .forward_trace(&disc.0.params, &z[k * q..(k + 1) * q], &mut disc_trace);
            let d = disc_trace.output()[0];
            d_loss += softplus(d);
            let c = [sigmoid(d) / b as f64];
            disc.0
                .spec
                .backward_acc(&disc.0.params, &disc_trace, &c, Some(&mut disc_grad), None, &mut disc_scratch);
        }
        d_loss /= b as f64;
        if !d_loss.is_finite() {
            return Err(Error::numerical(
                "egm discriminator",
                format!(
                    "loss diverged at batch {step}; recent losses {:?}",
                    report.discriminator_loss.iter().rev().take(5).collect::<Vec<_>>()
                ),
            ));
        }
        disc_opt.step(&mut disc.0.params, &disc_grad)?;

        // generative networks, with likelihood gradients flowing back to z
        dz.iter_mut().for_each(|g| *g = 0.0);
        let mut recon = 0.0;

        let mut inputs = Vec::with_capacity(b * (lat.q0 + lat.q2));
        for k in 0..b {
            let zk = &z[k * q..(k + 1) * q];
            inputs.extend_from_slice(&zk[lat.z0()]);
            inputs.extend_from_slice(&zk[lat.z2()]);
        }
        let xi: Vec<f64> = match kind {
            TreatmentKind::Binary => (0..b * xi_draws).map(|_| rng.sample(StandardNormal)).collect(),
            TreatmentKind::Continuous => Vec::new(),
        };
        let sx = elbo_step(
            &mut model.net_x,
            opt_x,
            &inputs,
            |k, out, cot| {
                let x = data.x[members[k]];
                let ll = match kind {
                    TreatmentKind::Continuous => gaussian_head(x, out, Some(cot)),
                    TreatmentKind::Binary => {
                        bernoulli_head(x, out, &xi[k * xi_draws..(k + 1) * xi_draws], Some(cot))
                    }
                };
                ll - penalize(out, cot, 1, lambda)
            },
            1.0,
            kl_weight,
            mode,
            true,
            rng,
        )?;
        recon += sx.loglik;
        let g = sx.input_grads.expect("input gradients requested");
        let w = lat.q0 + lat.q2;
        for k in 0..b {
            for (c, idx) in lat.z0().chain(lat.z2()).enumerate() {
                dz[k * q + idx] += g[k * w + c];
            }
        }

        let sv = elbo_step(
            &mut model.net_v,
            opt_v,
            &z,
            |k, out, cot| isotropic_head(data.row(members[k]), out, Some(cot)) - penalize(out, cot, p, lambda),
            1.0,
            kl_weight,
            mode,
            true,
            rng,
        )?;
        recon += sv.loglik;
        for (a, g) in dz.iter_mut().zip(sv.input_grads.expect("input gradients requested")) {
            *a += g;
        }

        let mut inputs = Vec::with_capacity(b * (1 + lat.q0 + lat.q1));
        for (k, &i) in members.iter().enumerate() {
            let zk = &z[k * q..(k + 1) * q];
            inputs.push(data.x[i]);
            inputs.extend_from_slice(&zk[lat.z0()]);
            inputs.extend_from_slice(&zk[lat.z1()]);
        }
        let sy = elbo_step(
            &mut model.net_y,
            opt_y,
            &inputs,
            |k, out, cot| gaussian_head(data.y[members[k]], out, Some(cot)) - penalize(out, cot, 1, lambda),
            1.0,
            kl_weight,
            mode,
            true,
            rng,
        )?;
        recon += sy.loglik;
        let g = sy.input_grads.expect("input gradients requested");
        let w = 1 + lat.q0 + lat.q1;
        for k in 0..b {
            for (c, idx) in lat.z0().chain(lat.z1()).enumerate() {
                dz[k * q + idx] += g[k * w + 1 + c];
            }
        }

        // encoder: descend on -(mean log-likelihood) - weight * mean log D(E(v))
        enc_grad.iter_mut().for_each(|g| *g = 0.0);
        for k in 0..b {
            let zk = &z[k * q..(k + 1) * q];
            disc.0.spec.forward_trace(&disc.0.params, zk, &mut disc_trace);
            let d = disc_trace.output()[0];
            disc.0.spec.backward_acc(
                &disc.0.params,
                &disc_trace,
                &[1.0],
                None,
                Some(&mut dd),
                &mut disc_scratch,
            );
            let adv = cfg.adversarial_weight * (1.0 - sigmoid(d));
            let cot: Vec<f64> = (0..q)
                .map(|j| -(dz[k * q + j] + adv * dd[j]) / b as f64)
                .collect();
            encoder.0.spec.backward_acc(
                &encoder.0.params,
                &enc_traces[k],
                &cot,
                Some(&mut enc_grad),
                None,
                &mut enc_scratch,
            );
        }
        enc_opt.step(&mut encoder.0.params, &enc_grad)?;

        if step % cfg.log_every == 0 || step + 1 == cfg.batches {
            let r = recon / b as f64;
            log::debug!("egm batch {step}: discriminator loss {d_loss:.4}, reconstruction {r:.4}");
            report.discriminator_loss.push(d_loss);
            report.reconstruction.push(r);
        }
    }
    report.batches = cfg.batches;

    let mut latents = Vec::with_capacity(n * q);
    let mut trace = Trace::new(&encoder.0.spec);
    for i in 0..n {
        encoder.0.spec.forward_trace(&encoder.0.params, data.row(i), &mut trace);
        latents.extend_from_slice(trace.output());
    }
    if let Some(k) = latents.iter().position(|a| !a.is_finite()) {
        return Err(Error::numerical(
            "egm encoder",
            format!("non-finite latent for individual {}", k / q),
        ));
    }
    report.latents = Some(latents);
    Ok(report)
}
