//! The alternating training loop.
//!
//! Every mini-batch first moves each member's latent vector one Adam step up
//! its log-posterior under a single parameter draw, then takes one ELBO step
//! on the treatment, covariate and outcome networks, in that order, using the
//! updated latents.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bnn::{FlipoutNoise, Perturbation, VariationalNet, DEFAULT_INIT_SIGMA};
use crate::data::Dataset;
use crate::egm::{self, EgmConfig, EgmReport};
use crate::error::{Error, Result};
use crate::latent::{latent_sgd_step, LatentEvaluator, LatentState, StepOutcome};
use crate::model::{
    bernoulli_head, gaussian_head, isotropic_head, Architecture, CausalBgmModel, LatentConfig,
    TreatmentKind,
};
use crate::nn::{AdamConfig, AdamState};
use crate::rng::{self, BgmRng};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    #[default]
    Egm,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Adam step size for the variational parameters.
    pub lr: f64,
    /// Adam step size for the per-individual latent vectors.
    pub latent_lr: f64,
    /// Training epochs; when unset, 100 after EGM initialization and 500 otherwise.
    pub epochs: Option<usize>,
    pub init: InitStrategy,
    pub egm: EgmConfig,
    pub seed: u64,
    pub latent: LatentConfig,
    pub treatment_kind: TreatmentKind,
    pub architecture: Architecture,
    /// Initial standard deviation of every variational factor.
    pub init_sigma: f64,
    pub perturbation: Perturbation,
    /// Adam steps on each latent vector per mini-batch visit.
    pub latent_steps: usize,
    /// Draws of `xi` averaged in the binary treatment likelihood.
    pub xi_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-4,
            latent_lr: 1e-4,
            epochs: None,
            init: InitStrategy::Egm,
            egm: EgmConfig::default(),
            seed: 0,
            latent: LatentConfig::default(),
            treatment_kind: TreatmentKind::Continuous,
            architecture: Architecture::default(),
            init_sigma: DEFAULT_INIT_SIGMA,
            perturbation: Perturbation::Flipout,
            latent_steps: 1,
            xi_draws: 1,
        }
    }
}

impl TrainConfig {
    pub fn resolved_epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.init {
            InitStrategy::Egm => 100,
            InitStrategy::Random => 500,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        positive(self.lr, "lr")?;
        positive(self.latent_lr, "latent lr")?;
        positive(self.init_sigma, "init sigma")?;
        if self.xi_draws == 0 {
            return Err(Error::InvalidConfig("xi draws must be positive".into()));
        }
        self.latent.validate()?;
        self.egm.validate()?;
        Ok(())
    }
}

/// Adam states for the mean and scale vectors of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetOptimizer {
    pub mu: AdamState,
    pub rho: AdamState,
}

impl NetOptimizer {
    pub fn new(config: AdamConfig, net: &VariationalNet) -> Self {
        NetOptimizer {
            mu: AdamState::new(config, net.num_params()),
            rho: AdamState::new(config, net.num_params()),
        }
    }
}

/// Outcome of one ELBO step, valued at the pre-step parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboStep {
    pub elbo: f64,
    /// Unscaled batch log-likelihood sum.
    pub loglik: f64,
    pub kl: f64,
    /// Row-major gradients of the scaled log-likelihood with respect to the inputs.
    pub input_grads: Option<Vec<f64>>,
}

/// One Monte Carlo ELBO ascent step over a row-major input batch.
///
/// `loglik(n, output, cotangent)` returns the log-likelihood of example `n`
/// and writes its gradient with respect to the network output. The objective
/// is `loglik_scale * Σ_n loglik - kl_weight * KL`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_step<R, F>(
    net: &mut VariationalNet,
    opt: &mut NetOptimizer,
    inputs: &[f64],
    mut loglik: F,
    loglik_scale: f64,
    kl_weight: f64,
    mode: Perturbation,
    want_input_grads: bool,
    rng: &mut R,
) -> Result<ElboStep>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &[f64], &mut [f64]) -> f64,
{
    let d_in = net.spec.input_dim();
    let d_out = net.spec.output_dim();
    if inputs.is_empty() || !inputs.len().is_multiple_of(d_in) {
        return Err(Error::InvalidData(format!(
            "elbo step needs a nonempty batch of width {d_in}, got {} values",
            inputs.len()
        )));
    }
    let batch = inputs.len() / d_in;
    let noise = FlipoutNoise::sample(&net.spec, batch, mode, rng);
    let pass = net.pass(inputs, &noise)?;
    let mut cot = vec![0.0; batch * d_out];
    let mut ll = 0.0;
    for n in 0..batch {
        ll += loglik(n, pass.output(n), &mut cot[n * d_out..(n + 1) * d_out]);
    }
    let kl = net.kl();
    let elbo = loglik_scale * ll - kl_weight * kl;
    if !elbo.is_finite() {
        return Err(Error::numerical(
            "elbo",
            format!("log-likelihood {ll}, KL {kl}"),
        ));
    }
    let grads = pass.backward(net, &noise, &cot, want_input_grads)?;
    let (g_mu, g_rho) = net.elbo_gradient(&pass, &noise, &grads, loglik_scale, kl_weight);
    opt.mu.ascend(&mut net.mu, &g_mu)?;
    opt.rho.ascend(&mut net.rho, &g_rho)?;
    let input_grads = grads.inputs.map(|mut g| {
        g.iter_mut().for_each(|a| *a *= loglik_scale);
        g
    });
    Ok(ElboStep {
        elbo,
        loglik: ll,
        kl,
        input_grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Covariate,
    Treatment,
    Outcome,
}

/// Points inside a mini-batch step at which an observer is called.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    BatchStart,
    LatentsUpdated,
    NetUpdated(NetKind),
}

/// Per-epoch traces.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-batch ELBO of each network.
    pub elbo_treatment: Vec<f64>,
    pub elbo_covariate: Vec<f64>,
    pub elbo_outcome: Vec<f64>,
    /// Mean latent log-posterior over visited individuals, before their step.
    pub latent_log_posterior: Vec<f64>,
    /// Latent vectors redrawn after a non-finite gradient.
    pub latent_resets: Vec<usize>,
    pub wall_time_secs: f64,
    pub egm: Option<EgmReport>,
    pub config: Option<TrainConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub elbo_treatment: f64,
    pub elbo_covariate: f64,
    pub elbo_outcome: f64,
    pub latent_log_posterior: f64,
    pub latent_resets: usize,
}

/// Full training state. Everything needed to resume bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: CausalBgmModel,
    /// Row-major `n × q` latent matrix.
    pub latents: Vec<f64>,
    pub n: usize,
    latent_opt: Vec<AdamState>,
    opt_v: NetOptimizer,
    opt_x: NetOptimizer,
    opt_y: NetOptimizer,
    rng: BgmRng,
    /// Completed epochs.
    pub epoch: usize,
    pub report: TrainReport,
}

/// Versioned on-disk training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub trainer: Trainer,
}

impl Trainer {
    /// Random initialization: Xavier means for every network and latents
    /// drawn from the prior.
    pub fn new(data: &Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidData("cannot train on an empty dataset".into()));
        }
        if data.treatment_kind != config.treatment_kind {
            return Err(Error::InvalidConfig(format!(
                "dataset treatment is {:?} but the configuration says {:?}",
                data.treatment_kind, config.treatment_kind
            )));
        }
        let mut init_rng = rng::stream_rng(config.seed, rng::INIT);
        let model = CausalBgmModel::with_init_sigma(
            config.latent,
            config.treatment_kind,
            data.p,
            &config.architecture,
            config.init_sigma,
            &mut init_rng,
        )?;
        let q = model.q();
        let latents = (0..data.len() * q)
            .map(|_| init_rng.sample(StandardNormal))
            .collect();
        let adam = AdamConfig::with_lr(config.lr);
        Ok(Trainer {
            latent_opt: vec![AdamState::new(AdamConfig::with_lr(config.latent_lr), q); data.len()],
            opt_v: NetOptimizer::new(adam, &model.net_v),
            opt_x: NetOptimizer::new(adam, &model.net_x),
            opt_y: NetOptimizer::new(adam, &model.net_y),
            rng: rng::stream_rng(config.seed, rng::TRAIN),
            n: data.len(),
            model,
            latents,
            config,
            epoch: 0,
            report: TrainReport::default(),
        })
    }

    pub fn q(&self) -> usize {
        self.model.q()
    }

    pub fn latent(&self, i: usize) -> &[f64] {
        let q = self.q();
        &self.latents[i * q..(i + 1) * q]
    }

    pub fn latent_states(&self) -> Vec<LatentState> {
        (0..self.n)
            .map(|i| LatentState {
                owner: i,
                z: self.latent(i).to_vec(),
            })
            .collect()
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.len() != self.n {
            return Err(Error::shape("training set size", self.n, data.len()));
        }
        if data.p != self.model.p {
            return Err(Error::shape("covariate dimension", self.model.p, data.p));
        }
        Ok(())
    }

    /// Runs the EGM initialization and replaces every latent vector by the
    /// encoder output. A configuration with zero EGM batches leaves the
    /// random initialization untouched.
    pub fn egm_initialize(&mut self, data: &Dataset) -> Result<EgmReport> {
        self.check_data(data)?;
        let mut egm_rng = rng::stream_rng(self.config.seed, "egm");
        let report = egm::initialize(
            &mut self.model,
            &mut self.opt_v,
            &mut self.opt_x,
            &mut self.opt_y,
            data,
            &self.config,
            &mut egm_rng,
        )?;
        if let Some(z) = &report.latents {
            self.latents.clone_from(z);
        }
        let slim = EgmReport {
            latents: None,
            ..report.clone()
        };
        self.report.egm = Some(slim);
        Ok(report)
    }

    /// Runs the configured number of epochs.
    pub fn fit(&mut self, data: &Dataset, epochs: usize) -> Result<()> {
        let start = Instant::now();
        for _ in 0..epochs {
            let s = self.run_epoch(data)?;
            log::info!(
                "epoch {}: elbo x {:.3} v {:.3} y {:.3}, latent log-posterior {:.3}",
                s.epoch,
                s.elbo_treatment,
                s.elbo_covariate,
                s.elbo_outcome,
                s.latent_log_posterior
            );
        }
        self.report.wall_time_secs += start.elapsed().as_secs_f64();
        self.report.config = Some(self.config.clone());
        Ok(())
    }

    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        self.run_epoch_observed(data, &mut |_, _| {})
    }

    /// One epoch over a fresh random permutation of the individuals.
    pub fn run_epoch_observed(
        &mut self,
        data: &Dataset,
        observer: &mut dyn FnMut(Stage, &Trainer),
    ) -> Result<EpochStats> {
        self.check_data(data)?;
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut self.rng);
        let batches: Vec<Vec<usize>> = order
            .chunks(self.config.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        self.run_batches(data, &batches, observer)
    }

    /// One epoch over caller-supplied batches.
    pub fn run_batches(
        &mut self,
        data: &Dataset,
        batches: &[Vec<usize>],
        observer: &mut dyn FnMut(Stage, &Trainer),
    ) -> Result<EpochStats> {
        self.check_data(data)?;
        let epoch = self.epoch;
        let (mut ex, mut ev, mut ey, mut lp) = (0.0, 0.0, 0.0, 0.0);
        let mut visits = 0usize;
        let mut resets = 0usize;
        for (b, members) in batches.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            if let Some(&i) = members.iter().find(|&&i| i >= self.n) {
                return Err(Error::InvalidData(format!(
                    "batch member {i} out of range for {} individuals",
                    self.n
                )));
            }
            observer(Stage::BatchStart, self);
            let (s, r) = self.latent_updates(data, members).map_err(|e| at(e, epoch, b))?;
            lp += s;
            resets += r;
            visits += members.len();
            observer(Stage::LatentsUpdated, self);
            let (x, v, y) = self.parameter_updates(data, members, observer).map_err(|e| at(e, epoch, b))?;
            ex += x;
            ev += v;
            ey += y;
        }
        let nb = batches.iter().filter(|b| !b.is_empty()).count().max(1) as f64;
        let stats = EpochStats {
            epoch,
            elbo_treatment: ex / nb,
            elbo_covariate: ev / nb,
            elbo_outcome: ey / nb,
            latent_log_posterior: lp / visits.max(1) as f64,
            latent_resets: resets,
        };
        self.report.elbo_treatment.push(stats.elbo_treatment);
        self.report.elbo_covariate.push(stats.elbo_covariate);
        self.report.elbo_outcome.push(stats.elbo_outcome);
        self.report.latent_log_posterior.push(stats.latent_log_posterior);
        self.report.latent_resets.push(resets);
        self.epoch += 1;
        Ok(stats)
    }

    /// Step (a): latent ascent for each member under one shared parameter draw.
    fn latent_updates(&mut self, data: &Dataset, members: &[usize]) -> Result<(f64, usize)> {
        let draw = self.model.draw(&mut self.rng);
        let q = self.model.q();
        let mut ev = LatentEvaluator::new(&self.model, &draw);
        let mut xi = vec![0.0; self.config.xi_draws];
        let mut sum = 0.0;
        let mut resets = 0;
        for &i in members {
            // per-individual noise keeps results independent of batch order
            let mut ind_rng = rng::item_rng(
                self.config.seed,
                "latent",
                ((self.epoch as u64) << 32) | i as u64,
            );
            let obs = data.observation(i);
            let mut state = LatentState {
                owner: i,
                z: self.latents[i * q..(i + 1) * q].to_vec(),
            };
            for step in 0..self.config.latent_steps {
                if self.model.treatment_kind == TreatmentKind::Binary {
                    xi.iter_mut().for_each(|e| *e = ind_rng.sample(StandardNormal));
                }
                let (outcome, terms) = latent_sgd_step(
                    &mut ev,
                    &mut state,
                    &obs,
                    &mut self.latent_opt[i],
                    &xi,
                    &mut ind_rng,
                )?;
                if step == 0 {
                    sum += terms.total();
                }
                if outcome == StepOutcome::Reset {
                    resets += 1;
                }
            }
            self.latents[i * q..(i + 1) * q].copy_from_slice(&state.z);
        }
        Ok((sum, resets))
    }

    /// Step (b): ELBO steps on the treatment, covariate and outcome networks.
    fn parameter_updates(
        &mut self,
        data: &Dataset,
        members: &[usize],
        observer: &mut dyn FnMut(Stage, &Trainer),
    ) -> Result<(f64, f64, f64)> {
        let b = members.len();
        let kl_weight = b as f64 / self.n as f64;
        let mode = self.config.perturbation;
        let q = self.model.q();
        let lat = self.model.latent;
        let kind = self.model.treatment_kind;

        let mut inputs = Vec::with_capacity(b * (lat.q0 + lat.q2));
        for &i in members {
            let z = &self.latents[i * q..(i + 1) * q];
            inputs.extend_from_slice(&z[lat.z0()]);
            inputs.extend_from_slice(&z[lat.z2()]);
        }
        let xi_draws = self.config.xi_draws;
        let xi: Vec<f64> = match kind {
            TreatmentKind::Binary => (0..b * xi_draws)
                .map(|_| self.rng.sample(StandardNormal))
                .collect(),
            TreatmentKind::Continuous => Vec::new(),
        };
        let ex = elbo_step(
            &mut self.model.net_x,
            &mut self.opt_x,
            &inputs,
            |n, out, cot| {
                let x = data.x[members[n]];
                match kind {
                    TreatmentKind::Continuous => gaussian_head(x, out, Some(cot)),
                    TreatmentKind::Binary => bernoulli_head(
                        x,
                        out,
                        &xi[n * xi_draws..(n + 1) * xi_draws],
                        Some(cot),
                    ),
                }
            },
            1.0,
            kl_weight,
            mode,
            false,
            &mut self.rng,
        )?;
        observer(Stage::NetUpdated(NetKind::Treatment), self);

        let mut inputs = Vec::with_capacity(b * q);
        for &i in members {
            inputs.extend_from_slice(&self.latents[i * q..(i + 1) * q]);
        }
        let ev = elbo_step(
            &mut self.model.net_v,
            &mut self.opt_v,
            &inputs,
            |n, out, cot| isotropic_head(data.row(members[n]), out, Some(cot)),
            1.0,
            kl_weight,
            mode,
            false,
            &mut self.rng,
        )?;
        observer(Stage::NetUpdated(NetKind::Covariate), self);

        let mut inputs = Vec::with_capacity(b * (1 + lat.q0 + lat.q1));
        for &i in members {
            let z = &self.latents[i * q..(i + 1) * q];
            inputs.push(data.x[i]);
            inputs.extend_from_slice(&z[lat.z0()]);
            inputs.extend_from_slice(&z[lat.z1()]);
        }
        let ey = elbo_step(
            &mut self.model.net_y,
            &mut self.opt_y,
            &inputs,
            |n, out, cot| gaussian_head(data.y[members[n]], out, Some(cot)),
            1.0,
            kl_weight,
            mode,
            false,
            &mut self.rng,
        )?;
        observer(Stage::NetUpdated(NetKind::Outcome), self);
        Ok((ex.elbo, ev.elbo, ey.elbo))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            trainer: self.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(f), &self.checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(f))?;
        Self::from_checkpoint(ck)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::InvalidData(format!(
                "unsupported checkpoint format version {} (expected {})",
                ck.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        let t = ck.trainer;
        t.model.validate()?;
        let q = t.model.q();
        if t.latents.len() != t.n * q {
            return Err(Error::shape("checkpoint latent matrix", t.n * q, t.latents.len()));
        }
        if t.latent_opt.len() != t.n {
            return Err(Error::shape("checkpoint latent optimizers", t.n, t.latent_opt.len()));
        }
        Ok(t)
    }
}

fn at(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numerical { context, detail } => Error::Numerical {
            context: format!("{context} (epoch {epoch}, batch {batch})"),
            detail,
        },
        other => other,
    }
}

/// Trains from scratch: initialization per the configuration, then the
/// alternating loop for the configured number of epochs.
pub fn train(
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(CausalBgmModel, Vec<LatentState>, TrainReport)> {
    let mut t = Trainer::new(data, config.clone())?;
    if config.init == InitStrategy::Egm {
        t.egm_initialize(data)?;
    }
    t.fit(data, config.resolved_epochs())?;
    let latents = t.latent_states();
    Ok((t.model, latents, t.report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DgpName, DgpSpec};
    use crate::model::gaussian_log_density;
    use rand::SeedableRng;

    fn seeded(seed: u64) -> BgmRng {
        BgmRng::seed_from_u64(seed)
    }

    fn small_config(seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            latent: LatentConfig::new(1, 1, 1, 1).unwrap(),
            architecture: Architecture {
                v_hidden: vec![16, 16],
                x_hidden: vec![8],
                y_hidden: vec![8],
            },
            init: InitStrategy::Random,
            lr: 1e-3,
            latent_lr: 1e-2,
            epochs: Some(2),
            ..Default::default()
        }
    }

    fn toy(n: usize, seed: u64) -> Dataset {
        generate(&DgpSpec::new(DgpName::LinearGaussian, n, 5, seed)).unwrap().0
    }

    #[test]
    fn default_epochs_follow_init() {
        let mut c = TrainConfig::default();
        assert_eq!(c.resolved_epochs(), 100);
        c.init = InitStrategy::Random;
        assert_eq!(c.resolved_epochs(), 500);
        c.epochs = Some(3);
        assert_eq!(c.resolved_epochs(), 3);
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let data = toy(40, 1);
        let cfg = TrainConfig {
            epochs: Some(0),
            ..small_config(1)
        };
        let fresh = Trainer::new(&data, cfg.clone()).unwrap();
        let (model, latents, report) = train(&data, &cfg).unwrap();
        assert_eq!(model, fresh.model);
        assert_eq!(latents, fresh.latent_states());
        assert!(report.elbo_outcome.is_empty());
        assert!(report.latent_log_posterior.is_empty());
    }

    #[test]
    fn traces_have_one_entry_per_epoch() {
        let data = toy(70, 2);
        let (_, _, report) = train(&data, &small_config(2)).unwrap();
        assert_eq!(report.elbo_treatment.len(), 2);
        assert_eq!(report.elbo_covariate.len(), 2);
        assert_eq!(report.elbo_outcome.len(), 2);
        assert_eq!(report.latent_log_posterior.len(), 2);
        assert!(report.elbo_outcome.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn elbo_value_matches_recomputation() {
        let mut rng = seeded(3);
        let cfg = small_config(3);
        let data = toy(10, 3);
        let t = Trainer::new(&data, cfg).unwrap();
        let mut net = t.model.net_y.clone();
        let mut opt = NetOptimizer::new(AdamConfig::default(), &net);
        let inputs: Vec<f64> = (0..10).flat_map(|i| [data.x[i], 0.3, -0.2]).collect();
        let before = net.clone();
        let mut noise_rng = rng.clone();
        let step = elbo_step(
            &mut net,
            &mut opt,
            &inputs,
            |n, out, cot| gaussian_head(data.y[n], out, Some(cot)),
            2.5,
            0.1,
            Perturbation::Flipout,
            false,
            &mut rng,
        )
        .unwrap();
        // replay the same noise through an independent evaluation
        let noise = FlipoutNoise::sample(&before.spec, 10, Perturbation::Flipout, &mut noise_rng);
        let pass = before.pass(&inputs, &noise).unwrap();
        let ll: f64 = (0..10)
            .map(|n| {
                let o = pass.output(n);
                gaussian_log_density(data.y[n], o[0], o[1])
            })
            .sum();
        let expected = 2.5 * ll - 0.1 * before.kl();
        assert!((step.elbo - expected).abs() < 1e-10);
        assert!((step.kl - before.kl()).abs() < 1e-12);
        assert_ne!(net.mu, before.mu);
    }

    #[test]
    fn degenerate_elbo_is_a_likelihood_step() {
        // kl_weight 0 and sigma at the floor: the mean update is an Adam step on the likelihood
        let data = toy(8, 4);
        let t = Trainer::new(&data, small_config(4)).unwrap();
        let mut net = t.model.net_y.clone();
        net.rho.iter_mut().for_each(|r| *r = -60.0);
        let inputs: Vec<f64> = (0..8).flat_map(|i| [data.x[i], 0.1, 0.4]).collect();
        let mut opt = NetOptimizer::new(AdamConfig::with_lr(1e-3), &net);
        let mu0 = net.mu.clone();
        let mut rng = seeded(0);
        elbo_step(
            &mut net,
            &mut opt,
            &inputs,
            |n, out, cot| gaussian_head(data.y[n], out, Some(cot)),
            1.0,
            0.0,
            Perturbation::Flipout,
            false,
            &mut rng,
        )
        .unwrap();

        let mut grad = vec![0.0; mu0.len()];
        for n in 0..8 {
            let x = &inputs[n * 3..n * 3 + 3];
            let out = net.spec.forward(&mu0, x).unwrap();
            let mut cot = [0.0; 2];
            gaussian_head(data.y[n], &out, Some(&mut cot));
            let (g, _) = net.spec.backward(&mu0, x, &cot).unwrap();
            for (a, b) in grad.iter_mut().zip(g.iter()) {
                *a += b;
            }
        }
        let mut expected = mu0.clone();
        AdamState::new(AdamConfig::with_lr(1e-3), mu0.len())
            .ascend(&mut expected, &grad)
            .unwrap();
        for (a, b) in net.mu.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn alternation_order_is_observable() {
        let data = toy(20, 5);
        let mut t = Trainer::new(&data, small_config(5)).unwrap();
        let mut seen = Vec::new();
        let mut params_at_start = None;
        let mut latents_after = None;
        let mut ok = true;
        t.run_batches(&data, &[(0..20).collect()], &mut |stage, tr| {
            seen.push(stage);
            match stage {
                Stage::BatchStart => params_at_start = Some(tr.model.clone()),
                Stage::LatentsUpdated => {
                    // parameters untouched by the latent phase
                    ok &= params_at_start.as_ref() == Some(&tr.model);
                    latents_after = Some(tr.latents.clone());
                }
                Stage::NetUpdated(_) => {
                    ok &= latents_after.as_ref() == Some(&tr.latents);
                }
            }
        })
        .unwrap();
        assert!(ok);
        assert_eq!(
            seen,
            vec![
                Stage::BatchStart,
                Stage::LatentsUpdated,
                Stage::NetUpdated(NetKind::Treatment),
                Stage::NetUpdated(NetKind::Covariate),
                Stage::NetUpdated(NetKind::Outcome),
            ]
        );
    }

    #[test]
    fn latent_updates_do_not_depend_on_member_order() {
        let data = toy(24, 6);
        let mut a = Trainer::new(&data, small_config(6)).unwrap();
        let mut b = a.clone();
        let fwd: Vec<usize> = (0..24).collect();
        let rev: Vec<usize> = (0..24).rev().collect();
        a.run_batches(&data, &[fwd], &mut |_, _| {}).unwrap();
        b.run_batches(&data, &[rev], &mut |_, _| {}).unwrap();
        // latent step (a) is order-free; (b) sees permuted rows but z were fixed before it
        let mut za = Trainer::new(&data, small_config(6)).unwrap();
        let mut zb = za.clone();
        za.latent_updates(&data, &(0..24).collect::<Vec<_>>()).unwrap();
        zb.latent_updates(&data, &(0..24).rev().collect::<Vec<_>>()).unwrap();
        assert_eq!(za.latents, zb.latents);
        assert_eq!(a.latents, b.latents);
    }

    #[test]
    fn checkpoint_round_trip_resumes_identically() {
        let data = toy(30, 7);
        let mut t = Trainer::new(&data, small_config(7)).unwrap();
        t.run_epoch(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        t.save(&path).unwrap();
        let mut back = Trainer::load(&path).unwrap();
        assert_eq!(back, t);
        let s1 = t.run_epoch(&data).unwrap();
        let s2 = back.run_epoch(&data).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(back.epoch, 2);
    }

    #[test]
    fn checkpoint_version_is_checked() {
        let data = toy(10, 8);
        let t = Trainer::new(&data, small_config(8)).unwrap();
        let mut ck = t.checkpoint();
        ck.format_version = 99;
        assert!(Trainer::from_checkpoint(ck).is_err());
    }

    #[test]
    fn empty_partitions_train() {
        let data = toy(40, 9);
        let cfg = TrainConfig {
            latent: LatentConfig::new(2, 0, 0, 0).unwrap(),
            ..small_config(9)
        };
        let (_, latents, report) = train(&data, &cfg).unwrap();
        assert_eq!(latents[0].z.len(), 2);
        assert!(report.elbo_treatment.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn binary_treatment_trains() {
        let (data, _) = generate(&DgpSpec::new(DgpName::AcicLike, 40, 8, 1)).unwrap();
        let cfg = TrainConfig {
            treatment_kind: TreatmentKind::Binary,
            xi_draws: 3,
            ..small_config(10)
        };
        let (_, _, report) = train(&data, &cfg).unwrap();
        assert!(report.elbo_treatment.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mismatched_treatment_kind_is_rejected() {
        let data = toy(10, 1);
        let cfg = TrainConfig {
            treatment_kind: TreatmentKind::Binary,
            ..small_config(1)
        };
        assert!(Trainer::new(&data, cfg).is_err());
    }
}
