//! End-to-end fitting and effect estimation on original-scale data.
//!
//! [`fit`] standardizes the data, initializes (EGM or random) and trains.
//! [`estimate`] samples per-individual latent posteriors and reports
//! effects back on the original outcome scale.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{linspace, standardize, Dataset, Standardization};
use crate::effects::{
    adrf_draws, estimate_ate, ite_draws_all, AdrfCurve, AdrfDraws, ChainSegment, EffectEstimate,
    IndividualPosterior, OutcomeDraw,
};
use crate::error::{Error, Result};
use crate::latent::{mh_sample, McmcConfig};
use crate::model::{CausalBgmModel, TreatmentKind};
use crate::rng;
use crate::trainer::{Checkpoint, InitStrategy, TrainConfig, TrainReport, Trainer};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A trained model with the data transform it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub format_version: u32,
    pub checkpoint: Checkpoint,
    pub standardization: Standardization,
    /// Fingerprint of the original-scale training data.
    pub data_fingerprint: u64,
}

/// FNV-1a over the bit patterns of every value, the width and the treatment kind.
pub fn fingerprint(ds: &Dataset) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |w: u64| {
        for b in w.to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(ds.p as u64);
    eat(ds.len() as u64);
    eat(matches!(ds.treatment_kind, TreatmentKind::Binary) as u64);
    for v in ds.x.iter().chain(&ds.y).chain(&ds.v) {
        eat(v.to_bits());
    }
    h
}

impl FittedModel {
    pub fn model(&self) -> &CausalBgmModel {
        &self.checkpoint.trainer.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.checkpoint.trainer.config
    }

    pub fn report(&self) -> &TrainReport {
        &self.checkpoint.trainer.report
    }

    pub fn epochs_completed(&self) -> usize {
        self.checkpoint.trainer.epoch
    }

    pub fn trained_latents(&self) -> &[f64] {
        &self.checkpoint.trainer.latents
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let m: FittedModel = serde_json::from_reader(std::io::BufReader::new(f))?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidData(format!(
                "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
                m.format_version
            )));
        }
        Trainer::from_checkpoint(m.checkpoint.clone())?;
        if m.standardization.v.len() != m.model().p {
            return Err(Error::shape(
                "stored standardization width",
                m.model().p,
                m.standardization.v.len(),
            ));
        }
        Ok(m)
    }

    /// Continues training on the original training data for more epochs.
    /// Epoch numbering carries on from the checkpoint.
    pub fn resume(&mut self, data: &Dataset, epochs: usize) -> Result<()> {
        if fingerprint(data) != self.data_fingerprint {
            return Err(Error::InvalidData(
                "resuming requires the dataset the model was trained on".into(),
            ));
        }
        let internal = self.standardization.apply(data)?;
        let mut t = Trainer::from_checkpoint(self.checkpoint.clone())?;
        t.fit(&internal, epochs)?;
        self.checkpoint = t.checkpoint();
        Ok(())
    }
}

/// Standardizes, initializes per `config.init`, and trains for the
/// configured number of epochs.
pub fn fit(data: &Dataset, config: &TrainConfig) -> Result<FittedModel> {
    let (internal, standardization) = standardize(data)?;
    let mut t = Trainer::new(&internal, config.clone())?;
    if config.init == InitStrategy::Egm {
        t.egm_initialize(&internal)?;
    }
    t.fit(&internal, config.resolved_epochs())?;
    Ok(FittedModel {
        format_version: MODEL_FORMAT_VERSION,
        checkpoint: t.checkpoint(),
        standardization,
        data_fingerprint: fingerprint(data),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    pub alpha: f64,
    pub grid_size: usize,
    /// ADRF grid bounds on the original treatment scale; the observed
    /// treatment range when unset.
    pub grid_range: Option<(f64, f64)>,
    pub mcmc: McmcConfig,
    /// Model-parameter draws per individual, each with its own chain.
    pub param_draws: usize,
    pub outcome_draw: OutcomeDraw,
    /// Draws of `xi` averaged in the binary treatment likelihood.
    pub xi_draws: usize,
    /// Seed of the sampling stage; the training seed when unset.
    pub seed: Option<u64>,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            alpha: 0.05,
            grid_size: 100,
            grid_range: None,
            mcmc: McmcConfig::default(),
            param_draws: 1,
            outcome_draw: OutcomeDraw::PosteriorPredictive,
            xi_draws: 1,
            seed: None,
        }
    }
}

impl EstimateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.grid_size < 2 {
            return Err(Error::InvalidConfig("grid_size must be at least 2".into()));
        }
        if let Some((lo, hi)) = self.grid_range {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "grid_range must be finite with lo < hi, got ({lo}, {hi})"
                )));
            }
        }
        if self.param_draws == 0 {
            return Err(Error::InvalidConfig("param_draws must be at least 1".into()));
        }
        if self.xi_draws == 0 {
            return Err(Error::InvalidConfig("xi_draws must be at least 1".into()));
        }
        self.mcmc.validate()
    }
}

/// Where each chain starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentInit {
    /// The latent vector learned in training (same data as training).
    Trained,
    /// A draw from the standard normal prior (unseen data).
    Prior,
}

/// Runs one MH chain per individual and parameter draw, in parallel.
/// Individual `i` uses its own rng stream, so results do not depend on
/// scheduling. `init` is a row-major `n × q` matrix of starting points;
/// chains start from prior draws when it is absent.
pub fn sample_posteriors(
    model: &CausalBgmModel,
    data: &Dataset,
    init: Option<&[f64]>,
    config: &EstimateConfig,
    seed: u64,
) -> Result<Vec<IndividualPosterior>> {
    config.validate()?;
    let q = model.q();
    if let Some(z) = init {
        if z.len() != data.len() * q {
            return Err(Error::shape("initial latent matrix", data.len() * q, z.len()));
        }
    }
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut r = rng::item_rng(seed, rng::MCMC, i as u64);
            let obs = data.observation(i);
            let segments = (0..config.param_draws)
                .map(|_| {
                    let draw = model.draw(&mut r);
                    let start: Vec<f64> = match init {
                        Some(z) => z[i * q..(i + 1) * q].to_vec(),
                        None => (0..q).map(|_| r.sample(StandardNormal)).collect(),
                    };
                    let chain = mh_sample(
                        model,
                        &obs,
                        &draw,
                        &start,
                        i,
                        &config.mcmc,
                        config.xi_draws,
                        &mut r,
                    )?;
                    Ok(ChainSegment {
                        chain,
                        theta_y: draw.y,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(IndividualPosterior { owner: i, segments })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Effects {
    Adrf { curve: AdrfCurve },
    Binary { ate: EffectEstimate, ite: Vec<EffectEstimate> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub effects: Effects,
    pub mean_acceptance: f64,
    pub min_acceptance: f64,
    pub latent_init: LatentInit,
    pub seed: u64,
    pub wall_time_secs: f64,
    pub config: EstimateConfig,
}

/// Posterior latents of `data` under a fitted model, with the internal-scale
/// data they were sampled for.
pub struct PosteriorSample {
    pub posteriors: Vec<IndividualPosterior>,
    pub internal: Dataset,
    pub latent_init: LatentInit,
    pub seed: u64,
}

pub fn posterior_sample(
    fitted: &FittedModel,
    data: &Dataset,
    config: &EstimateConfig,
) -> Result<PosteriorSample> {
    config.validate()?;
    let model = fitted.model();
    if data.p != model.p {
        return Err(Error::shape("covariate dimension", model.p, data.p));
    }
    if data.treatment_kind != model.treatment_kind {
        return Err(Error::InvalidData(format!(
            "dataset treatment is {:?} but the model was trained on {:?}",
            data.treatment_kind, model.treatment_kind
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidData("empty dataset".into()));
    }
    let internal = fitted.standardization.apply(data)?;
    let seed = config.seed.unwrap_or(fitted.config().seed);
    let latent_init = if fingerprint(data) == fitted.data_fingerprint {
        LatentInit::Trained
    } else {
        log::info!("dataset differs from the training data; chains start from the prior");
        LatentInit::Prior
    };
    let init = match latent_init {
        LatentInit::Trained => Some(fitted.trained_latents()),
        LatentInit::Prior => None,
    };
    let posteriors = sample_posteriors(model, &internal, init, config, seed)?;
    Ok(PosteriorSample {
        posteriors,
        internal,
        latent_init,
        seed,
    })
}

/// Per-draw population means along `grid` (original treatment scale),
/// reported on the original outcome scale.
pub fn adrf_draws_original(
    fitted: &FittedModel,
    sample: &PosteriorSample,
    grid: &[f64],
    mode: OutcomeDraw,
) -> Result<AdrfDraws> {
    let st = &fitted.standardization;
    let internal_grid: Vec<f64> = grid
        .iter()
        .map(|&x| st.x_to_internal(x, TreatmentKind::Continuous))
        .collect();
    let mut d = adrf_draws(fitted.model(), &sample.posteriors, &internal_grid, mode, sample.seed)?;
    d.grid = grid.to_vec();
    d.means.iter_mut().for_each(|m| *m = st.y_to_original(*m));
    Ok(d)
}

/// The default ADRF grid: `grid_size` points over the configured range or
/// the observed treatment range.
pub fn adrf_grid(data: &Dataset, config: &EstimateConfig) -> Vec<f64> {
    let (lo, hi) = config.grid_range.unwrap_or_else(|| {
        data.x
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
    });
    linspace(lo, hi, config.grid_size)
}

/// Samples latent posteriors and computes the treatment effects of `data`.
pub fn estimate(
    fitted: &FittedModel,
    data: &Dataset,
    config: &EstimateConfig,
) -> Result<(EstimateReport, Vec<IndividualPosterior>)> {
    let start = Instant::now();
    let sample = posterior_sample(fitted, data, config)?;
    let effects = match fitted.model().treatment_kind {
        TreatmentKind::Continuous => {
            let grid = adrf_grid(data, config);
            if grid.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::InvalidData(
                    "treatment has no spread; set grid_range explicitly".into(),
                ));
            }
            let draws = adrf_draws_original(fitted, &sample, &grid, config.outcome_draw)?;
            Effects::Adrf {
                curve: draws.curve(config.alpha)?,
            }
        }
        TreatmentKind::Binary => {
            let mut draws = ite_draws_all(
                fitted.model(),
                &sample.posteriors,
                config.outcome_draw,
                sample.seed,
            )?;
            for d in draws.iter_mut().flatten() {
                *d = fitted.standardization.effect_to_original(*d);
            }
            let ite = draws
                .iter()
                .map(|d| EffectEstimate::from_draws(d, config.alpha))
                .collect::<Result<_>>()?;
            Effects::Binary {
                ate: estimate_ate(&draws, config.alpha)?,
                ite,
            }
        }
    };
    let rates: Vec<f64> = sample.posteriors.iter().map(|p| p.acceptance_rate()).collect();
    let report = EstimateReport {
        effects,
        mean_acceptance: rates.iter().sum::<f64>() / rates.len() as f64,
        min_acceptance: rates.iter().copied().fold(f64::INFINITY, f64::min),
        latent_init: sample.latent_init,
        seed: sample.seed,
        wall_time_secs: start.elapsed().as_secs_f64(),
        config: config.clone(),
    };
    Ok((report, sample.posteriors))
}
