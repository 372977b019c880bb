//! Causal estimands from posterior latent draws: individual and average
//! treatment effects, the average dose-response function, their quantile
//! intervals, evaluation metrics and coverage calibration.
//!
//! Quantiles use linear interpolation between order statistics (the
//! "type 7" rule). Outcome draws include the outcome noise unless
//! [`OutcomeDraw::MeanOnly`] is requested.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::SampledParams;
use crate::error::{Error, Result};
use crate::latent::PosteriorChain;
use crate::model::CausalBgmModel;
use crate::nn::Trace;
use crate::rng;

/// Empirical quantile of sorted data by linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], prob: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, prob)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("significance level must be in (0, 1), got {alpha}")))
    }
}

/// Monte Carlo point estimate with an equal-tailed posterior interval.
/// The point is the draw mean, so it need not lie inside the interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
    pub n_mc: usize,
}

impl EffectEstimate {
    pub fn from_draws(draws: &[f64], alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if draws.is_empty() {
            return Err(Error::InvalidData("no Monte Carlo draws".into()));
        }
        let mut s = draws.to_vec();
        s.sort_by(f64::total_cmp);
        Ok(EffectEstimate {
            point: draws.iter().sum::<f64>() / draws.len() as f64,
            lower: quantile_sorted(&s, alpha / 2.0),
            upper: quantile_sorted(&s, 1.0 - alpha / 2.0),
            alpha,
            n_mc: draws.len(),
        })
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    /// Image under `a * value + b` with `a > 0`.
    pub fn map_affine(&self, a: f64, b: f64) -> Self {
        EffectEstimate {
            point: a * self.point + b,
            lower: a * self.lower + b,
            upper: a * self.upper + b,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdrfCurve {
    pub grid: Vec<f64>,
    pub estimates: Vec<EffectEstimate>,
}

impl AdrfCurve {
    pub fn points(&self) -> Vec<f64> {
        self.estimates.iter().map(|e| e.point).collect()
    }

    /// Rows `x,point,lower,upper`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "point", "lower", "upper"])?;
        for (x, e) in self.grid.iter().zip(&self.estimates) {
            w.write_record([x, &e.point, &e.lower, &e.upper].map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("adrf csv", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Rows `index,point,lower,upper`.
pub fn write_ite_csv<W: Write>(estimates: &[EffectEstimate], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "point", "lower", "upper"])?;
    for (i, e) in estimates.iter().enumerate() {
        w.write_record([i.to_string(), e.point.to_string(), e.lower.to_string(), e.upper.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("ite csv", e))?;
    Ok(())
}

/// Point estimates read back from an ADRF or ITE CSV.
#[derive(Debug, Clone, PartialEq)]
pub enum PointEstimates {
    Adrf { grid: Vec<f64>, points: Vec<f64> },
    Ite(Vec<f64>),
}

/// Reads a file written by [`AdrfCurve::write_csv`] or [`write_ite_csv`].
pub fn load_point_estimates(path: &Path) -> Result<PointEstimates> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(std::io::BufReader::new(f));
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.get(1).map(String::as_str) != Some("point") {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "expected header 'x,point,lower,upper' or 'index,point,lower,upper'".into(),
        });
    }
    let (mut keys, mut points) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let parse = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("column '{}' is missing or not numeric", header[k]),
                })
        };
        keys.push(parse(0)?);
        points.push(parse(1)?);
    }
    match header[0].as_str() {
        "x" => Ok(PointEstimates::Adrf { grid: keys, points }),
        "index" => Ok(PointEstimates::Ite(points)),
        other => Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unknown key column '{other}'"),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeDraw {
    /// `y ~ N(mu_y, sigma_y²)`.
    #[default]
    PosteriorPredictive,
    /// `y = mu_y`.
    MeanOnly,
}

/// A posterior latent chain and the outcome-network draw it was sampled under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSegment {
    pub chain: PosteriorChain,
    pub theta_y: SampledParams,
}

/// Posterior draws of one individual: one segment per model-parameter draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualPosterior {
    pub owner: usize,
    pub segments: Vec<ChainSegment>,
}

impl IndividualPosterior {
    pub fn single(chain: PosteriorChain, theta_y: SampledParams) -> Self {
        IndividualPosterior {
            owner: chain.owner,
            segments: vec![ChainSegment { chain, theta_y }],
        }
    }

    /// Total latent draws across segments.
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.chain.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn acceptance_rate(&self) -> f64 {
        let (a, p) = self
            .segments
            .iter()
            .fold((0, 0), |(a, p), s| (a + s.chain.accepted, p + s.chain.proposed));
        if p == 0 {
            0.0
        } else {
            a as f64 / p as f64
        }
    }

    /// ITE draws over all segments, in segment order.
    pub fn ite_draws<R: Rng + ?Sized>(
        &self,
        model: &CausalBgmModel,
        mode: OutcomeDraw,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.len());
        for seg in &self.segments {
            out.extend(ite_draws(model, &seg.chain, &seg.theta_y, mode, rng)?);
        }
        Ok(out)
    }
}

/// Evaluates the outcome network at fixed parameters without allocating.
struct OutcomeSampler<'a> {
    model: &'a CausalBgmModel,
    theta: &'a [f64],
    trace: Trace,
    input: Vec<f64>,
    mode: OutcomeDraw,
}

impl<'a> OutcomeSampler<'a> {
    fn new(model: &'a CausalBgmModel, theta_y: &'a SampledParams, mode: OutcomeDraw) -> Result<Self> {
        if theta_y.theta.len() != model.net_y.num_params() {
            return Err(Error::shape(
                "outcome parameters",
                model.net_y.num_params(),
                theta_y.theta.len(),
            ));
        }
        Ok(OutcomeSampler {
            model,
            theta: &theta_y.theta,
            trace: Trace::new(&model.net_y.spec),
            input: Vec::with_capacity(model.net_y.spec.input_dim()),
            mode,
        })
    }

    fn sample<R: Rng + ?Sized>(&mut self, x: f64, z: &[f64], rng: &mut R) -> f64 {
        self.model.y_input_into(x, z, &mut self.input);
        self.model
            .net_y
            .spec
            .forward_trace(self.theta, &self.input, &mut self.trace);
        let out = self.trace.output();
        match self.mode {
            OutcomeDraw::PosteriorPredictive => {
                let e: f64 = rng.sample(StandardNormal);
                out[0] + out[1].sqrt() * e
            }
            OutcomeDraw::MeanOnly => out[0],
        }
    }
}

fn check_chain(model: &CausalBgmModel, chain: &PosteriorChain) -> Result<()> {
    if chain.is_empty() {
        return Err(Error::InvalidData(format!(
            "posterior chain of individual {} has no draws",
            chain.owner
        )));
    }
    if chain.dim != model.q() {
        return Err(Error::shape("posterior chain dimension", model.q(), chain.dim));
    }
    Ok(())
}

/// Per-draw differences `y(1) - y(0)` for one individual.
pub fn ite_draws<R: Rng + ?Sized>(
    model: &CausalBgmModel,
    chain: &PosteriorChain,
    theta_y: &SampledParams,
    mode: OutcomeDraw,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_chain(model, chain)?;
    let mut sampler = OutcomeSampler::new(model, theta_y, mode)?;
    Ok((0..chain.len())
        .map(|s| {
            let z = chain.draw(s);
            let y1 = sampler.sample(1.0, z, rng);
            let y0 = sampler.sample(0.0, z, rng);
            y1 - y0
        })
        .collect())
}

pub fn estimate_ite<R: Rng + ?Sized>(
    model: &CausalBgmModel,
    chain: &PosteriorChain,
    theta_y: &SampledParams,
    alpha: f64,
    mode: OutcomeDraw,
    rng: &mut R,
) -> Result<EffectEstimate> {
    EffectEstimate::from_draws(&ite_draws(model, chain, theta_y, mode, rng)?, alpha)
}

/// Per-draw population means `(1/N) Σ_i d_{i,s}` of individual draws.
pub fn population_means(per_individual: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_individual
        .first()
        .ok_or_else(|| Error::InvalidData("no individuals".into()))?;
    let s = first.len();
    if let Some((i, d)) = per_individual.iter().enumerate().find(|(_, d)| d.len() != s) {
        return Err(Error::InvalidData(format!(
            "individual {i} has {} draws, expected {s}",
            d.len()
        )));
    }
    let n = per_individual.len() as f64;
    let mut means = vec![0.0; s];
    for d in per_individual {
        for (m, &v) in means.iter_mut().zip(d) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    Ok(means)
}

/// Average treatment effect from per-individual ITE draws. The interval
/// comes from quantiles of the per-draw population means.
pub fn estimate_ate(ite_draws: &[Vec<f64>], alpha: f64) -> Result<EffectEstimate> {
    EffectEstimate::from_draws(&population_means(ite_draws)?, alpha)
}

/// Per-individual ITE draws for many individuals, each with its own rng
/// stream derived from `seed` and the individual's index.
pub fn ite_draws_all(
    model: &CausalBgmModel,
    posteriors: &[IndividualPosterior],
    mode: OutcomeDraw,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    posteriors
        .par_iter()
        .map(|p| {
            let mut r = rng::item_rng(seed, "outcome", p.owner as u64);
            p.ite_draws(model, mode, &mut r)
        })
        .collect()
}

/// Per-draw population means of the outcome along a treatment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdrfDraws {
    pub grid: Vec<f64>,
    /// Row-major `K × S`: entry `(k, s)` is `(1/N) Σ_i y_{i,s}(grid_k)`.
    pub means: Vec<f64>,
    pub draws: usize,
}

impl AdrfDraws {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.means[k * self.draws..(k + 1) * self.draws]
    }

    pub fn curve(&self, alpha: f64) -> Result<AdrfCurve> {
        let estimates = (0..self.grid.len())
            .map(|k| EffectEstimate::from_draws(self.row(k), alpha))
            .collect::<Result<_>>()?;
        Ok(AdrfCurve {
            grid: self.grid.clone(),
            estimates,
        })
    }
}

const ADRF_CHUNK: usize = 128;

/// Samples `y_{i,s}(x)` for every individual, draw and grid point.
/// Individuals are processed in parallel with per-individual rng streams and
/// summed in index order, so the result does not depend on scheduling.
pub fn adrf_draws(
    model: &CausalBgmModel,
    posteriors: &[IndividualPosterior],
    grid: &[f64],
    mode: OutcomeDraw,
    seed: u64,
) -> Result<AdrfDraws> {
    if grid.is_empty() {
        return Err(Error::InvalidData("empty treatment grid".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidData("treatment grid must be strictly increasing".into()));
    }
    let first = posteriors
        .first()
        .ok_or_else(|| Error::InvalidData("no individuals".into()))?;
    let s = first.len();
    for p in posteriors {
        for seg in &p.segments {
            check_chain(model, &seg.chain)?;
        }
        if p.len() != s {
            return Err(Error::InvalidData(format!(
                "individual {} has {} draws, expected {s}",
                p.owner,
                p.len()
            )));
        }
    }
    let k = grid.len();
    let partial: Vec<Vec<f64>> = posteriors
        .par_chunks(ADRF_CHUNK)
        .map(|chunk| -> Result<Vec<f64>> {
            let mut acc = vec![0.0; k * s];
            for p in chunk {
                let mut r = rng::item_rng(seed, "outcome", p.owner as u64);
                let mut d = 0;
                for seg in &p.segments {
                    let mut sampler = OutcomeSampler::new(model, &seg.theta_y, mode)?;
                    for t in 0..seg.chain.len() {
                        let z = seg.chain.draw(t);
                        for (g, &x) in grid.iter().enumerate() {
                            acc[g * s + d] += sampler.sample(x, z, &mut r);
                        }
                        d += 1;
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut means = vec![0.0; k * s];
    for acc in &partial {
        for (m, a) in means.iter_mut().zip(acc) {
            *m += a;
        }
    }
    let n = posteriors.len() as f64;
    means.iter_mut().for_each(|m| *m /= n);
    Ok(AdrfDraws {
        grid: grid.to_vec(),
        means,
        draws: s,
    })
}

pub fn estimate_adrf(
    model: &CausalBgmModel,
    posteriors: &[IndividualPosterior],
    grid: &[f64],
    alpha: f64,
    mode: OutcomeDraw,
    seed: u64,
) -> Result<AdrfCurve> {
    check_alpha(alpha)?;
    adrf_draws(model, posteriors, grid, mode, seed)?.curve(alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousMetrics {
    pub rmse: f64,
    pub mape: f64,
}

/// RMSE and MAPE of an estimated curve against the truth on the same grid.
pub fn metrics_continuous(truth: &[f64], estimate: &[f64]) -> Result<ContinuousMetrics> {
    if truth.len() != estimate.len() {
        return Err(Error::shape("estimated curve", truth.len(), estimate.len()));
    }
    if truth.is_empty() {
        return Err(Error::InvalidData("empty curves".into()));
    }
    let zeros: Vec<usize> = (0..truth.len()).filter(|&k| truth[k] == 0.0).collect();
    if !zeros.is_empty() {
        return Err(Error::InvalidData(format!(
            "MAPE is undefined where the truth is zero (indices {zeros:?})"
        )));
    }
    let k = truth.len() as f64;
    let mut se = 0.0;
    let mut ape = 0.0;
    for (&t, &e) in truth.iter().zip(estimate) {
        se += (t - e) * (t - e);
        ape += ((t - e) / t).abs();
    }
    Ok(ContinuousMetrics {
        rmse: (se / k).sqrt(),
        mape: ape / k,
    })
}

/// RMSE only; defined even where the truth crosses zero.
pub fn rmse(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::shape("estimated curve", truth.len(), estimate.len()));
    }
    if truth.is_empty() {
        return Err(Error::InvalidData("empty curves".into()));
    }
    let se: f64 = truth.iter().zip(estimate).map(|(t, e)| (t - e) * (t - e)).sum();
    Ok((se / truth.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub eps_ate: f64,
    /// Mean squared ITE error.
    pub eps_pehe: f64,
}

pub fn metrics_binary(truth: &[f64], estimate: &[f64]) -> Result<BinaryMetrics> {
    if truth.len() != estimate.len() {
        return Err(Error::shape("estimated effects", truth.len(), estimate.len()));
    }
    if truth.is_empty() {
        return Err(Error::InvalidData("no individuals".into()));
    }
    let n = truth.len() as f64;
    let mean_t = truth.iter().sum::<f64>() / n;
    let mean_e = estimate.iter().sum::<f64>() / n;
    let pehe = truth
        .iter()
        .zip(estimate)
        .map(|(t, e)| (e - t) * (e - t))
        .sum::<f64>()
        / n;
    Ok(BinaryMetrics {
        eps_ate: (mean_e - mean_t).abs(),
        eps_pehe: pehe,
    })
}

/// Empirical coverage of ADRF intervals over independent replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub x_values: Vec<f64>,
    pub alphas: Vec<f64>,
    /// `coverage[i][j]`: fraction of successful replicates whose interval at
    /// `x_values[i]` and `alphas[j]` contains the truth.
    pub coverage: Vec<Vec<f64>>,
    /// `lengths[i][j]`: interval lengths across successful replicates.
    pub lengths: Vec<Vec<Vec<f64>>>,
    pub succeeded: usize,
    /// Failed replicate indices with their error messages.
    pub failures: Vec<(usize, String)>,
}

impl CalibrationTable {
    /// Rows `x,alpha,coverage,mean_length,replicates`.
    pub fn write_coverage_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "alpha", "coverage", "mean_length", "replicates"])?;
        for (i, x) in self.x_values.iter().enumerate() {
            for (j, a) in self.alphas.iter().enumerate() {
                let l = &self.lengths[i][j];
                let mean = l.iter().sum::<f64>() / l.len().max(1) as f64;
                w.write_record([
                    x.to_string(),
                    a.to_string(),
                    self.coverage[i][j].to_string(),
                    mean.to_string(),
                    self.succeeded.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("coverage csv", e))?;
        Ok(())
    }

    /// Rows `x,alpha,replicate,length`.
    pub fn write_lengths_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "alpha", "replicate", "length"])?;
        for (i, x) in self.x_values.iter().enumerate() {
            for (j, a) in self.alphas.iter().enumerate() {
                for (r, l) in self.lengths[i][j].iter().enumerate() {
                    w.write_record([x.to_string(), a.to_string(), r.to_string(), l.to_string()])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("interval length csv", e))?;
        Ok(())
    }
}

/// Runs `replicates` independent fits. `run(r)` must return ADRF draws on
/// `x_values` for replicate `r`; a failed replicate is recorded and skipped.
pub fn coverage_study<F>(
    replicates: usize,
    alphas: &[f64],
    x_values: &[f64],
    truth: impl Fn(f64) -> f64,
    mut run: F,
) -> Result<CalibrationTable>
where
    F: FnMut(usize) -> Result<AdrfDraws>,
{
    if replicates < 2 {
        return Err(Error::InvalidConfig("coverage study needs at least 2 replicates".into()));
    }
    for &a in alphas {
        check_alpha(a)?;
    }
    let (nx, na) = (x_values.len(), alphas.len());
    let mut hits = vec![vec![0usize; na]; nx];
    let mut lengths = vec![vec![Vec::new(); na]; nx];
    let mut failures = Vec::new();
    let mut succeeded = 0;
    for r in 0..replicates {
        let draws = match run(r) {
            Ok(d) if d.grid.len() == nx => d,
            Ok(d) => {
                failures.push((r, format!("expected {nx} grid points, got {}", d.grid.len())));
                continue;
            }
            Err(e) => {
                log::warn!("coverage replicate {r} failed: {e}");
                failures.push((r, e.to_string()));
                continue;
            }
        };
        succeeded += 1;
        for (i, &x) in x_values.iter().enumerate() {
            let t = truth(x);
            for (j, &a) in alphas.iter().enumerate() {
                let e = EffectEstimate::from_draws(draws.row(i), a)?;
                hits[i][j] += e.contains(t) as usize;
                lengths[i][j].push(e.width());
            }
        }
    }
    let denom = succeeded.max(1) as f64;
    Ok(CalibrationTable {
        x_values: x_values.to_vec(),
        alphas: alphas.to_vec(),
        coverage: hits
            .iter()
            .map(|row| row.iter().map(|&h| h as f64 / denom).collect())
            .collect(),
        lengths,
        succeeded,
        failures,
    })
}
