//! Latent-dimension selection by sliced inverse regression.
//!
//! `sir` whitens the covariates, slices the response into equal-count bins,
//! and eigendecomposes the weighted covariance of the whitened slice means.
//! The number of informative directions is read off the eigenvalue decay.
//! A response with exactly two distinct values is sliced by class, which
//! leaves at most one recoverable direction.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LatentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SirConfig {
    pub n_slices: usize,
    /// Minimum consecutive-eigenvalue ratio accepted as an elbow.
    pub ratio_gap: f64,
    /// Cumulative-variance share used when no elbow is found.
    pub cumulative_threshold: f64,
}

impl Default for SirConfig {
    fn default() -> Self {
        SirConfig {
            n_slices: 10,
            ratio_gap: 2.0,
            cumulative_threshold: 0.9,
        }
    }
}

impl SirConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_slices < 2 {
            return Err(Error::InvalidConfig("n_slices must be at least 2".into()));
        }
        if !(self.ratio_gap >= 1.0) {
            return Err(Error::InvalidConfig("ratio_gap must be at least 1".into()));
        }
        if !(self.cumulative_threshold > 0.0 && self.cumulative_threshold <= 1.0) {
            return Err(Error::InvalidConfig(
                "cumulative_threshold must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SirResult {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Unit-norm directions in the original covariate coordinates, one per
    /// eigenvalue.
    pub eigenvectors: Vec<Vec<f64>>,
    pub recommended_k: usize,
    /// Running share of the eigenvalue total.
    pub cumulative_variance: Vec<f64>,
    /// Slices actually used.
    pub n_slices: usize,
}

impl SirResult {
    /// Rows `index,eigenvalue,cumulative_variance`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        eigen_table_csv(&self.eigenvalues, &self.cumulative_variance, out)
    }
}

fn eigen_table_csv<W: std::io::Write>(values: &[f64], cumulative: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "eigenvalue", "cumulative_variance"])?;
    for (i, (l, c)) in values.iter().zip(cumulative).enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string(), c.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("eigenvalue table", e))?;
    Ok(())
}

fn check_matrix(v: &[f64], p: usize) -> Result<usize> {
    if p == 0 {
        return Err(Error::InvalidData("covariate dimension is zero".into()));
    }
    if !v.len().is_multiple_of(p) {
        return Err(Error::InvalidData(format!(
            "covariate buffer of length {} is not a multiple of p = {p}",
            v.len()
        )));
    }
    if let Some(k) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidData(format!(
            "non-finite covariate at row {}, column {}",
            k / p,
            k % p
        )));
    }
    Ok(v.len() / p)
}

/// Centered covariates and their population covariance.
fn centered(v: &[f64], n: usize, p: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = DMatrix::from_row_slice(n, p, v);
    let mean = m.row_mean();
    let mut c = m;
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    let cov = c.transpose() * &c / n as f64;
    (c, cov)
}

/// Eigenpairs sorted by descending eigenvalue.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_columns(
        &order
            .iter()
            .map(|&i| eig.eigenvectors.column(i).into_owned())
            .collect::<Vec<DVector<f64>>>(),
    );
    (values, vectors)
}

fn cumulative_shares(values: &[f64]) -> Vec<f64> {
    let total: f64 = values.iter().map(|l| l.max(0.0)).sum();
    let mut acc = 0.0;
    values
        .iter()
        .map(|l| {
            acc += l.max(0.0);
            if total > 0.0 {
                acc / total
            } else {
                1.0
            }
        })
        .collect()
}

/// Elbow of a descending spectrum. Only the first `rank` eigenvalues are
/// eligible; the elbow is the largest ratio `λ_k / λ_{k+1}`, accepted when
/// it reaches `ratio_gap`, otherwise the smallest `k` whose cumulative share
/// reaches `cumulative_threshold`.
pub fn elbow(values: &[f64], rank: usize, ratio_gap: f64, cumulative_threshold: f64) -> usize {
    let r = rank.min(values.len());
    if r <= 1 {
        return 1;
    }
    let top = values[0].max(0.0);
    if top == 0.0 {
        return 1;
    }
    let floor = top * 1e-12;
    let mut best = (0.0, 1);
    for k in 1..r {
        let ratio = values[k - 1].max(floor) / values[k].max(floor);
        if ratio > best.0 {
            best = (ratio, k);
        }
    }
    if best.0 >= ratio_gap {
        return best.1;
    }
    let shares = cumulative_shares(&values[..r]);
    shares
        .iter()
        .position(|&c| c >= cumulative_threshold - 1e-12)
        .map_or(r, |i| i + 1)
}

/// Equal-count slices of the indices sorted by response, or the two classes
/// of a two-valued response.
fn slices(response: &[f64], n_slices: usize) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..response.len()).collect();
    order.sort_by(|&a, &b| response[a].total_cmp(&response[b]).then(a.cmp(&b)));
    let lo = response[order[0]];
    let hi = response[*order.last().unwrap()];
    if lo == hi {
        return Err(Error::InvalidData(
            "response is constant; it cannot be sliced".into(),
        ));
    }
    if response.iter().all(|&y| y == lo || y == hi) {
        let split = order.partition_point(|&i| response[i] == lo);
        return Ok(vec![order[..split].to_vec(), order[split..].to_vec()]);
    }
    let n = order.len();
    Ok((0..n_slices)
        .map(|h| order[h * n / n_slices..(h + 1) * n / n_slices].to_vec())
        .filter(|s| !s.is_empty())
        .collect())
}

/// Sliced inverse regression of the covariates on `response`.
///
/// `v` is row-major `N × p`.
pub fn sir(v: &[f64], p: usize, response: &[f64], config: &SirConfig) -> Result<SirResult> {
    config.validate()?;
    let n = check_matrix(v, p)?;
    if response.len() != n {
        return Err(Error::shape("response", n, response.len()));
    }
    if n <= config.n_slices {
        return Err(Error::InvalidData(format!(
            "need more rows than slices ({n} rows, {} slices)",
            config.n_slices
        )));
    }
    if response.iter().any(|y| !y.is_finite()) {
        return Err(Error::InvalidData("non-finite response".into()));
    }

    let (c, cov) = centered(v, n, p);
    let (cov_vals, cov_vecs) = sorted_eigen(cov);
    let max = cov_vals[0].max(0.0);
    if cov_vals[p - 1] <= max * 1e-12 {
        return Err(Error::InvalidData(
            "covariate covariance is singular; whitening is impossible".into(),
        ));
    }
    // Σ^{-1/2}
    let inv_sqrt = DMatrix::from_diagonal(&DVector::from_iterator(
        p,
        cov_vals.iter().map(|l| 1.0 / l.sqrt()),
    ));
    let whiten = &cov_vecs * inv_sqrt * cov_vecs.transpose();
    let w = &c * &whiten;

    let groups = slices(response, config.n_slices)?;
    let mut m = DMatrix::<f64>::zeros(p, p);
    for g in &groups {
        let mut mean = DVector::<f64>::zeros(p);
        for &i in g {
            mean += w.row(i).transpose();
        }
        mean /= g.len() as f64;
        m += (g.len() as f64 / n as f64) * &mean * mean.transpose();
    }
    let (values, vectors) = sorted_eigen(m);
    let directions = &whiten * vectors;
    let eigenvectors = directions
        .column_iter()
        .map(|col| {
            let norm = col.norm();
            col.iter().map(|x| x / norm).collect()
        })
        .collect();
    let rank = p.min(groups.len() - 1);
    let recommended_k = elbow(&values, rank, config.ratio_gap, config.cumulative_threshold);
    Ok(SirResult {
        cumulative_variance: cumulative_shares(&values),
        eigenvalues: values,
        eigenvectors,
        recommended_k,
        n_slices: groups.len(),
    })
}

/// Spectrum of the covariate correlation matrix and the dimension it suggests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpectrum {
    pub eigenvalues: Vec<f64>,
    pub cumulative_variance: Vec<f64>,
    pub recommended_q: usize,
}

impl CovarianceSpectrum {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        eigen_table_csv(&self.eigenvalues, &self.cumulative_variance, out)
    }
}

/// Eigen-analysis of the correlation matrix of the covariates. Constant
/// columns contribute nothing.
pub fn covariance_spectrum(v: &[f64], p: usize, config: &SirConfig) -> Result<CovarianceSpectrum> {
    config.validate()?;
    let n = check_matrix(v, p)?;
    if n < 2 {
        return Err(Error::InvalidData("need at least two rows".into()));
    }
    let (_, cov) = centered(v, n, p);
    let sd: Vec<f64> = (0..p).map(|j| cov[(j, j)].sqrt()).collect();
    let corr = DMatrix::from_fn(p, p, |i, j| {
        if sd[i] > 0.0 && sd[j] > 0.0 {
            cov[(i, j)] / (sd[i] * sd[j])
        } else {
            0.0
        }
    });
    let (values, _) = sorted_eigen(corr);
    let recommended_q = elbow(&values, p, config.ratio_gap, config.cumulative_threshold);
    Ok(CovarianceSpectrum {
        cumulative_variance: cumulative_shares(&values),
        eigenvalues: values,
        recommended_q,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionRecommendation {
    pub latent: LatentConfig,
    /// From `V | X`.
    pub treatment_sir: SirResult,
    /// From `V | Y`.
    pub outcome_sir: SirResult,
    pub covariance: CovarianceSpectrum,
    /// True when the total dimension was raised to fit `q0 + q1 + q2`.
    pub inflated: bool,
}

/// Recommends `(q0, q1, q2, q3)`: `q2` from SIR of `V` on the treatment,
/// `q1` from SIR of `V` on the outcome, the total from the covariate
/// spectrum, and `q3` as the remainder.
pub fn recommend_partition(
    v: &[f64],
    p: usize,
    x: &[f64],
    y: &[f64],
    q0: usize,
    config: &SirConfig,
) -> Result<PartitionRecommendation> {
    if !(1..=5).contains(&q0) {
        return Err(Error::InvalidConfig(format!(
            "confounder dimension must be between 1 and 5, got {q0}"
        )));
    }
    if x.is_empty() {
        return Err(Error::InvalidData("empty dataset".into()));
    }
    let treatment_sir = sir(v, p, x, config)?;
    let outcome_sir = sir(v, p, y, config)?;
    let covariance = covariance_spectrum(v, p, config)?;
    let q2 = treatment_sir.recommended_k;
    let q1 = outcome_sir.recommended_k;
    let needed = q0 + q1 + q2;
    let inflated = needed > covariance.recommended_q;
    if inflated {
        log::warn!(
            "covariate spectrum suggests {} latent dimensions but q0 + q1 + q2 = {needed}; using {needed}",
            covariance.recommended_q
        );
    }
    let q3 = covariance.recommended_q.saturating_sub(needed);
    Ok(PartitionRecommendation {
        latent: LatentConfig::new(q0, q1, q2, q3)?,
        treatment_sir,
        outcome_sir,
        covariance,
        inflated,
    })
}
