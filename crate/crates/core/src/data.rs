//! Datasets, CSV ingestion and export, standardization, and the synthetic
//! data-generating processes used for benchmarking.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Observation;
use crate::model::{LatentConfig, TreatmentKind};
use crate::rng::BgmRng;

/// Observed triples `(x, y, v)`, with `v` stored row-major `n × p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub p: usize,
    pub treatment_kind: TreatmentKind,
}

impl Dataset {
    pub fn new(
        x: Vec<f64>,
        y: Vec<f64>,
        v: Vec<f64>,
        p: usize,
        treatment_kind: TreatmentKind,
    ) -> Result<Self> {
        let ds = Dataset {
            x,
            y,
            v,
            p,
            treatment_kind,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.len();
        if self.p == 0 {
            return Err(Error::InvalidData("dataset has no covariates".into()));
        }
        if self.y.len() != n {
            return Err(Error::shape("outcome column", n, self.y.len()));
        }
        if self.v.len() != n * self.p {
            return Err(Error::shape("covariate matrix", n * self.p, self.v.len()));
        }
        let bad = |name: &str, vals: &[f64], width: usize| {
            vals.iter().position(|a| !a.is_finite()).map(|k| {
                Error::InvalidData(format!("non-finite {name} value in row {}", k / width))
            })
        };
        if let Some(e) = bad("treatment", &self.x, 1)
            .or_else(|| bad("outcome", &self.y, 1))
            .or_else(|| bad("covariate", &self.v, self.p))
        {
            return Err(e);
        }
        if self.treatment_kind == TreatmentKind::Binary {
            if let Some(i) = self.x.iter().position(|&x| x != 0.0 && x != 1.0) {
                return Err(Error::InvalidData(format!(
                    "binary treatment must be 0 or 1, row {i} has {}",
                    self.x[i]
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.v[i * self.p..(i + 1) * self.p]
    }

    pub fn observation(&self, i: usize) -> Observation<'_> {
        Observation {
            x: self.x[i],
            y: self.y[i],
            v: self.row(i),
        }
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.v[i * self.p + j]).collect()
    }

    /// Binary when every treatment value is 0 or 1.
    pub fn infer_kind(x: &[f64]) -> TreatmentKind {
        if !x.is_empty() && x.iter().all(|&a| a == 0.0 || a == 1.0) {
            TreatmentKind::Binary
        } else {
            TreatmentKind::Continuous
        }
    }

    /// Reads a CSV with header `x,y,v1,...,vp`. The treatment kind is inferred
    /// from the data unless given.
    pub fn read_csv<R: Read>(
        reader: R,
        source: &Path,
        kind: Option<TreatmentKind>,
    ) -> Result<Self> {
        let parse_err = |line: u64, message: String| Error::Parse {
            path: source.to_path_buf(),
            line,
            message,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        let names: Vec<&str> = header.iter().collect();
        if names.len() < 3 || names[0] != "x" || names[1] != "y" {
            return Err(parse_err(
                1,
                format!("expected header x,y,v1,...,vp, got {}", names.join(",")),
            ));
        }
        for (k, name) in names[2..].iter().enumerate() {
            if *name != format!("v{}", k + 1) {
                return Err(parse_err(
                    1,
                    format!("column {} should be named v{}, got '{name}'", k + 3, k + 1),
                ));
            }
        }
        let width = names.len();
        let p = width - 2;
        let (mut x, mut y, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            if rec.len() != width {
                return Err(parse_err(
                    line,
                    format!("expected {width} fields, found {}", rec.len()),
                ));
            }
            for (col, field) in rec.iter().enumerate() {
                let val: f64 = field.parse().map_err(|_| {
                    parse_err(
                        line,
                        format!("column '{}': cannot parse '{field}' as a number", names[col]),
                    )
                })?;
                if !val.is_finite() {
                    return Err(parse_err(
                        line,
                        format!("column '{}': non-finite value '{field}'", names[col]),
                    ));
                }
                match col {
                    0 => x.push(val),
                    1 => y.push(val),
                    _ => v.push(val),
                }
            }
        }
        if x.is_empty() {
            return Err(parse_err(2, "no data rows".into()));
        }
        let kind = kind.unwrap_or_else(|| Self::infer_kind(&x));
        Dataset::new(x, y, v, p, kind)
    }

    pub fn load_csv(path: &Path, kind: Option<TreatmentKind>) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f), path, kind)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["x".to_string(), "y".to_string()];
        header.extend((1..=self.p).map(|j| format!("v{j}")));
        w.write_record(&header)?;
        let mut rec = Vec::with_capacity(self.p + 2);
        for i in 0..self.len() {
            rec.clear();
            rec.push(self.x[i].to_string());
            rec.push(self.y[i].to_string());
            rec.extend(self.row(i).iter().map(|a| a.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("dataset csv", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// `value -> (value - mean) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub mean: f64,
    pub scale: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        mean: 0.0,
        scale: 1.0,
    };

    /// Mean and population standard deviation; a constant column gets scale 1.
    pub fn fit(values: &[f64], name: &str) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd > 1e-12 * mean.abs().max(1.0) {
            Affine { mean, scale: sd }
        } else {
            log::warn!("column {name} is constant; centering only");
            Affine { mean, scale: 1.0 }
        }
    }

    pub fn forward(&self, a: f64) -> f64 {
        (a - self.mean) / self.scale
    }

    pub fn inverse(&self, a: f64) -> f64 {
        a * self.scale + self.mean
    }
}

/// Per-column transforms applied by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x: Affine,
    pub y: Affine,
    pub v: Vec<Affine>,
}

impl Standardization {
    pub fn identity(p: usize) -> Self {
        Standardization {
            x: Affine::IDENTITY,
            y: Affine::IDENTITY,
            v: vec![Affine::IDENTITY; p],
        }
    }

    fn map(&self, ds: &Dataset, inverse: bool) -> Result<Dataset> {
        if ds.p != self.v.len() {
            return Err(Error::shape("standardization width", self.v.len(), ds.p));
        }
        let f = |t: &Affine, a: f64| if inverse { t.inverse(a) } else { t.forward(a) };
        let x = match ds.treatment_kind {
            TreatmentKind::Continuous => ds.x.iter().map(|&a| f(&self.x, a)).collect(),
            TreatmentKind::Binary => ds.x.clone(),
        };
        let y = ds.y.iter().map(|&a| f(&self.y, a)).collect();
        let v = ds
            .v
            .iter()
            .enumerate()
            .map(|(k, &a)| f(&self.v[k % ds.p], a))
            .collect();
        Ok(Dataset {
            x,
            y,
            v,
            p: ds.p,
            treatment_kind: ds.treatment_kind,
        })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        self.map(ds, false)
    }

    pub fn invert(&self, ds: &Dataset) -> Result<Dataset> {
        self.map(ds, true)
    }

    /// Treatment value on the internal scale.
    pub fn x_to_internal(&self, x: f64, kind: TreatmentKind) -> f64 {
        match kind {
            TreatmentKind::Continuous => self.x.forward(x),
            TreatmentKind::Binary => x,
        }
    }

    /// Outcome level back on the original scale.
    pub fn y_to_original(&self, y: f64) -> f64 {
        self.y.inverse(y)
    }

    /// Outcome difference back on the original scale.
    pub fn effect_to_original(&self, d: f64) -> f64 {
        d * self.y.scale
    }
}

/// Zero-mean, unit-scale `y` and `v` columns; `x` too when continuous.
pub fn standardize(ds: &Dataset) -> Result<(Dataset, Standardization)> {
    let x = match ds.treatment_kind {
        TreatmentKind::Continuous => Affine::fit(&ds.x, "x"),
        TreatmentKind::Binary => Affine::IDENTITY,
    };
    let y = Affine::fit(&ds.y, "y");
    let v = (0..ds.p)
        .map(|j| Affine::fit(&ds.column(j), &format!("v{}", j + 1)))
        .collect();
    let st = Standardization { x, y, v };
    Ok((st.apply(ds)?, st))
}

/// Registered data-generating processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpName {
    /// `Z0 ~ N(0,1)`, `X = Z0 + e`, `Y = X + Z0 + e`; covariates load on `Z0`
    /// and one nuisance factor. True ADRF `x`.
    LinearGaussian,
    /// Exponential covariates and treatment; true ADRF `x + 2 / (1 + x)^3`.
    HiranoImbens,
    /// Gaussian covariates, nonlinear confounding, linear true ADRF `x`.
    Sun,
    /// Correlated Gaussian covariates, probit-shaped treatment;
    /// true ADRF `1.2 x + x^2`.
    ColangeloLee,
    /// Binary treatment with 117-style mixed covariates and heterogeneous effects.
    AcicLike,
}

impl fmt::Display for DgpName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DgpName::LinearGaussian => "linear_gaussian",
            DgpName::HiranoImbens => "hirano_imbens",
            DgpName::Sun => "sun",
            DgpName::ColangeloLee => "colangelo_lee",
            DgpName::AcicLike => "acic_like",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for DgpName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidConfig(format!("unknown data-generating process '{s}'")))
    }
}

impl DgpName {
    pub fn treatment_kind(&self) -> TreatmentKind {
        match self {
            DgpName::AcicLike => TreatmentKind::Binary,
            _ => TreatmentKind::Continuous,
        }
    }

    pub fn min_p(&self) -> usize {
        match self {
            DgpName::LinearGaussian | DgpName::ColangeloLee => 1,
            DgpName::HiranoImbens => 3,
            DgpName::Sun => 4,
            DgpName::AcicLike => 6,
        }
    }

    /// Bounded treatment interval on which the ADRF is evaluated.
    pub fn evaluation_interval(&self) -> Option<(f64, f64)> {
        match self {
            DgpName::LinearGaussian | DgpName::Sun => Some((-2.0, 2.0)),
            DgpName::HiranoImbens => Some((0.0, 3.0)),
            DgpName::ColangeloLee => Some((-1.0, 1.0)),
            DgpName::AcicLike => None,
        }
    }

    /// True ADRF `E[Y(x)]` for continuous-treatment processes.
    pub fn true_adrf(&self, x: f64) -> Option<f64> {
        match self {
            DgpName::LinearGaussian | DgpName::Sun => Some(x),
            DgpName::HiranoImbens => Some(x + 2.0 / (1.0 + x).powi(3)),
            DgpName::ColangeloLee => Some(1.2 * x + x * x),
            DgpName::AcicLike => None,
        }
    }

    /// Latent block sizes customarily used with this process.
    pub fn default_latent(&self) -> LatentConfig {
        let (q0, q1, q2, q3) = match self {
            DgpName::LinearGaussian | DgpName::HiranoImbens => (1, 1, 1, 7),
            DgpName::Sun => (2, 2, 2, 4),
            DgpName::ColangeloLee => (5, 5, 5, 5),
            DgpName::AcicLike => (3, 6, 3, 6),
        };
        LatentConfig { q0, q1, q2, q3 }
    }
}

fn default_noise() -> f64 {
    1.0
}

fn default_grid_size() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub name: DgpName,
    pub n: usize,
    pub p: usize,
    pub seed: u64,
    /// Standard deviation of the outcome noise.
    #[serde(default = "default_noise")]
    pub outcome_noise: f64,
    /// Points of the truth grid for continuous processes.
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
}

impl DgpSpec {
    pub fn new(name: DgpName, n: usize, p: usize, seed: u64) -> Self {
        DgpSpec {
            name,
            n,
            p,
            seed,
            outcome_noise: 1.0,
            grid_size: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("sample size n must be at least 1".into()));
        }
        if self.p < self.name.min_p() {
            return Err(Error::InvalidConfig(format!(
                "{} needs p >= {}, got {}",
                self.name,
                self.name.min_p(),
                self.p
            )));
        }
        if !(self.outcome_noise >= 0.0 && self.outcome_noise.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "outcome noise must be finite and non-negative, got {}",
                self.outcome_noise
            )));
        }
        if self.name.treatment_kind() == TreatmentKind::Continuous && self.grid_size < 2 {
            return Err(Error::InvalidConfig("truth grid needs at least 2 points".into()));
        }
        Ok(())
    }
}

/// Known causal quantities of a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    Adrf { grid: Vec<f64>, values: Vec<f64> },
    Ite(Vec<f64>),
}

impl GroundTruth {
    /// Continuous truth as `x,truth` rows; binary truth as `index,ite` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        match self {
            GroundTruth::Adrf { grid, values } => {
                w.write_record(["x", "truth"])?;
                for (g, v) in grid.iter().zip(values) {
                    w.write_record([g.to_string(), v.to_string()])?;
                }
            }
            GroundTruth::Ite(ite) => {
                w.write_record(["index", "ite"])?;
                for (i, v) in ite.iter().enumerate() {
                    w.write_record([i.to_string(), v.to_string()])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("truth csv", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(std::io::BufReader::new(f));
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let parse = |k: usize| -> Result<f64> {
                rec.get(k)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Parse {
                        path: path.to_path_buf(),
                        line,
                        message: format!("column {} is missing or not numeric", k + 1),
                    })
            };
            a.push(parse(0)?);
            b.push(parse(1)?);
        }
        match header.first().map(String::as_str) {
            Some("x") => Ok(GroundTruth::Adrf { grid: a, values: b }),
            Some("index") => Ok(GroundTruth::Ite(b)),
            _ => Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "expected header 'x,truth' or 'index,ite'".into(),
            }),
        }
    }
}

/// Equally spaced grid of `k` points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..k)
            .map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
            .collect(),
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// One simulated individual before treatment assignment.
#[derive(Debug, Clone)]
pub struct Unit {
    pub v: Vec<f64>,
    /// Unobserved drivers (the confounder of the linear process).
    pub hidden: f64,
}

/// Sampler for one data-generating process.
#[derive(Debug, Clone)]
pub struct Dgp {
    pub spec: DgpSpec,
    theta: Vec<f64>,
}

impl Dgp {
    pub fn new(spec: DgpSpec) -> Result<Self> {
        spec.validate()?;
        let theta = (1..=spec.p).map(|j| 1.0 / (j * j) as f64).collect();
        Ok(Dgp { spec, theta })
    }

    pub fn sample_unit(&self, rng: &mut BgmRng) -> Unit {
        let p = self.spec.p;
        let mut v = vec![0.0; p];
        let mut hidden = 0.0;
        match self.spec.name {
            DgpName::LinearGaussian => {
                // first ceil(p/2) columns load on the confounder, the rest on a nuisance factor
                hidden = rng.sample(StandardNormal);
                let nuisance: f64 = rng.sample(StandardNormal);
                let half = p.div_ceil(2);
                for (j, vj) in v.iter_mut().enumerate() {
                    let e: f64 = rng.sample(StandardNormal);
                    *vj = if j < half { hidden } else { nuisance } + e;
                }
            }
            DgpName::HiranoImbens => {
                let exp = Exp::new(1.0).expect("unit rate");
                for vj in v.iter_mut() {
                    *vj = exp.sample(rng);
                }
            }
            DgpName::Sun => {
                for vj in v.iter_mut() {
                    *vj = rng.sample(StandardNormal);
                }
            }
            DgpName::ColangeloLee => {
                // AR(1) recursion gives Cov(v_i, v_j) = 0.5^|i-j|
                let mut prev: f64 = rng.sample(StandardNormal);
                v[0] = prev;
                for vj in v.iter_mut().skip(1) {
                    let e: f64 = rng.sample(StandardNormal);
                    prev = 0.5 * prev + 0.75f64.sqrt() * e;
                    *vj = prev;
                }
            }
            DgpName::AcicLike => {
                // every third column binary, the rest standard normal
                let coin = Bernoulli::new(0.5).expect("valid probability");
                for (j, vj) in v.iter_mut().enumerate() {
                    *vj = if j % 3 == 2 {
                        coin.sample(rng) as u8 as f64
                    } else {
                        rng.sample(StandardNormal)
                    };
                }
            }
        }
        Unit { v, hidden }
    }

    fn index(&self, v: &[f64]) -> f64 {
        v.iter().zip(&self.theta).map(|(a, t)| a * t).sum()
    }

    /// Propensity `P(X = 1 | v)` of the binary process.
    pub fn propensity(&self, v: &[f64]) -> f64 {
        let logit = 0.4 * (v[0] - v[1] + v[2]) + 0.3 * v[3] * v[4];
        1.0 / (1.0 + (-logit.clamp(-3.0, 3.0)).exp())
    }

    /// Individual treatment effect of the binary process.
    pub fn ite(&self, v: &[f64]) -> f64 {
        1.0 + 0.5 * v[0] + 0.5 * v[3].sin() + 0.5 * v[5]
    }

    pub fn sample_treatment(&self, u: &Unit, rng: &mut BgmRng) -> f64 {
        let v = &u.v;
        match self.spec.name {
            DgpName::LinearGaussian => {
                let e: f64 = rng.sample(StandardNormal);
                u.hidden + e
            }
            DgpName::HiranoImbens => Exp::new(v[0] + v[1])
                .expect("positive rate")
                .sample(rng),
            DgpName::Sun => {
                let e: f64 = rng.sample(StandardNormal);
                0.8 * v[0] + 0.6 * v[1] + 0.4 * v[2] + e
            }
            DgpName::ColangeloLee => {
                let e: f64 = rng.sample(StandardNormal);
                normal_cdf(3.0 * self.index(v)) + 0.75 * e - 0.5
            }
            DgpName::AcicLike => {
                let pi = self.propensity(v);
                (rng.random::<f64>() < pi) as u8 as f64
            }
        }
    }

    /// Outcome mean under treatment `x`.
    pub fn outcome_mean(&self, u: &Unit, x: f64) -> f64 {
        let v = &u.v;
        match self.spec.name {
            DgpName::LinearGaussian => x + u.hidden,
            DgpName::HiranoImbens => {
                let s = v[0] + v[2];
                x + s * (-x * s).exp()
            }
            DgpName::Sun => x + 1.5 * v[0].sin() + 0.75 * v[1] * v[1] + v[2] - 0.75,
            DgpName::ColangeloLee => 1.2 * x + x * x + x * v[0] + 1.2 * self.index(v),
            DgpName::AcicLike => {
                let base = 1.0 + v[0] + 0.5 * v[1] * v[1] - 0.5 * v[2].sin() + 0.5 * v[4];
                base + x * self.ite(v)
            }
        }
    }

    pub fn sample_outcome(&self, u: &Unit, x: f64, rng: &mut BgmRng) -> f64 {
        let e: f64 = rng.sample(StandardNormal);
        self.outcome_mean(u, x) + self.spec.outcome_noise * e
    }

    /// Draws the dataset and its ground truth.
    pub fn generate(&self, rng: &mut BgmRng) -> Result<(Dataset, GroundTruth)> {
        let (n, p) = (self.spec.n, self.spec.p);
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n * p);
        let mut ite = Vec::new();
        for _ in 0..n {
            let u = self.sample_unit(rng);
            let xi = self.sample_treatment(&u, rng);
            let yi = self.sample_outcome(&u, xi, rng);
            if self.spec.name == DgpName::AcicLike {
                ite.push(self.ite(&u.v));
            }
            x.push(xi);
            y.push(yi);
            v.extend_from_slice(&u.v);
        }
        let ds = Dataset::new(x, y, v, p, self.spec.name.treatment_kind())?;
        let truth = match self.spec.name.evaluation_interval() {
            Some((lo, hi)) => {
                let grid = linspace(lo, hi, self.spec.grid_size);
                let values = grid
                    .iter()
                    .map(|&g| self.spec.name.true_adrf(g).expect("continuous process"))
                    .collect();
                GroundTruth::Adrf { grid, values }
            }
            None => GroundTruth::Ite(ite),
        };
        Ok((ds, truth))
    }
}

/// Generates a dataset from `spec` with the rng seeded by `spec.seed`.
pub fn generate(spec: &DgpSpec) -> Result<(Dataset, GroundTruth)> {
    use rand::SeedableRng;
    let mut rng = BgmRng::seed_from_u64(spec.seed);
    Dgp::new(spec.clone())?.generate(&mut rng)
}
