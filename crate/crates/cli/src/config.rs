//! Run configuration: one JSON document holding every default, overridden by
//! the `BGM_SEED` environment variable and then by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use bgm_core::data::{DgpName, DgpSpec};
use bgm_core::dimsel::SirConfig;
use bgm_core::model::TreatmentKind;
use bgm_core::pipeline::EstimateConfig;
use bgm_core::rng;
use bgm_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Simulation settings. The data seed derives from the master seed unless set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub name: DgpName,
    pub n: usize,
    pub p: usize,
    pub seed: Option<u64>,
    pub outcome_noise: f64,
    pub grid_size: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            name: DgpName::LinearGaussian,
            n: 1000,
            p: 10,
            seed: None,
            outcome_noise: 1.0,
            grid_size: 100,
        }
    }
}

impl SimulationConfig {
    /// Spec for `replicate` under `master`; replicate 0 uses the base seed.
    pub fn spec(&self, master: u64, replicate: u64) -> DgpSpec {
        let base = self.seed.unwrap_or_else(|| rng::stream_seed(master, rng::DATA));
        DgpSpec {
            name: self.name,
            n: self.n,
            p: self.p,
            seed: if replicate == 0 {
                base
            } else {
                rng::item_seed(base, "replicate", replicate)
            },
            outcome_noise: self.outcome_noise,
            grid_size: self.grid_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    /// Independent simulate-train-estimate runs.
    pub runs: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig { runs: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoverageConfig {
    pub replicates: usize,
    pub alphas: Vec<f64>,
    /// Treatment values at which coverage is measured; five points across
    /// the process's evaluation interval when unset.
    pub x_values: Option<Vec<f64>>,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig {
            replicates: 100,
            alphas: vec![0.01, 0.05, 0.1],
            x_values: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for every random stream.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Dataset CSV (`x,y,v1..vp`).
    pub data: Option<PathBuf>,
    /// Treatment type of `data`; inferred from the values when unset.
    pub treatment_kind: Option<TreatmentKind>,
    pub simulation: SimulationConfig,
    pub train: TrainConfig,
    pub estimate: EstimateConfig,
    pub sir: SirConfig,
    /// Confounder dimension passed to the partition recommendation.
    pub q0: usize,
    pub benchmark: BenchmarkConfig,
    pub coverage: CoverageConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("bgm-out"),
            data: None,
            treatment_kind: None,
            simulation: SimulationConfig::default(),
            train: TrainConfig::default(),
            estimate: EstimateConfig::default(),
            sir: SirConfig::default(),
            q0: 1,
            benchmark: BenchmarkConfig::default(),
            coverage: CoverageConfig::default(),
        }
    }
}

pub const SEED_ENV: &str = "BGM_SEED";

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("invalid config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV} must be an unsigned integer, got {s:?}"))?;
        }
        Ok(cfg)
    }

    /// Seeds every stage from the master seed and checks all sections.
    pub fn resolve(&mut self) -> anyhow::Result<()> {
        self.train.seed = self.seed;
        if self.q0 == 0 || self.q0 > 5 {
            bail!("q0 must be between 1 and 5, got {}", self.q0);
        }
        if self.benchmark.runs == 0 {
            bail!("benchmark.runs must be at least 1");
        }
        if self.coverage.replicates < 2 {
            bail!("coverage.replicates must be at least 2");
        }
        if self.coverage.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            bail!("coverage.alphas must lie in (0, 1)");
        }
        self.simulation.spec(self.seed, 0).validate()?;
        self.estimate.validate()?;
        self.sir.validate()?;
        // treatment kind of the training configuration is checked against the data later
        let mut t = self.train.clone();
        t.treatment_kind = TreatmentKind::Continuous;
        t.validate()?;
        Ok(())
    }

    pub fn echo(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        let path = dir.join("resolved_config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
