//! `bgm`: simulate data, choose latent dimensions, train, estimate causal
//! effects, benchmark against ground truth and measure interval coverage.
//!
//! Exit codes: 0 on success, 2 for usage, validation and input errors,
//! 3 for numerical failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "bgm", version, about = "Bayesian generative modeling for causal effect estimation")]
struct Cli {
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config file and BGM_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset and its ground truth from a registered process.
    Simulate(SimulateArgs),
    /// Recommend latent partition dimensions by sliced inverse regression.
    RecommendDims(DimsArgs),
    /// Train a model on a dataset, or resume training from a saved model.
    Train(TrainArgs),
    /// Sample latent posteriors and estimate treatment effects.
    Estimate(EstimateArgs),
    /// Compare estimates with ground truth, from files or over repeated simulations.
    Benchmark(BenchmarkArgs),
    /// Empirical coverage of ADRF intervals over independent replicates.
    Coverage(CoverageArgs),
}

#[derive(Debug, Clone, Args, Default)]
pub struct SimulationFlags {
    /// Data-generating process.
    #[arg(long)]
    pub dgp: Option<bgm_core::data::DgpName>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    /// Seed of the simulated data (derived from the master seed when unset).
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub outcome_noise: Option<f64>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct TrainFlags {
    /// Initialization strategy.
    #[arg(long, value_parser = ["egm", "random"])]
    pub init: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub egm_batches: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub latent_lr: Option<f64>,
    /// Latent partition as `q0,q1,q2,q3`.
    #[arg(long, value_delimiter = ',')]
    pub latent: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct EstimateFlags {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub grid_size: Option<usize>,
    /// ADRF grid bounds as `lo,hi` on the original treatment scale.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub grid_range: Option<Vec<f64>>,
    /// Retained MCMC draws per chain.
    #[arg(long)]
    pub keep: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub proposal_std: Option<f64>,
    /// Adapt the proposal scale during burn-in.
    #[arg(long)]
    pub tune_proposal: bool,
    #[arg(long)]
    pub param_draws: Option<usize>,
    /// Use outcome means instead of posterior predictive draws.
    #[arg(long)]
    pub mean_only: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    sim: SimulationFlags,
}

#[derive(Debug, Args)]
struct DimsArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    q0: Option<usize>,
    #[arg(long)]
    n_slices: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue training a saved model for `--epochs` more epochs.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Saved model (`model.json` from `train`).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also write every posterior chain as CSV.
    #[arg(long)]
    dump_chains: bool,
    #[command(flatten)]
    estimate: EstimateFlags,
}

#[derive(Debug, Args)]
struct BenchmarkArgs {
    /// Estimate CSV (`adrf.csv` or `ite.csv`); requires `--truth`.
    #[arg(long, requires = "truth")]
    estimate: Option<PathBuf>,
    /// Ground-truth CSV written by `simulate`.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Number of simulate-train-estimate runs when no files are given.
    #[arg(long)]
    runs: Option<usize>,
    #[command(flatten)]
    sim: SimulationFlags,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    est: EstimateFlags,
}

#[derive(Debug, Args)]
struct CoverageArgs {
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x_values: Option<Vec<f64>>,
    #[command(flatten)]
    sim: SimulationFlags,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    est: EstimateFlags,
}

impl SimulationFlags {
    fn apply(&self, c: &mut RunConfig) {
        let s = &mut c.simulation;
        if let Some(d) = self.dgp {
            s.name = d;
        }
        if let Some(n) = self.n {
            s.n = n;
        }
        if let Some(p) = self.p {
            s.p = p;
        }
        if self.data_seed.is_some() {
            s.seed = self.data_seed;
        }
        if let Some(v) = self.outcome_noise {
            s.outcome_noise = v;
        }
    }
}

impl TrainFlags {
    fn apply(&self, c: &mut RunConfig) -> anyhow::Result<()> {
        let t = &mut c.train;
        if let Some(i) = &self.init {
            t.init = match i.as_str() {
                "random" => bgm_core::trainer::InitStrategy::Random,
                _ => bgm_core::trainer::InitStrategy::Egm,
            };
        }
        if self.epochs.is_some() {
            t.epochs = self.epochs;
        }
        if let Some(b) = self.egm_batches {
            t.egm.batches = b;
        }
        if let Some(b) = self.batch_size {
            t.batch_size = b;
        }
        if let Some(lr) = self.lr {
            t.lr = lr;
        }
        if let Some(lr) = self.latent_lr {
            t.latent_lr = lr;
        }
        if let Some(q) = &self.latent {
            anyhow::ensure!(q.len() == 4, "--latent takes four values q0,q1,q2,q3, got {}", q.len());
            t.latent = bgm_core::model::LatentConfig::new(q[0], q[1], q[2], q[3])?;
        }
        Ok(())
    }
}

impl EstimateFlags {
    fn apply(&self, c: &mut RunConfig) -> anyhow::Result<()> {
        let e = &mut c.estimate;
        if let Some(a) = self.alpha {
            e.alpha = a;
        }
        if let Some(k) = self.grid_size {
            e.grid_size = k;
        }
        if let Some(r) = &self.grid_range {
            anyhow::ensure!(r.len() == 2, "--grid-range takes two values lo,hi, got {}", r.len());
            e.grid_range = Some((r[0], r[1]));
        }
        if let Some(k) = self.keep {
            e.mcmc.keep = k;
        }
        if let Some(b) = self.burn_in {
            e.mcmc.burn_in = b;
        }
        if let Some(s) = self.proposal_std {
            e.mcmc.proposal_std = s;
        }
        if self.tune_proposal {
            e.mcmc.tune_proposal = true;
        }
        if let Some(m) = self.param_draws {
            e.param_draws = m;
        }
        if self.mean_only {
            e.outcome_draw = bgm_core::effects::OutcomeDraw::MeanOnly;
        }
        Ok(())
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.output_dir = o;
    }
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| anyhow::anyhow!("configuring {j} worker threads: {e}"))?;
    }
    match cli.command {
        Command::Simulate(a) => {
            a.sim.apply(&mut cfg);
            cfg.resolve()?;
            commands::simulate(&cfg)
        }
        Command::RecommendDims(a) => {
            if a.data.is_some() {
                cfg.data = a.data;
            }
            if let Some(q) = a.q0 {
                cfg.q0 = q;
            }
            if let Some(h) = a.n_slices {
                cfg.sir.n_slices = h;
            }
            cfg.resolve()?;
            commands::recommend_dims(&cfg)
        }
        Command::Train(a) => {
            if a.data.is_some() {
                cfg.data = a.data;
            }
            a.train.apply(&mut cfg)?;
            cfg.resolve()?;
            commands::train(&cfg, a.resume.as_deref())
        }
        Command::Estimate(a) => {
            if a.data.is_some() {
                cfg.data = a.data;
            }
            a.estimate.apply(&mut cfg)?;
            cfg.resolve()?;
            commands::estimate(&cfg, &a.model, a.dump_chains)
        }
        Command::Benchmark(a) => {
            a.sim.apply(&mut cfg);
            a.train.apply(&mut cfg)?;
            a.est.apply(&mut cfg)?;
            if let Some(r) = a.runs {
                cfg.benchmark.runs = r;
            }
            cfg.resolve()?;
            match (a.estimate, a.truth) {
                (Some(e), Some(t)) => commands::benchmark_files(&cfg, &e, &t),
                (None, Some(_)) => anyhow::bail!("--truth needs --estimate"),
                _ => commands::benchmark_runs(&cfg),
            }
        }
        Command::Coverage(a) => {
            a.sim.apply(&mut cfg);
            a.train.apply(&mut cfg)?;
            a.est.apply(&mut cfg)?;
            if let Some(r) = a.replicates {
                cfg.coverage.replicates = r;
            }
            if let Some(al) = a.alphas {
                cfg.coverage.alphas = al;
            }
            if a.x_values.is_some() {
                cfg.coverage.x_values = a.x_values;
            }
            cfg.resolve()?;
            commands::coverage(&cfg)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<bgm_core::Error>())
        .any(bgm_core::Error::is_numerical);
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
