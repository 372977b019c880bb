//! Subcommand implementations. Each writes its artifacts under the
//! configured output directory next to `resolved_config.json`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context};
use bgm_core::data::{generate, linspace, Dataset, DgpName, GroundTruth};
use bgm_core::dimsel::recommend_partition;
use bgm_core::effects::{
    coverage_study, load_point_estimates, metrics_binary, metrics_continuous, rmse, write_ite_csv,
    IndividualPosterior, PointEstimates,
};
use bgm_core::model::TreatmentKind;
use bgm_core::pipeline::{
    adrf_draws_original, estimate as run_estimate, fit, posterior_sample, Effects, EstimateConfig,
    FittedModel,
};
use bgm_core::rng;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn prepare(cfg: &RunConfig) -> anyhow::Result<&Path> {
    let dir = cfg.output_dir.as_path();
    cfg.echo(dir)?;
    Ok(dir)
}

fn load_data(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let Some(path) = &cfg.data else {
        bail!("no dataset given; pass --data or set \"data\" in the config");
    };
    Ok(Dataset::load_csv(path, cfg.treatment_kind)?)
}

pub fn simulate(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = prepare(cfg)?;
    let spec = cfg.simulation.spec(cfg.seed, 0);
    let (ds, truth) = generate(&spec)?;
    ds.save_csv(&dir.join("data.csv"))?;
    truth.save_csv(&dir.join("truth.csv"))?;
    println!(
        "simulated {} individuals from {} (p = {}, data seed {}) into {}",
        ds.len(),
        spec.name,
        ds.p,
        spec.seed,
        dir.display()
    );
    Ok(())
}

pub fn recommend_dims(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = prepare(cfg)?;
    let ds = load_data(cfg)?;
    let rec = recommend_partition(&ds.v, ds.p, &ds.x, &ds.y, cfg.q0, &cfg.sir)?;
    let l = rec.latent;
    let mut out = std::io::stdout().lock();
    writeln!(out, "q0,q1,q2,q3")?;
    writeln!(out, "{},{},{},{}", l.q0, l.q1, l.q2, l.q3)?;
    writeln!(out, "\n# treatment SIR (q2)")?;
    rec.treatment_sir.write_csv(&mut out)?;
    writeln!(out, "\n# outcome SIR (q1)")?;
    rec.outcome_sir.write_csv(&mut out)?;
    writeln!(out, "\n# covariate spectrum (total q)")?;
    rec.covariance.write_csv(&mut out)?;
    if rec.inflated {
        writeln!(out, "\n# total dimension raised to q0 + q1 + q2")?;
    }
    rec.treatment_sir.write_csv(create(&dir.join("sir_treatment.csv"))?)?;
    rec.outcome_sir.write_csv(create(&dir.join("sir_outcome.csv"))?)?;
    rec.covariance.write_csv(create(&dir.join("covariate_spectrum.csv"))?)?;
    write_json(&dir.join("latent_dims.json"), &rec)?;
    Ok(())
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> anyhow::Result<()> {
    let dir = prepare(cfg)?;
    let ds = load_data(cfg)?;
    let fitted = match resume {
        Some(path) => {
            let mut fitted = FittedModel::load(path)?;
            let more = cfg.train.epochs.unwrap_or(1);
            fitted.resume(&ds, more)?;
            fitted
        }
        None => {
            let mut tc = cfg.train.clone();
            tc.treatment_kind = ds.treatment_kind;
            fit(&ds, &tc)?
        }
    };
    fitted.save(&dir.join("model.json"))?;
    write_json(&dir.join("train_report.json"), fitted.report())?;
    println!(
        "trained {} epochs in {:.1}s; model written to {}",
        fitted.epochs_completed(),
        fitted.report().wall_time_secs,
        dir.join("model.json").display()
    );
    Ok(())
}

fn dump_chains(path: &Path, posts: &[IndividualPosterior]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let q = posts
        .iter()
        .flat_map(|p| &p.segments)
        .map(|s| s.chain.dim)
        .next()
        .unwrap_or(0);
    let mut header = vec!["individual".to_string(), "segment".into(), "draw".into()];
    header.extend((1..=q).map(|k| format!("z{k}")));
    w.write_record(&header)?;
    for p in posts {
        for (m, seg) in p.segments.iter().enumerate() {
            for s in 0..seg.chain.len() {
                let mut row = vec![p.owner.to_string(), m.to_string(), s.to_string()];
                row.extend(seg.chain.draw(s).iter().map(f64::to_string));
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn estimate(cfg: &RunConfig, model: &Path, chains: bool) -> anyhow::Result<()> {
    let dir = prepare(cfg)?;
    let fitted = FittedModel::load(model)?;
    let mut ds = load_data(cfg)?;
    if cfg.treatment_kind.is_none() && ds.treatment_kind != fitted.model().treatment_kind {
        // a continuous treatment that happens to take two values
        ds.treatment_kind = fitted.model().treatment_kind;
    }
    let (report, posts) = run_estimate(&fitted, &ds, &cfg.estimate)?;
    match &report.effects {
        Effects::Adrf { curve } => {
            curve.save_csv(&dir.join("adrf.csv"))?;
            println!("ADRF on {} grid points written to {}", curve.grid.len(), dir.join("adrf.csv").display());
        }
        Effects::Binary { ate, ite } => {
            write_ite_csv(ite, create(&dir.join("ite.csv"))?)?;
            write_json(&dir.join("ate.json"), ate)?;
            println!(
                "ATE {:.4} [{:.4}, {:.4}] at level {}",
                ate.point,
                ate.lower,
                ate.upper,
                1.0 - ate.alpha
            );
        }
    }
    write_json(&dir.join("estimate_report.json"), &report)?;
    if chains {
        dump_chains(&dir.join("chains.csv"), &posts)?;
    }
    log::info!(
        "mean acceptance {:.3}, minimum {:.3}",
        report.mean_acceptance,
        report.min_acceptance
    );
    Ok(())
}

/// Scores of one estimate against its ground truth.
#[derive(Debug, Clone, Copy, Default, Serialize)]
struct Scores {
    rmse: Option<f64>,
    mape: Option<f64>,
    eps_ate: Option<f64>,
    eps_pehe: Option<f64>,
}

fn score(truth: &GroundTruth, est: &PointEstimates) -> anyhow::Result<Scores> {
    match (truth, est) {
        (GroundTruth::Adrf { grid, values }, PointEstimates::Adrf { grid: g, points }) => {
            if grid.len() != g.len() || grid.iter().zip(g).any(|(a, b)| (a - b).abs() > 1e-8 * (1.0 + a.abs())) {
                bail!("estimate grid does not match the truth grid");
            }
            Ok(Scores {
                rmse: Some(rmse(values, points)?),
                mape: metrics_continuous(values, points).ok().map(|m| m.mape),
                ..Default::default()
            })
        }
        (GroundTruth::Ite(t), PointEstimates::Ite(e)) => {
            let m = metrics_binary(t, e)?;
            Ok(Scores {
                eps_ate: Some(m.eps_ate),
                eps_pehe: Some(m.eps_pehe),
                ..Default::default()
            })
        }
        _ => bail!("estimate and truth describe different kinds of effect"),
    }
}

pub fn benchmark_files(cfg: &RunConfig, estimate: &Path, truth: &Path) -> anyhow::Result<()> {
    let dir = prepare(cfg)?;
    let s = score(&GroundTruth::load_csv(truth)?, &load_point_estimates(estimate)?)?;
    println!("{}", serde_json::to_string_pretty(&s)?);
    write_json(&dir.join("benchmark.json"), &s)?;
    Ok(())
}

fn point_estimates(effects: &Effects) -> PointEstimates {
    match effects {
        Effects::Adrf { curve } => PointEstimates::Adrf {
            grid: curve.grid.clone(),
            points: curve.points(),
        },
        Effects::Binary { ite, .. } => PointEstimates::Ite(ite.iter().map(|e| e.point).collect()),
    }
}

#[derive(Debug, Serialize)]
struct Summary {
    mean: Option<f64>,
    sd: Option<f64>,
    runs: usize,
}

fn summarize(values: impl Iterator<Item = Option<f64>>) -> Summary {
    let v: Vec<f64> = values.flatten().collect();
    let n = v.len();
    if n == 0 {
        return Summary { mean: None, sd: None, runs: 0 };
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let sd = (n > 1).then(|| {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    });
    Summary { mean: Some(mean), sd, runs: n }
}

/// Training configuration and estimation grid for replicate `r` of the
/// configured simulation.
fn replicate_setup(cfg: &RunConfig, r: u64, kind: TreatmentKind) -> bgm_core::trainer::TrainConfig {
    let mut tc = cfg.train.clone();
    tc.treatment_kind = kind;
    tc.seed = rng::item_seed(cfg.seed, "replicate", r);
    tc
}

pub fn benchmark_runs(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = prepare(cfg)?;
    let name = cfg.simulation.name;
    let mut runs = csv::Writer::from_writer(create(&dir.join("runs.csv"))?);
    runs.write_record(["run", "data_seed", "rmse", "mape", "eps_ate", "eps_pehe", "wall_time_secs"])?;
    let mut all = Vec::new();
    for r in 0..cfg.benchmark.runs as u64 {
        let spec = cfg.simulation.spec(cfg.seed, r);
        let (ds, truth) = generate(&spec)?;
        let start = std::time::Instant::now();
        let fitted = fit(&ds, &replicate_setup(cfg, r, ds.treatment_kind))?;
        let mut ec = cfg.estimate.clone();
        if let GroundTruth::Adrf { grid, .. } = &truth {
            ec.grid_range = Some((grid[0], grid[grid.len() - 1]));
            ec.grid_size = grid.len();
        }
        let (report, _) = run_estimate(&fitted, &ds, &ec)?;
        let s = score(&truth, &point_estimates(&report.effects))?;
        let secs = start.elapsed().as_secs_f64();
        let cell = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        runs.write_record([
            r.to_string(),
            spec.seed.to_string(),
            cell(s.rmse),
            cell(s.mape),
            cell(s.eps_ate),
            cell(s.eps_pehe),
            secs.to_string(),
        ])?;
        runs.flush()?;
        log::info!("{name} run {r}: {s:?}");
        all.push(s);
    }
    let summary = json!({
        "dgp": name,
        "runs": all.len(),
        "rmse": summarize(all.iter().map(|s| s.rmse)),
        "mape": summarize(all.iter().map(|s| s.mape)),
        "eps_ate": summarize(all.iter().map(|s| s.eps_ate)),
        "eps_pehe": summarize(all.iter().map(|s| s.eps_pehe)),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(())
}

fn coverage_points(cfg: &RunConfig, name: DgpName) -> anyhow::Result<Vec<f64>> {
    if let Some(x) = &cfg.coverage.x_values {
        if x.windows(2).any(|w| !(w[0] < w[1])) || x.is_empty() {
            bail!("coverage.x_values must be non-empty and strictly increasing");
        }
        return Ok(x.clone());
    }
    let (lo, hi) = name
        .evaluation_interval()
        .with_context(|| format!("{name} has no dose-response curve"))?;
    Ok(linspace(lo, hi, 5))
}

pub fn coverage(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = prepare(cfg)?;
    let name = cfg.simulation.name;
    if name.treatment_kind() != TreatmentKind::Continuous {
        bail!("coverage studies need a continuous-treatment process, not {name}");
    }
    let x_values = coverage_points(cfg, name)?;
    let ec: EstimateConfig = cfg.estimate.clone();
    let table = coverage_study(
        cfg.coverage.replicates,
        &cfg.coverage.alphas,
        &x_values,
        |x| name.true_adrf(x).unwrap_or(f64::NAN),
        |r| {
            let (ds, _) = generate(&cfg.simulation.spec(cfg.seed, r as u64))?;
            let fitted = fit(&ds, &replicate_setup(cfg, r as u64, ds.treatment_kind))?;
            let sample = posterior_sample(&fitted, &ds, &ec)?;
            let d = adrf_draws_original(&fitted, &sample, &x_values, ec.outcome_draw)?;
            log::info!("coverage replicate {r} done");
            Ok(d)
        },
    )?;
    table.write_coverage_csv(create(&dir.join("coverage.csv"))?)?;
    table.write_lengths_csv(create(&dir.join("interval_lengths.csv"))?)?;
    let summary = json!({
        "dgp": name,
        "x_values": table.x_values,
        "alphas": table.alphas,
        "coverage": table.coverage,
        "succeeded": table.succeeded,
        "failures": table.failures,
    });
    write_json(&dir.join("coverage_summary.json"), &summary)?;
    let mut out = std::io::stdout().lock();
    table.write_coverage_csv(&mut out)?;
    if table.succeeded == 0 {
        bail!("every coverage replicate failed");
    }
    Ok(())
}
