//! Acceptance suite. Every test prints one `criterion N: PASS|FAIL ...`
//! line and then asserts. Criterion 6 is slow (`cargo test -- --ignored`);
//! criterion 7 lives in `scripts/reproduce_full_scale.sh`.
//!
//! Criteria 4 to 6 run at a reduced desk scale: EGM and training budgets,
//! chain lengths and the random-initialization epoch count are set in
//! [`desk_train`] and [`desk_estimate`].

use std::sync::OnceLock;
use std::time::Instant;

use bgm_core::data::{generate, linspace, DgpName, DgpSpec};
use bgm_core::dimsel::{sir, SirConfig};
use bgm_core::effects::{
    adrf_draws, coverage_study, estimate_adrf, estimate_ite, ite_draws, metrics_binary,
    metrics_continuous, rmse, ChainSegment, EffectEstimate, IndividualPosterior, OutcomeDraw,
};
use bgm_core::latent::{
    latent_log_posterior, latent_log_posterior_grad, mh_sample, McmcConfig, Observation,
    PosteriorChain,
};
use bgm_core::model::{Architecture, CausalBgmModel, Discriminator, Encoder, LatentConfig, TreatmentKind};
use bgm_core::nn::{softplus_inv, MlpSpec, Trace};
use bgm_core::pipeline::{adrf_draws_original, estimate, fit, posterior_sample, Effects, EstimateConfig};
use bgm_core::trainer::{InitStrategy, TrainConfig};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(criterion: u32, pass: bool, detail: String) {
    println!("criterion {criterion}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

// ---------------------------------------------------------------- criterion 1

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const PARAM_COORDS: usize = 200;

fn relative_error(fd: f64, an: f64, floor: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(floor)
}

fn activation_pattern(spec: &MlpSpec, params: &[f64], input: &[f64], trace: &mut Trace) -> Vec<bool> {
    spec.forward_trace(params, input, trace);
    let pre = trace.pre_activations();
    // the last layer has no activation
    pre[..pre.len() - 1]
        .iter()
        .flatten()
        .map(|&a| a > 0.0)
        .collect()
}

/// Outcome of a finite-difference check: worst relative error over the
/// checked coordinates and the number skipped because the perturbation
/// crossed an activation kink.
#[derive(Debug, Default, Clone, Copy)]
struct FdOutcome {
    worst: f64,
    checked: usize,
    kinks: usize,
}

impl FdOutcome {
    fn merge(&mut self, o: FdOutcome) {
        self.worst = self.worst.max(o.worst);
        self.checked += o.checked;
        self.kinks += o.kinks;
    }
}

/// Checks `d/dθ <c, f(θ, x)>` and `d/dx` for one network at realistic
/// parameter scale.
fn fd_network(spec: &MlpSpec, params: &[f64], rng: &mut ChaCha8Rng) -> FdOutcome {
    let x = normals(rng, spec.input_dim());
    let c = normals(rng, spec.output_dim());
    let value = |p: &[f64], x: &[f64]| -> f64 {
        spec.forward(p, x).unwrap().iter().zip(&c).map(|(a, b)| a * b).sum()
    };
    let (g, gx) = spec.backward(params, &x, &c).unwrap();
    let mut trace = Trace::new(spec);
    let base = activation_pattern(spec, params, &x, &mut trace);
    let mut out = FdOutcome::default();
    let coords = sample_indices(rng, spec.num_params(), PARAM_COORDS.min(spec.num_params()));
    let mut p = params.to_vec();
    for k in coords.iter() {
        let orig = p[k];
        p[k] = orig + FD_STEP;
        let plus = (value(&p, &x), activation_pattern(spec, &p, &x, &mut trace));
        p[k] = orig - FD_STEP;
        let minus = (value(&p, &x), activation_pattern(spec, &p, &x, &mut trace));
        p[k] = orig;
        if plus.1 != base || minus.1 != base {
            out.kinks += 1;
            continue;
        }
        let fd = (plus.0 - minus.0) / (2.0 * FD_STEP);
        out.worst = out.worst.max(relative_error(fd, g[k], 1e-6));
        out.checked += 1;
    }
    let mut xx = x.clone();
    for k in 0..x.len() {
        let orig = xx[k];
        xx[k] = orig + FD_STEP;
        let plus = (value(params, &xx), activation_pattern(spec, params, &xx, &mut trace));
        xx[k] = orig - FD_STEP;
        let minus = (value(params, &xx), activation_pattern(spec, params, &xx, &mut trace));
        xx[k] = orig;
        if plus.1 != base || minus.1 != base {
            out.kinks += 1;
            continue;
        }
        let fd = (plus.0 - minus.0) / (2.0 * FD_STEP);
        out.worst = out.worst.max(relative_error(fd, gx[k], 1e-6));
        out.checked += 1;
    }
    out
}

/// Central differences of the latent log-posterior in every coordinate.
/// A coordinate is skipped as a kink when the one-sided slopes disagree.
fn fd_latent(kind: TreatmentKind, seed: u64) -> FdOutcome {
    let p = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = CausalBgmModel::new(LatentConfig::default(), kind, p, &Architecture::default(), &mut rng).unwrap();
    let draw = model.draw(&mut rng);
    let v = normals(&mut rng, p);
    let x = match kind {
        TreatmentKind::Binary => f64::from(rng.random_bool(0.5)),
        TreatmentKind::Continuous => rng.sample(StandardNormal),
    };
    let obs = Observation { x, y: rng.sample(StandardNormal), v: &v };
    let z = normals(&mut rng, model.q());
    let xi = normals(&mut rng, 1);
    let xi: &[f64] = if kind == TreatmentKind::Binary { &xi } else { &[] };
    let f = |z: &[f64]| latent_log_posterior(&model, &obs, z, &draw, xi).unwrap();
    let (f0, g) = latent_log_posterior_grad(&model, &obs, &z, &draw, xi).unwrap();
    let mut out = FdOutcome::default();
    for k in 0..z.len() {
        let mut zp = z.clone();
        zp[k] += FD_STEP;
        let mut zm = z.clone();
        zm[k] -= FD_STEP;
        let (fp, fm) = (f(&zp), f(&zm));
        let (right, left) = ((fp - f0) / FD_STEP, (f0 - fm) / FD_STEP);
        if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1.0) {
            out.kinks += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * FD_STEP);
        out.worst = out.worst.max(relative_error(fd, g[k], 1e-3));
        out.checked += 1;
    }
    out
}

#[test]
fn criterion_1_gradient_checks() {
    let start = Instant::now();
    let p = 20;
    let latent = LatentConfig::default();
    let q = latent.q();
    let arch = Architecture::default();
    let mut per_net: Vec<(&str, FdOutcome)> = [
        "covariate net",
        "treatment net (continuous)",
        "treatment net (binary)",
        "outcome net",
        "encoder",
        "discriminator",
        "latent log-posterior (continuous)",
        "latent log-posterior (binary)",
    ]
    .into_iter()
    .map(|n| (n, FdOutcome::default()))
    .collect();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let cont = CausalBgmModel::new(latent, TreatmentKind::Continuous, p, &arch, &mut rng).unwrap();
        let bin = CausalBgmModel::new(latent, TreatmentKind::Binary, p, &arch, &mut rng).unwrap();
        let encoder = Encoder::new(p, q, &[64, 64, 64], &mut rng).unwrap();
        let disc = Discriminator::new(q, &[64, 64, 64], &mut rng).unwrap();
        let nets: [(&MlpSpec, Vec<f64>); 6] = [
            (&cont.net_v.spec, cont.net_v.sample_params(&mut rng).theta.0),
            (&cont.net_x.spec, cont.net_x.sample_params(&mut rng).theta.0),
            (&bin.net_x.spec, bin.net_x.sample_params(&mut rng).theta.0),
            (&cont.net_y.spec, cont.net_y.sample_params(&mut rng).theta.0),
            (&encoder.0.spec, encoder.0.params.0.clone()),
            (&disc.0.spec, disc.0.params.0.clone()),
        ];
        for (i, (spec, params)) in nets.iter().enumerate() {
            let o = fd_network(spec, params, &mut rng);
            per_net[i].1.merge(o);
        }
        per_net[6].1.merge(fd_latent(TreatmentKind::Continuous, 2000 + seed));
        per_net[7].1.merge(fd_latent(TreatmentKind::Binary, 3000 + seed));
    }
    let secs = start.elapsed().as_secs_f64();
    let worst = per_net.iter().map(|(_, o)| o.worst).fold(0.0, f64::max);
    let checked: usize = per_net.iter().map(|(_, o)| o.checked).sum();
    let kinks: usize = per_net.iter().map(|(_, o)| o.kinks).sum();
    // at most 5% of coordinates may be lost to kinks, or the check is vacuous
    let pass = worst < FD_TOL && kinks * 20 < checked + kinks && per_net.iter().all(|(_, o)| o.checked > 0);
    for (name, o) in &per_net {
        println!("  {name}: worst relative error {:.2e} over {} coordinates ({} kinks skipped)", o.worst, o.checked, o.kinks);
    }
    report(
        1,
        pass,
        format!("worst relative error {worst:.2e} < {FD_TOL:e} over {checked} coordinates, 20 seeds, {secs:.1}s"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 2

fn flat_model(q: usize) -> CausalBgmModel {
    let mut m = CausalBgmModel::new(
        LatentConfig::new(1, 1, 1, q - 3).unwrap(),
        TreatmentKind::Continuous,
        3,
        &Architecture::default(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    for net in [&mut m.net_v, &mut m.net_x, &mut m.net_y] {
        net.mu.iter_mut().for_each(|w| *w = 0.0);
        let last = *net.spec.layers().last().unwrap();
        net.mu[last.biases()][last.fan_out - 1] = softplus_inv(1.0);
    }
    m
}

fn batch_mean_se(xs: &[f64], batches: usize) -> f64 {
    let len = xs.len() / batches;
    let means: Vec<f64> = xs
        .chunks(len)
        .take(batches)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (batches as f64 - 1.0);
    (var / batches as f64).sqrt()
}

#[test]
fn criterion_2_mh_recovers_the_prior() {
    let start = Instant::now();
    let q = 4;
    let m = flat_model(q);
    let draw = m.mean_draw();
    let v = [0.4, -1.0, 0.2];
    let obs = Observation { x: -0.3, y: 1.2, v: &v };
    let config = McmcConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let chain = mh_sample(&m, &obs, &draw, &[0.5; 4], 0, &config, 1, &mut rng).unwrap();
    let mut pass = chain.len() == 3000 && config.burn_in == 5000;
    let mut detail = Vec::new();
    for k in 0..q {
        let xs: Vec<f64> = (0..chain.len()).map(|s| chain.draw(s)[k]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0);
        let se = batch_mean_se(&xs, 30);
        pass &= mean.abs() < 3.0 * se && (var - 1.0).abs() < 0.1;
        detail.push(format!("z{}: mean {mean:+.3} (3se {:.3}) var {var:.3}", k + 1, 3.0 * se));
    }
    report(
        2,
        pass,
        format!(
            "{} draws after {} burn-in, acceptance {:.2}; {}; {:.1}s",
            chain.len(),
            config.burn_in,
            chain.acceptance_rate(),
            detail.join(", "),
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 3

/// Sort the draws and interpolate linearly between the order statistics at
/// position `(S - 1) * prob`.
fn sort_oracle(draws: &[f64], prob: f64) -> f64 {
    let mut s = draws.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (s.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = if lo + 1 < s.len() { lo + 1 } else { lo };
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

fn random_chain(owner: usize, q: usize, len: usize, rng: &mut ChaCha8Rng) -> PosteriorChain {
    PosteriorChain {
        owner,
        dim: q,
        draws: normals(rng, q * len),
        accepted: len / 3,
        proposed: len,
        burn_in: 0,
        proposal_std: 1.0,
    }
}

#[test]
fn criterion_3_interval_oracle() {
    const ALPHAS: [f64; 3] = [0.01, 0.05, 0.1];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let latent = LatentConfig::new(1, 1, 1, 1).unwrap();
    let small = Architecture {
        v_hidden: vec![8],
        x_hidden: vec![8],
        y_hidden: vec![8],
    };
    let mut exact = true;
    let mut nested = true;
    let mut cases = 0;

    let bin = CausalBgmModel::new(latent, TreatmentKind::Binary, 3, &small, &mut rng).unwrap();
    for (owner, len) in [(0, 1), (1, 2), (2, 37), (3, 3000)] {
        let chain = random_chain(owner, 4, len, &mut rng);
        let theta = bin.net_y.sample_params(&mut rng);
        let mut prev: Option<EffectEstimate> = None;
        for &a in &ALPHAS {
            let seed = 100 + owner as u64;
            let draws = ite_draws(&bin, &chain, &theta, OutcomeDraw::PosteriorPredictive, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let est = estimate_ite(&bin, &chain, &theta, a, OutcomeDraw::PosteriorPredictive, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            exact &= est.lower == sort_oracle(&draws, a / 2.0) && est.upper == sort_oracle(&draws, 1.0 - a / 2.0);
            if let Some(p) = prev {
                // smaller alpha first: each interval must contain the next
                nested &= p.lower <= est.lower && est.upper <= p.upper;
            }
            prev = Some(est);
            cases += 1;
        }
    }

    let cont = CausalBgmModel::new(latent, TreatmentKind::Continuous, 3, &small, &mut rng).unwrap();
    let posteriors: Vec<IndividualPosterior> = (0..25)
        .map(|i| IndividualPosterior {
            owner: i,
            segments: (0..2)
                .map(|_| ChainSegment {
                    chain: random_chain(i, 4, 150, &mut rng),
                    theta_y: cont.net_y.sample_params(&mut rng),
                })
                .collect(),
        })
        .collect();
    let grid = linspace(-1.5, 1.5, 9);
    let draws = adrf_draws(&cont, &posteriors, &grid, OutcomeDraw::PosteriorPredictive, 77).unwrap();
    let mut prev: Option<Vec<EffectEstimate>> = None;
    for &a in &ALPHAS {
        let curve = estimate_adrf(&cont, &posteriors, &grid, a, OutcomeDraw::PosteriorPredictive, 77).unwrap();
        for (k, e) in curve.estimates.iter().enumerate() {
            let row = draws.row(k);
            exact &= row.len() == 300;
            exact &= e.lower == sort_oracle(row, a / 2.0) && e.upper == sort_oracle(row, 1.0 - a / 2.0);
            cases += 1;
        }
        if let Some(p) = &prev {
            for (w, n) in p.iter().zip(&curve.estimates) {
                nested &= w.lower <= n.lower && n.upper <= w.upper;
            }
        }
        prev = Some(curve.estimates);
    }
    let pass = exact && nested;
    report(
        3,
        pass,
        format!("{cases} intervals; endpoints identical to sort oracle: {exact}; nested over alpha {ALPHAS:?}: {nested}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------- criteria 4 and 5

const DESK_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const DESK_N: usize = 3000;
const DESK_P: usize = 20;
const RANDOM_INIT_EPOCHS: usize = 200;

fn desk_train(seed: u64, init: InitStrategy) -> TrainConfig {
    let mut c = TrainConfig {
        seed,
        lr: 1e-3,
        latent_lr: 1e-2,
        init,
        ..Default::default()
    };
    c.epochs = Some(match init {
        InitStrategy::Egm => 100,
        InitStrategy::Random => RANDOM_INIT_EPOCHS,
    });
    c
}

fn desk_estimate() -> EstimateConfig {
    let (lo, hi) = DgpName::LinearGaussian.evaluation_interval().unwrap();
    EstimateConfig {
        grid_range: Some((lo, hi)),
        grid_size: 100,
        mcmc: McmcConfig {
            burn_in: 500,
            keep: 100,
            tune_proposal: true,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn desk_data(seed: u64) -> bgm_core::data::Dataset {
    generate(&DgpSpec::new(DgpName::LinearGaussian, DESK_N, DESK_P, seed)).unwrap().0
}

/// Least-squares line of `y` on `x`, evaluated along `grid`.
fn naive_curve(x: &[f64], y: &[f64], grid: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    grid.iter().map(|g| my + slope * (g - mx)).collect()
}

#[derive(Debug, Clone, Copy)]
struct DeskRun {
    rmse: f64,
    naive_rmse: f64,
    acceptance: f64,
    secs: f64,
}

fn desk_run(seed: u64, init: InitStrategy) -> DeskRun {
    let start = Instant::now();
    let data = desk_data(seed);
    let fitted = fit(&data, &desk_train(seed, init)).unwrap();
    let (rep, _) = estimate(&fitted, &data, &desk_estimate()).unwrap();
    let Effects::Adrf { curve } = rep.effects else {
        panic!("continuous data must give an ADRF");
    };
    let truth: Vec<f64> = curve.grid.iter().map(|&x| DgpName::LinearGaussian.true_adrf(x).unwrap()).collect();
    let naive = naive_curve(&data.x, &data.y, &curve.grid);
    DeskRun {
        rmse: rmse(&truth, &curve.points()).unwrap(),
        naive_rmse: rmse(&truth, &naive).unwrap(),
        acceptance: rep.mean_acceptance,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn egm_runs() -> &'static [DeskRun] {
    static RUNS: OnceLock<Vec<DeskRun>> = OnceLock::new();
    RUNS.get_or_init(|| DESK_SEEDS.iter().map(|&s| desk_run(s, InitStrategy::Egm)).collect())
}

fn show(runs: &[DeskRun]) -> String {
    runs.iter().map(|r| format!("{:.3}", r.rmse)).collect::<Vec<_>>().join(", ")
}

#[test]
fn criterion_4_linear_gaussian_recovery() {
    let runs = egm_runs();
    let rm = median(&runs.iter().map(|r| r.rmse).collect::<Vec<_>>());
    let naive = median(&runs.iter().map(|r| r.naive_rmse).collect::<Vec<_>>());
    let secs: f64 = runs.iter().map(|r| r.secs).sum();
    let acc = median(&runs.iter().map(|r| r.acceptance).collect::<Vec<_>>());
    let pass = rm < 0.15 && rm <= naive / 2.0;
    report(
        4,
        pass,
        format!(
            "median ADRF RMSE {rm:.4} (< 0.15, runs [{}]); naive regression RMSE {naive:.4} (need <= {:.4}); median acceptance {acc:.2}; {secs:.0}s",
            show(runs),
            naive / 2.0
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_egm_beats_random_initialization() {
    let egm = egm_runs();
    let random: Vec<DeskRun> = DESK_SEEDS.iter().map(|&s| desk_run(s, InitStrategy::Random)).collect();
    let me = median(&egm.iter().map(|r| r.rmse).collect::<Vec<_>>());
    let mr = median(&random.iter().map(|r| r.rmse).collect::<Vec<_>>());
    let pass = me < mr;
    report(
        5,
        pass,
        format!(
            "median RMSE EGM {me:.4} [{}] vs random {mr:.4} [{}] ({RANDOM_INIT_EPOCHS} epochs)",
            show(egm),
            show(&random)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 6

#[test]
#[ignore = "slow: 30 full fits"]
fn criterion_6_interval_coverage() {
    const ALPHAS: [f64; 3] = [0.01, 0.05, 0.1];
    // X = Z0 + noise is symmetric about zero, so zero is the median treatment
    let x_values = [0.0];
    let est = desk_estimate();
    let table = coverage_study(
        30,
        &ALPHAS,
        &x_values,
        |x| DgpName::LinearGaussian.true_adrf(x).unwrap(),
        |r| {
            let seed = 500 + r as u64;
            let data = desk_data(seed);
            let fitted = fit(&data, &desk_train(seed, InitStrategy::Egm))?;
            let sample = posterior_sample(&fitted, &data, &est)?;
            adrf_draws_original(&fitted, &sample, &x_values, est.outcome_draw)
        },
    )
    .unwrap();
    let c = &table.coverage[0];
    let pass = table.succeeded == 30 && (0.8..=1.0).contains(&c[1]) && c[0] >= c[1] && c[1] >= c[2];
    let lengths = &table.lengths[0][1];
    let mean_length = lengths.iter().sum::<f64>() / lengths.len().max(1) as f64;
    report(
        6,
        pass,
        format!(
            "coverage at x = 0 for alpha {ALPHAS:?}: {c:?} over {} replicates (need alpha=0.05 in [0.80, 1.00], monotone); mean 95% interval length {mean_length:.4}",
            table.succeeded
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_8_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..500);
        let truth: Vec<f64> = (0..n)
            .map(|_| {
                let t: f64 = rng.sample(StandardNormal);
                t + t.signum() * 0.1
            })
            .collect();
        let est: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect();

        let mut sq = 0.0;
        let mut ape = 0.0;
        let (mut st, mut se) = (0.0, 0.0);
        for i in 0..n {
            let d = est[i] - truth[i];
            sq += d * d;
            ape += d.abs() / truth[i].abs();
            st += truth[i];
            se += est[i];
        }
        let nf = n as f64;
        let oracle = [(sq / nf).sqrt(), ape / nf, (se / nf - st / nf).abs(), sq / nf];
        let c = metrics_continuous(&truth, &est).unwrap();
        let b = metrics_binary(&truth, &est).unwrap();
        for (got, want) in [c.rmse, c.mape, b.eps_ate, b.eps_pehe].iter().zip(oracle) {
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
        }
    }
    let pass = worst < 1e-12;
    report(8, pass, format!("100 random vectors; worst relative deviation {worst:.2e} (< 1e-12)"));
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn criterion_9_sir_single_index() {
    let (n, p) = (5000, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut beta = normals(&mut rng, p);
    let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
    beta.iter_mut().for_each(|b| *b /= norm);
    // correlated covariates: v_j = w_j + 0.5 w_{j-1}
    let mut v = vec![0.0; n * p];
    let mut y = vec![0.0; n];
    for i in 0..n {
        let w = normals(&mut rng, p);
        for j in 0..p {
            v[i * p + j] = w[j] + if j > 0 { 0.5 * w[j - 1] } else { 0.0 };
        }
        let index: f64 = (0..p).map(|j| beta[j] * v[i * p + j]).sum();
        y[i] = index + 0.25 * index.powi(3) + 0.5 * rng.sample::<f64, _>(StandardNormal);
    }
    let res = sir(&v, p, &y, &SirConfig::default()).unwrap();
    let dir = &res.eigenvectors[0];
    let dn = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    let cos = dir.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>().abs() / dn;
    let angle = cos.min(1.0).acos().to_degrees();
    let pass = res.recommended_k == 1 && angle < 10.0;
    report(
        9,
        pass,
        format!(
            "recommended_k {} (need 1); leading direction {angle:.2} degrees from truth (< 10); top eigenvalues {:.3?}",
            res.recommended_k,
            &res.eigenvalues[..3]
        ),
    );
    assert!(pass);
}
