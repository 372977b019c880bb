//! Property tests for invariants that hold for arbitrary inputs.

use bgm_core::bnn::kl_standard_normal;
use bgm_core::data::{standardize, Dataset};
use bgm_core::dimsel::{elbow, sir, SirConfig};
use bgm_core::effects::{metrics_binary, metrics_continuous, quantile, EffectEstimate};
use bgm_core::latent::{latent_log_posterior, LatentEvaluator, Observation};
use bgm_core::model::{Architecture, CausalBgmModel, LatentConfig, TreatmentKind};
use bgm_core::nn::{AdamConfig, AdamState, MlpSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn sorted_oracle(xs: &[f64], p: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p * (s.len() - 1) as f64;
    let i = pos.floor() as usize;
    if i + 1 >= s.len() {
        return s[s.len() - 1];
    }
    s[i] * (1.0 - (pos - i as f64)) + s[i + 1] * (pos - i as f64)
}

fn gaussian_vec(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[test]
fn quantiles_match_oracle_at_fixed_sizes() {
    for (seed, s) in [(1u64, 1usize), (2, 2), (3, 100), (4, 3000)] {
        let xs = gaussian_vec(seed, s);
        for p in [0.0, 0.005, 0.025, 0.05, 0.5, 0.95, 0.975, 0.995, 1.0] {
            let a = quantile(&xs, p);
            let b = sorted_oracle(&xs, p);
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "S={s} p={p}: {a} vs {b}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantile_matches_oracle(xs in prop::collection::vec(-1e3f64..1e3, 1..300), p in 0.0f64..1.0) {
        let a = quantile(&xs, p);
        let b = sorted_oracle(&xs, p);
        prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
    }

    #[test]
    fn intervals_nest(xs in prop::collection::vec(-50f64..50.0, 1..400), a in 0.001f64..0.5, b in 0.001f64..0.5) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let wide = EffectEstimate::from_draws(&xs, lo).unwrap();
        let narrow = EffectEstimate::from_draws(&xs, hi).unwrap();
        prop_assert!(wide.lower <= narrow.lower + 1e-12);
        prop_assert!(narrow.upper <= wide.upper + 1e-12);
        prop_assert!(wide.lower <= wide.upper);
    }

    #[test]
    fn metrics_match_formulas(seed in any::<u64>(), k in 1usize..60) {
        let t: Vec<f64> = gaussian_vec(seed, k).iter().map(|x| x + 3.0).collect();
        let e = gaussian_vec(seed ^ 1, k);
        let m = metrics_continuous(&t, &e).unwrap();
        let mut se = 0.0;
        let mut ape = 0.0;
        for i in 0..k {
            se += (t[i] - e[i]).powi(2);
            ape += ((t[i] - e[i]) / t[i]).abs();
        }
        prop_assert!((m.rmse - (se / k as f64).sqrt()).abs() < 1e-12);
        prop_assert!((m.mape - ape / k as f64).abs() < 1e-12);
        let b = metrics_binary(&t, &e).unwrap();
        let ate = (e.iter().sum::<f64>() - t.iter().sum::<f64>()).abs() / k as f64;
        prop_assert!((b.eps_ate - ate).abs() < 1e-12);
        prop_assert!((b.eps_pehe - se / k as f64).abs() < 1e-12);
    }

    #[test]
    fn kl_is_non_negative(mu in prop::collection::vec(-3f64..3.0, 1..20), s in 0.05f64..4.0) {
        let sigma = vec![s; mu.len()];
        let kl = kl_standard_normal(&mu, &sigma).unwrap();
        prop_assert!(kl >= -1e-15);
        let zero = kl_standard_normal(&vec![0.0; mu.len()], &vec![1.0; mu.len()]).unwrap();
        prop_assert!(zero.abs() < 1e-15);
    }

    #[test]
    fn variance_slot_is_positive(seed in any::<u64>(), scale in 0.1f64..100.0) {
        let spec = MlpSpec::new(vec![3, 5, 2], Some(1..2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<f64> = (0..spec.num_params()).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let input: Vec<f64> = (0..3).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let out = spec.forward(&params, &input).unwrap();
        prop_assert!(out[1] > 0.0);
        prop_assert_eq!(out, spec.forward(&params, &input).unwrap());
    }

    #[test]
    fn adam_commutes_with_permutation(seed in any::<u64>(), steps in 1usize..6) {
        let n = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perm: Vec<usize> = { let mut p: Vec<usize> = (0..n).collect(); p.reverse(); p.rotate_left(seed as usize % n); p };
        let mut a = gaussian_vec(seed, n);
        let mut b: Vec<f64> = perm.iter().map(|&i| a[i]).collect();
        let mut sa = AdamState::new(AdamConfig::with_lr(0.01), n);
        let mut sb = sa.clone();
        for _ in 0..steps {
            let g: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let gp: Vec<f64> = perm.iter().map(|&i| g[i]).collect();
            sa.step(&mut a, &g).unwrap();
            sb.step(&mut b, &gp).unwrap();
        }
        for (j, &i) in perm.iter().enumerate() {
            prop_assert_eq!(a[i], b[j]);
        }
    }

    #[test]
    fn standardization_inverts(seed in any::<u64>(), n in 2usize..40, p in 1usize..5, binary in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (kind, x): (TreatmentKind, Vec<f64>) = if binary {
            (TreatmentKind::Binary, (0..n).map(|i| (i % 2) as f64).collect())
        } else {
            (TreatmentKind::Continuous, (0..n).map(|_| 3.0 + 2.0 * rng.sample::<f64, _>(StandardNormal)).collect())
        };
        let y = (0..n).map(|_| -1.0 + 5.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let v = (0..n * p).map(|_| 10.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let ds = Dataset::new(x, y, v, p, kind).unwrap();
        let (st, tr) = standardize(&ds).unwrap();
        let back = tr.invert(&st).unwrap();
        for (a, b) in ds.v.iter().zip(&back.v).chain(ds.y.iter().zip(&back.y)).chain(ds.x.iter().zip(&back.x)) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        if binary {
            prop_assert_eq!(&st.x, &ds.x);
        }
    }

    #[test]
    fn csv_round_trip(seed in any::<u64>(), n in 1usize..30, p in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y = (0..n).map(|_| 1e6 * rng.sample::<f64, _>(StandardNormal)).collect();
        let v = (0..n * p).map(|_| 1e-6 * rng.sample::<f64, _>(StandardNormal)).collect();
        let ds = Dataset::new(x, y, v, p, TreatmentKind::Continuous).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice(), std::path::Path::new("mem.csv"), None).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn elbow_is_monotone_in_threshold(seed in any::<u64>(), p in 2usize..10, t1 in 0.05f64..1.0, t2 in 0.05f64..1.0) {
        let mut vals: Vec<f64> = gaussian_vec(seed, p).iter().map(|x| x.abs() + 0.01).collect();
        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        // a ratio gap no spectrum reaches forces the cumulative-variance rule
        let k_lo = elbow(&vals, p, f64::INFINITY, lo);
        let k_hi = elbow(&vals, p, f64::INFINITY, hi);
        prop_assert!(k_lo <= k_hi);
        prop_assert!(k_lo >= 1);
    }
}

fn sir_data(seed: u64, n: usize, p: usize) -> (Vec<f64>, Vec<f64>) {
    let v = gaussian_vec(seed, n * p);
    let e = gaussian_vec(seed + 1, n);
    let y = (0..n).map(|i| v[i * p] + 0.5 * v[i * p + 1].powi(2) + 0.3 * e[i]).collect();
    (v, y)
}

#[test]
fn sir_is_affine_invariant() {
    let (n, p) = (800, 4);
    let (v, y) = sir_data(21, n, p);
    let cfg = SirConfig::default();
    let base = sir(&v, p, &y, &cfg).unwrap();
    let a = gaussian_vec(22, p * p);
    let shift = gaussian_vec(23, p);
    let mut w = vec![0.0; n * p];
    for i in 0..n {
        for j in 0..p {
            // V A + b with A = I + 0.3 * noise, invertible with high probability
            let mut s = shift[j] * 5.0;
            for k in 0..p {
                let ajk = if j == k { 1.0 } else { 0.0 } + 0.3 * a[k * p + j];
                s += v[i * p + k] * ajk;
            }
            w[i * p + j] = s;
        }
    }
    let moved = sir(&w, p, &y, &cfg).unwrap();
    for (x, z) in base.eigenvalues.iter().zip(&moved.eigenvalues) {
        assert!((x - z).abs() < 1e-8, "{:?} vs {:?}", base.eigenvalues, moved.eigenvalues);
    }
}

#[test]
fn sir_is_permutation_invariant() {
    let (n, p) = (500, 3);
    let (v, y) = sir_data(31, n, p);
    let cfg = SirConfig::default();
    let base = sir(&v, p, &y, &cfg).unwrap();
    let mut order: Vec<usize> = (0..n).collect();
    order.reverse();
    order.rotate_left(17);
    let pv: Vec<f64> = order.iter().flat_map(|&i| v[i * p..(i + 1) * p].to_vec()).collect();
    let py: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let moved = sir(&pv, p, &py, &cfg).unwrap();
    for (x, z) in base.eigenvalues.iter().zip(&moved.eigenvalues) {
        assert!((x - z).abs() < 1e-10);
    }
}

#[test]
fn latent_log_posterior_decomposes() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = CausalBgmModel::with_init_sigma(
            LatentConfig::new(2, 1, 1, 2).unwrap(),
            TreatmentKind::Continuous,
            4,
            &Architecture { v_hidden: vec![8, 8], x_hidden: vec![6], y_hidden: vec![6] },
            0.3,
            &mut rng,
        )
        .unwrap();
        let d = m.draw(&mut rng);
        let v = gaussian_vec(seed + 10, 4);
        let z = gaussian_vec(seed + 20, 6);
        let obs = Observation { x: 0.3, y: -1.2, v: &v };
        let total = latent_log_posterior(&m, &obs, &z, &d, &[]).unwrap();
        let mut ev = LatentEvaluator::new(&m, &d);
        let t = ev.terms(&obs, &z, &[]);
        let prior = -0.5 * z.iter().map(|a| a * a).sum::<f64>() - 3.0 * (2.0 * std::f64::consts::PI).ln();
        let lv = m.loglik_v(&v, &z, &d.v).unwrap();
        let lx = m.loglik_x(0.3, &z[0..2], &z[3..4], &d.x, &[]).unwrap();
        let ly = m.loglik_y(-1.2, 0.3, &z[0..2], &z[2..3], &d.y).unwrap();
        assert!((t.prior - prior).abs() < 1e-12);
        assert!((t.v - lv).abs() < 1e-10 && (t.x - lx).abs() < 1e-10 && (t.y - ly).abs() < 1e-10);
        assert!((total - (prior + lv + lx + ly)).abs() < 1e-10);
    }
}
