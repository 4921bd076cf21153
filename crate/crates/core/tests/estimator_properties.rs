mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use perceptfe::estimators::{
    absorb_fixed_effects, build_design, fit, fit_linear_design, fit_linear_fe, fit_pooled_ols, ClogitProblem, Control,
    Estimator, FitOptions, LogitFeProblem, ModelSpec, Outcome, Stratum,
};
use perceptfe::linkage::DriverPanel;
use perceptfe::sim::{generate_panel, SimConfig, ThresholdParams};

fn spec(est: Estimator, controls: &[Control]) -> ModelSpec {
    ModelSpec::new(est, Outcome::Searched, controls.iter().copied())
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn demeaned_columns_are_orthogonal_to_every_indicator(seed in any::<u64>(), officer in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let panels = common::random_panels(&mut rng, 40, 6);
        let controls: &[Control] = if officer { &[Control::Officer] } else { &[] };
        let Ok(d) = build_design(&panels, &spec(Estimator::LinearFe, controls)) else { return Ok(()) };
        let w = absorb_fixed_effects(&d).unwrap();
        let mut cols = vec![&w.y[..], &w.treatment[..]];
        cols.extend(w.controls.iter().map(|c| &c[..]));
        for f in &w.fixed_effects {
            for col in &cols {
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut sums = vec![0.0; f.n_levels()];
                for (&g, &v) in f.codes.iter().zip(col.iter()) {
                    sums[g as usize] += v;
                }
                for s in sums {
                    prop_assert!(s.abs() <= 1e-8 * norm.max(1.0), "indicator product {s} vs norm {norm}");
                }
            }
        }
    }

    #[test]
    fn scaling_the_outcome_scales_estimate_and_error(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let panels = common::random_panels(&mut rng, 40, 6);
        let s = spec(Estimator::LinearFe, &[Control::LocationTime]);
        let Ok(d) = build_design(&panels, &s) else { return Ok(()) };
        let Ok(base) = fit_linear_design(&d, &s, &FitOptions::default()) else { return Ok(()) };
        let mut scaled = d.clone();
        scaled.y.iter_mut().for_each(|v| *v *= 100.0);
        let big = fit_linear_design(&scaled, &s, &FitOptions::default()).unwrap();
        prop_assert!(rel_err(big.delta_hat, 100.0 * base.delta_hat) <= 1e-10);
        prop_assert!(rel_err(big.se_delta, 100.0 * base.se_delta) <= 1e-10);
        prop_assert!((big.p_value - base.p_value).abs() <= 1e-12);
    }

    #[test]
    fn panel_and_stop_order_do_not_matter(seed in any::<u64>(), est in 0usize..3) {
        let est = [Estimator::LinearFe, Estimator::FeglmLogit, Estimator::ConditionalLogit][est];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let panels = common::random_panels(&mut rng, 40, 6);
        let s = spec(est, &[]);
        let mut shuffled: Vec<DriverPanel> = panels.clone();
        shuffled.reverse();
        let k = rng.random_range(0..shuffled.len());
        shuffled.rotate_left(k);
        let shuffled: Vec<DriverPanel> = shuffled
            .into_iter()
            .map(|p| {
                let mut stops = p.stops.clone();
                stops.reverse();
                DriverPanel::new(p.driver_id, p.state, p.linkable, stops)
            })
            .collect();
        match (fit(&panels, &s), fit(&shuffled, &s)) {
            // Debug output round-trips every float, so this also matches NaN p-values from zero-SE fits
            (Ok(a), Ok(b)) => prop_assert_eq!(format!("{a:?}"), format!("{b:?}")),
            (Err(a), Err(b)) => prop_assert_eq!(a.to_string(), b.to_string()),
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a.map(|r| r.delta_hat), b.map(|r| r.delta_hat)),
        }
    }
}

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[j] += h;
            down[j] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

fn gradient_close(analytic: &[f64], numeric: &[f64]) -> bool {
    let scale = analytic.iter().chain(numeric).fold(1.0_f64, |m, v| m.max(v.abs()));
    analytic.iter().zip(numeric).all(|(a, n)| (a - n).abs() <= 1e-5 * scale)
}

#[test]
fn conditional_logit_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = 3;
    let strata: Vec<Stratum> = (0..40)
        .map(|_| {
            let n = rng.random_range(2..=10);
            let x = nalgebra::DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            Stratum { x, y: (0..n).map(|_| rng.random::<f64>() < 0.4).collect() }
        })
        .collect();
    let problem = ClogitProblem::new(strata, vec!["a".into(), "b".into(), "c".into()]);
    for _ in 0..10 {
        let theta: Vec<f64> = (0..p).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let ev = problem.evaluate(&theta);
        let numeric = central_difference(|t| problem.evaluate(t).loglik, &theta, 1e-6);
        assert!(gradient_close(ev.gradient.as_slice(), &numeric), "{:?} vs {numeric:?}", ev.gradient);
    }
}

#[test]
fn fe_logit_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let panels = common::random_panels(&mut rng, 30, 6);
    let d = build_design(&panels, &spec(Estimator::FeglmLogit, &[Control::Duration])).unwrap();
    let problem = LogitFeProblem::from_design(&d);
    let n_alpha = d.drivers.n_levels();
    for _ in 0..10 {
        let alpha: Vec<f64> = (0..n_alpha).map(|_| rng.random::<f64>() * 2.0 - 1.5).collect();
        let beta: Vec<f64> = vec![rng.random::<f64>() - 0.5, 0.05 * (rng.random::<f64>() - 0.5)];
        let (ga, gb) = problem.gradient(&alpha, &beta);
        let nb = central_difference(|b| problem.loglik(&alpha, b), &beta, 1e-6);
        let na = central_difference(|a| problem.loglik(a, &beta), &alpha, 1e-6);
        assert!(gradient_close(&gb, &nb), "{gb:?} vs {nb:?}");
        assert!(gradient_close(&ga, &na));
    }
}

#[test]
fn anti_hispanic_threshold_gives_positive_estimates() {
    let s = spec(Estimator::LinearFe, &[]);
    let positive = (0..100u64)
        .into_par_iter()
        .filter(|&seed| {
            let mut cfg = SimConfig::taste_preset(5_000, 300 + seed);
            cfg.threshold = ThresholdParams { c1: -0.05, ..cfg.threshold };
            let (panels, _) = generate_panel(&cfg).unwrap();
            fit_linear_fe(&panels, &s).unwrap().delta_hat > 0.0
        })
        .count();
    assert!(positive >= 95, "{positive}/100 positive");
}

/// Officer race shifts both perception and the search threshold. Without
/// driver effects the estimate picks up between-driver differences; with
/// driver effects but no officer control it picks up the officer shift;
/// absorbing officer removes most of the error.
#[test]
fn officer_confound_ordering() {
    let n = 200;
    let errors: Vec<[f64; 3]> = (0..n as u64)
        .into_par_iter()
        .map(|seed| {
            let (panels, truth) = generate_panel(&SimConfig::officer_confound_preset(3_000, 500 + seed)).unwrap();
            let pooled = fit_pooled_ols(&panels, &spec(Estimator::LinearFe, &[])).unwrap().delta_hat;
            let fe = fit_linear_fe(&panels, &spec(Estimator::LinearFe, &[])).unwrap().delta_hat;
            let fe_officer = fit_linear_fe(&panels, &spec(Estimator::LinearFe, &[Control::Officer])).unwrap().delta_hat;
            [pooled - fe, (fe - truth.delta).abs(), (fe_officer - truth.delta).abs()]
        })
        .collect();
    let mean = |k: usize| errors.iter().map(|e| e[k]).sum::<f64>() / n as f64;
    let gap = errors.iter().map(|e| e[0].abs()).sum::<f64>() / n as f64;
    assert!(gap > 0.01, "pooled and FE estimates barely differ: {gap}");
    assert!(mean(2) < 0.5 * mean(1), "officer control error {} vs {}", mean(2), mean(1));
}

#[test]
fn fits_agree_across_thread_counts() {
    let (panels, _) = generate_panel(&SimConfig::officer_confound_preset(2_000, 17)).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            [
                spec(Estimator::LinearFe, &[Control::Officer, Control::LocationTime]),
                spec(Estimator::FeglmLogit, &[]),
                spec(Estimator::ConditionalLogit, &[Control::Officer]),
            ]
            .iter()
            .map(|s| fit(&panels, s).unwrap())
            .collect::<Vec<_>>()
        })
    };
    let one = run(1);
    let four = run(4);
    for (a, b) in one.iter().zip(&four) {
        assert!((a.delta_hat - b.delta_hat).abs() <= 1e-12 * a.delta_hat.abs().max(1.0));
        assert!((a.se_delta - b.se_delta).abs() <= 1e-12 * a.se_delta.max(1.0));
    }
}
