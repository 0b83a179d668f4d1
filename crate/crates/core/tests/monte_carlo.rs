//! Seeded Monte Carlo checks against the simulation design. Every panel here
//! comes from the independent generator in `common`, except where the
//! library generator itself is under test.

mod common;

use common::{beta1, brute_force_lts, design_loadings, draw, median, rng, Design};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use sci_core::simulation::{design_loadings as library_loadings, BetaPath};
use sci_core::*;

const AR_LONG_RUN_VAR: f64 = 1.0 / (0.7 * 0.7);

fn ar2_marginal_var() -> f64 {
    let (a, b) = (0.2, 0.1);
    (1.0 - b) / ((1.0 + b) * ((1.0 - b) * (1.0 - b) - a * a))
}

fn fraction(hits: usize, n: usize) -> f64 {
    hits as f64 / n as f64
}

fn sim_config(t0: usize, n_interfered: usize) -> SimConfig {
    SimConfig {
        n_units: 10,
        t0,
        n_interfered,
        r_fit: 2,
        n_reps: 1,
        n_boot: 0,
        block_len: None,
        master_seed: 11,
        beta_path: BetaPath::Continuous,
        fix_selection: false,
    }
}

/// Runs `f` over seeds, tolerating at most 2% failed fits.
fn over_seeds<R>(n: u64, mut f: impl FnMut(u64) -> Result<R>) -> Vec<R> {
    let out: Vec<R> = (0..n).filter_map(|s| f(s).ok()).collect();
    assert!(out.len() as f64 >= 0.98 * n as f64, "{} of {n} fits failed", n as usize - out.len());
    out
}

#[test]
fn library_design_matches_the_written_loadings() {
    assert_eq!(library_loadings(10), design_loadings());
}

#[test]
fn generator_truth_matches_direct_evaluation() {
    for n0 in 1..=4 {
        let draw = simulate_panel::<f64>(&sim_config(200, n0), 3).unwrap();
        let oracle = (201..=400).map(|t| beta1(t, 200)).sum::<f64>() / 200.0;
        assert!((draw.truth[0] - oracle).abs() < 1e-12);
        for i in 1..10 {
            let expected = if i < n0 { 0.75 * oracle } else { 0.0 };
            assert!((draw.truth[i] - expected).abs() < 1e-12);
        }
        assert_eq!(draw.true_set, (n0..10).collect::<Vec<_>>());
        for j in 0..200 {
            assert!((draw.effects[(0, j)] - beta1(201 + j, 200)).abs() < 1e-12);
        }
    }
}

#[test]
fn generator_factor_means_shift_to_alpha1() {
    let lam = design_loadings();
    let gram_inv = (lam.transpose() * &lam).try_inverse().unwrap();
    let proj = &gram_inv * lam.transpose();
    let reps = 20;
    let t0 = 2000;
    let mut mean_shift = DVector::zeros(2);
    for rep in 0..reps {
        let d = simulate_panel::<f64>(&sim_config(t0, 2), rep).unwrap();
        let post = d.panel.outcomes().columns(t0, t0).column_mean() - &d.truth;
        mean_shift += &proj * post / reps as f64;
    }
    for k in 0..2 {
        let var = AR_LONG_RUN_VAR / t0 as f64 * (1.0 + gram_inv[(k, k)]);
        let se = (var / reps as f64).sqrt();
        assert!((mean_shift[k] - 1.0).abs() < 3.0 * se, "factor {k}: {} vs 1 (se {se})", mean_shift[k]);
    }
}

#[test]
fn generator_noise_has_yule_walker_variance() {
    let lam = design_loadings();
    let t0 = 5000;
    let d = simulate_panel::<f64>(&sim_config(t0, 1), 0).unwrap();
    let pre = d.panel.outcomes().columns(0, t0);
    let scaled: f64 = (0..10)
        .map(|i| {
            let row = pre.row(i);
            let m = row.mean();
            let v = row.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (t0 - 1) as f64;
            v / (lam.row(i).norm_squared() + 1.0)
        })
        .sum::<f64>()
        / 10.0;
    let target = ar2_marginal_var();
    assert!((scaled / target - 1.0).abs() < 0.05, "{scaled} vs {target}");
}

#[test]
fn null_panel_mean_difference_vanishes() {
    let sup: Vec<f64> = (0..100).map(|s| split_means(&draw(&Design::null(2000), s).panel).diff.amax()).collect();
    assert!(median(sup) < 0.2);
}

#[test]
fn idiosyncratic_scale_is_recovered() {
    let sigmas = over_seeds(100, |s| estimate_sigma(&draw(&Design::standard(200, 2), s).panel, 2, SigmaWindow::Full));
    let inside = sigmas.iter().filter(|&&v| (0.8..=1.6).contains(&v)).count();
    assert!(fraction(inside, sigmas.len()) >= 0.95, "{inside} of {} in range", sigmas.len());
}

#[test]
fn kaiser_rule_finds_two_factors() {
    let hits = (0..100).filter(|&s| suggest_r(&draw(&Design::standard(200, 2), s).panel) == 2).count();
    assert!(hits >= 90, "{hits} of 100");
}

#[test]
fn lts_matches_enumeration_with_gross_outliers() {
    for seed in 0..20 {
        let mut g = rng(seed);
        let x = DMatrix::from_fn(8, 2, |_, _| StandardNormal.sample(&mut g));
        let mut y = DVector::from_fn(8, |_, _| StandardNormal.sample(&mut g));
        for i in [1, 4, 6] {
            y[i] += 20.0;
        }
        let (coef, objective) = brute_force_lts(&y, &x, 5);
        let fit = lts_regress(&y, &x, 5).unwrap();
        assert!((fit.objective - objective).abs() < 1e-9 * objective.max(1.0));
        assert!((fit.coef - coef).amax() < 1e-6);
    }
}

#[test]
fn null_panel_keeps_a_majority_of_controls() {
    let fits = over_seeds(100, |s| estimate_average_effects(&draw(&Design::null(200), s).panel, 2, None));
    let majority = fits.iter().filter(|e| e.selected_controls.len() >= 7).count();
    let within = fits.iter().filter(|e| e.beta_hat.amax() <= e.threshold).count();
    let both = fits.iter().filter(|e| e.selected_controls.len() >= 7 && e.beta_hat.amax() <= e.threshold).count();
    assert!(
        fraction(both, fits.len()) >= 0.95,
        "{both} of {} pass (majority kept {majority}, all effects within threshold {within})",
        fits.len()
    );
}

#[test]
fn direct_effect_is_median_unbiased_without_interference() {
    let errs = over_seeds(300, |s| {
        let d = draw(&Design::standard(200, 1), s);
        Ok(estimate_average_effects(&d.panel, 2, None)?.beta_hat[0] - d.truth[0])
    });
    let m = median(errs);
    assert!(m.abs() < 0.1, "median bias {m}");
}

#[test]
fn interference_and_null_units_are_recovered() {
    let errs = over_seeds(300, |s| {
        let d = draw(&Design::standard(200, 2), s);
        let e = estimate_average_effects(&d.panel, 2, None)?;
        Ok((e.beta_hat[1] - d.truth[1], e.beta_hat[9] - d.truth[9]))
    });
    let m2 = median(errs.iter().map(|e| e.0).collect());
    let m10 = median(errs.iter().map(|e| e.1).collect());
    assert!(m2.abs() < 0.1, "unit 2 median bias {m2}");
    assert!(m10.abs() < 0.1, "unit 10 median bias {m10}");
}

#[test]
fn refit_tracks_the_direct_effect() {
    let errs = over_seeds(300, |s| {
        let d = draw(&Design::standard(200, 2), s);
        Ok((estimate_average_effects(&d.panel, 2, None)?.beta_hat[0] - d.truth[0]).abs())
    });
    let m = median(errs);
    assert!(m < 0.15, "median absolute error {m}");
}

#[test]
fn covariate_adjustment_preserves_bias() {
    let coef: Vec<f64> = (0..10).map(|i| 0.5 + 0.1 * i as f64).collect();
    let pairs = over_seeds(200, |s| {
        let d = draw(&Design::standard(200, 1), s);
        let mut g = rng(10_000 + s);
        let c = DMatrix::from_fn(1, 400, |_, _| StandardNormal.sample(&mut g));
        let y = DMatrix::from_fn(10, 400, |i, t| d.y[(i, t)] + coef[i] * c[(0, t)]);
        let augmented = Panel64::from_matrix(y, 200)?;
        let adj = residualize_covariates(&augmented, &CovariatePanel::new(c, vec!["c".into()])?)?;
        let with = estimate_average_effects(&adj.residual_panel, 2, None)?.beta_hat[0] - d.truth[0];
        let without = estimate_average_effects(&d.panel, 2, None)?.beta_hat[0] - d.truth[0];
        Ok((with, without))
    });
    let a = median(pairs.iter().map(|p| p.0).collect());
    let b = median(pairs.iter().map(|p| p.1).collect());
    assert!((a - b).abs() < 0.1, "adjusted {a} vs plain {b}");
}

#[test]
fn did_is_biased_under_heterogeneous_loadings() {
    let all: Vec<f64> = (0..300)
        .map(|s| {
            let d = draw(&Design::standard(200, 1), s);
            did_estimate(&d.panel, &(1..10).collect::<Vec<_>>()).unwrap() - d.truth[0]
        })
        .collect();
    let valid: Vec<f64> = (0..300)
        .map(|s| {
            let d = draw(&Design::standard(200, 2), s);
            did_estimate(&d.panel, &(2..10).collect::<Vec<_>>()).unwrap() - d.truth[0]
        })
        .collect();
    let (m_all, m_valid) = (median(all), median(valid));
    assert!(m_all.abs() > 0.2, "all controls {m_all}");
    assert!(m_valid.abs() > 0.2, "valid controls {m_valid}");
}

#[test]
fn sieve_tracks_the_effect_path_better_than_a_line() {
    let lam = design_loadings();
    let shift = (lam.row(0) * DVector::from_vec(vec![1.0, 1.0]))[(0, 0)];
    let rmse = |fitted: &DMatrix<f64>, d: &common::Draw| {
        let err = (0..200).map(|j| (fitted[(0, j)] - d.effects[(0, j)] - shift).powi(2)).sum::<f64>();
        (err / 200.0).sqrt()
    };
    let mut sieve = Vec::new();
    let mut line = Vec::new();
    for s in 0..50 {
        let d = draw(&Design::standard(200, 2), s);
        let a = fit_trend(&d.panel, TrendSpec::Sieve { k: Some(8), smoothness: 2.0 }).unwrap();
        let b = fit_trend(&d.panel, TrendSpec::Poly { degree: 1 }).unwrap();
        let (ra, rb) = (rmse(&a.fitted, &d), rmse(&b.fitted, &d));
        assert!(ra.is_finite() && rb.is_finite());
        sieve.push(ra);
        line.push(rb);
    }
    let (ms, ml) = (median(sieve), median(line));
    assert!(ms < ml, "sieve {ms} vs line {ml}");
}

#[test]
fn library_generator_agrees_with_default_path() {
    let cfg = sim_config(50, 2);
    assert_eq!(BetaPath::default(), BetaPath::Continuous);
    let d = simulate_panel::<f64>(&cfg, 0).unwrap();
    assert!((d.truth[1] - 0.75 * d.truth[0]).abs() < 1e-12);
}
