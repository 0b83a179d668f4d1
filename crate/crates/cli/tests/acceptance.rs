//! Acceptance gate. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line each and exits non-zero if any fails.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use sci_core::dynamic::{estimate_dynamic_effects, TrendSpec};
use sci_core::estimator::{estimate_with_factors, EstimatorOptions};
use sci_core::robust::{lts_regress_with, LtsMode, LtsOptions};
use sci_core::simulation::{sci_label, BetaPath, DID_ALL_LABEL, DID_VALID_LABEL, MD_LABEL};
use sci_core::*;

const SEED: u64 = 2024;

struct Outcome {
    id: u32,
    pass: bool,
    detail: String,
}

fn cell(t0: usize, n_interfered: usize, r_fit: usize, n_boot: usize) -> SimConfig {
    SimConfig {
        n_units: 10,
        t0,
        n_interfered,
        r_fit,
        n_reps: 300,
        n_boot,
        block_len: None,
        master_seed: SEED,
        beta_path: BetaPath::Continuous,
        fix_selection: false,
    }
}

fn run(config: &SimConfig) -> std::result::Result<SimReport, String> {
    run_experiment(config).map_err(|e| e.to_string())
}

/// Coverage of a one-based unit.
fn coverage(report: &SimReport, r: usize, unit: usize) -> f64 {
    report.coverage_for(&sci_label(r), unit).map(|c| c.coverage).unwrap_or(f64::NAN)
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

fn criterion_1() -> Outcome {
    // (N0, T0) -> reference SCI_1 coverage for units 1, 2 and 10
    let targets = [
        (1, 200, [0.951, 0.933, 0.936]),
        (2, 200, [0.954, 0.968, 0.936]),
        (3, 100, [0.963, 0.964, 0.926]),
        (4, 200, [0.951, 0.938, 0.944]),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (n0, t0, target) in targets {
        match run(&cell(t0, n0, 2, 200)) {
            Ok(rep) => {
                let got: Vec<String> = [1, 2, 10]
                    .iter()
                    .zip(target)
                    .map(|(&u, want)| {
                        let c = coverage(&rep, 2, u);
                        pass &= within(c, want, 0.04);
                        format!("{c:.3}/{want}")
                    })
                    .collect();
                parts.push(format!("({n0},{t0}) {}", got.join(" ")));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("({n0},{t0}) failed: {e}"));
            }
        }
    }
    Outcome { id: 1, pass, detail: format!("SCI1 coverage of b1 b2 b10 vs reference (+-0.04): {}", parts.join("; ")) }
}

fn criterion_2() -> Outcome {
    match run(&cell(50, 1, 1, 200)) {
        Ok(rep) => {
            let c = coverage(&rep, 1, 1);
            Outcome { id: 2, pass: within(c, 0.917, 0.04), detail: format!("SCI2 coverage of b1 at (1,50) = {c:.3}, target 0.917 +- 0.04") }
        }
        Err(e) => Outcome { id: 2, pass: false, detail: format!("(1,50) r=1 failed: {e}") },
    }
}

/// Point-estimate cells for N0 <= 3 at every T0, without bootstrap.
fn point_cells() -> Vec<(usize, usize, std::result::Result<SimReport, String>)> {
    let mut out = Vec::new();
    for n0 in 1..=3 {
        for t0 in [50, 100, 200] {
            out.push((n0, t0, run(&cell(t0, n0, 2, 0))));
        }
    }
    out
}

fn criterion_3(cells: &[(usize, usize, std::result::Result<SimReport, String>)]) -> Outcome {
    let sci = sci_label(2);
    let mut pass = true;
    let mut parts = Vec::new();
    for (n0, t0, rep) in cells {
        let Ok(rep) = rep else {
            pass = false;
            parts.push(format!("({n0},{t0}) failed"));
            continue;
        };
        let med = |est: &str, unit: usize| rep.bias_for(est, unit).map(|b| b.median_abs).unwrap_or(f64::NAN);
        let bias = |est: &str, unit: usize| rep.bias_for(est, unit).map(|b| b.median).unwrap_or(f64::NAN);
        let s = med(&sci, 1);
        let rivals = [med(MD_LABEL, 1), med(DID_ALL_LABEL, 1), med(DID_VALID_LABEL, 1)];
        let ok = s < 0.1 && rivals.iter().all(|&m| s < m) && bias(&sci, 2).abs() < 0.1 && bias(&sci, 10).abs() < 0.1;
        pass &= ok;
        parts.push(format!(
            "({n0},{t0}) sci {s:.3} (median bias {:+.3}) md {:.3} did {:.3}/{:.3} b2 {:+.3} b10 {:+.3}",
            bias(&sci, 1),
            rivals[0],
            rivals[1],
            rivals[2],
            bias(&sci, 2),
            bias(&sci, 10)
        ));
    }
    Outcome { id: 3, pass, detail: format!("median |b1 err| SCI1 < 0.1 and below MD/DID, |median bias| b2,b10 < 0.1: {}", parts.join("; ")) }
}

fn criterion_4() -> Outcome {
    let a = lts_breakdown_check(9, 2).ok();
    let b = lts_breakdown_check(10, 2).ok();
    Outcome { id: 4, pass: a == Some(2) && b == Some(3), detail: format!("breakdown (9,2) = {a:?}, (10,2) = {b:?}") }
}

fn criterion_5(cells: &[(usize, usize, std::result::Result<SimReport, String>)]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (n0, _, rep) in cells.iter().filter(|c| c.1 == 200) {
        let p = rep.as_ref().map(|r| r.selection_accuracy.p).unwrap_or(f64::NAN);
        pass &= p >= 0.95;
        parts.push(format!("N0={n0} {p:.3}"));
    }
    Outcome { id: 5, pass, detail: format!("P(C_hat = C) >= 0.95 at T0=200: {}", parts.join(", ")) }
}

fn criterion_6(cells: &[(usize, usize, std::result::Result<SimReport, String>)]) -> Outcome {
    let sci = sci_label(2);
    let rmse = |n0: usize, t0: usize| {
        cells
            .iter()
            .find(|c| c.0 == n0 && c.1 == t0)
            .and_then(|c| c.2.as_ref().ok())
            .and_then(|r| r.bias_for(&sci, 1))
            .map(|b| b.rmse)
            .unwrap_or(f64::NAN)
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for n0 in 1..=3 {
        let ratio = rmse(n0, 100) / rmse(n0, 200);
        pass &= (1.2..=1.7).contains(&ratio);
        parts.push(format!("N0={n0} {ratio:.3}"));
    }
    Outcome { id: 6, pass, detail: format!("RMSE(b1) ratio T0=100/200 in [1.2, 1.7]: {}", parts.join(", ")) }
}

fn normal(g: &mut StdRng) -> f64 {
    StandardNormal.sample(g)
}

fn criterion_7() -> Outcome {
    let mut g = StdRng::seed_from_u64(SEED);
    let (mut equal, mut below, mut exact_ok) = (0, 0, 0);
    let n_inst = 200;
    for k in 0..n_inst {
        let n = g.gen_range(6..=12);
        let r = g.gen_range(1..=2);
        let h = n / 2 + 1;
        let x = DMatrix::from_fn(n, r, |_, _| normal(&mut g));
        let mut y = DVector::from_fn(n, |_, _| normal(&mut g));
        for i in 0..g.gen_range(0..=n - h) {
            y[i] += 10.0 * normal(&mut g);
        }
        let exhaustive = LtsOptions { mode: LtsMode::Exhaustive, ..Default::default() };
        let fast = LtsOptions { mode: LtsMode::Fast, seed: k, ..Default::default() };
        let e = lts_regress_with(&y, &x, h, &exhaustive).unwrap();
        let f = lts_regress_with(&y, &x, h, &fast).unwrap();
        let scale = e.objective.max(1e-12);
        if (f.objective - e.objective).abs() <= 1e-9 * scale {
            equal += 1;
        }
        if f.objective < e.objective - 1e-9 * scale {
            below += 1;
        }

        let alpha = DVector::from_fn(r, |_, _| normal(&mut g));
        let mut yx = &x * &alpha;
        for i in h..n {
            yx[i] += 3.0 + normal(&mut g).abs();
        }
        let fits = [lts_regress_with(&yx, &x, h, &exhaustive).unwrap(), lts_regress_with(&yx, &x, h, &fast).unwrap()];
        if fits.iter().all(|fit| fit.objective <= 1e-20 * yx.norm_squared().max(1.0) && (&fit.coef - &alpha).amax() < 1e-8) {
            exact_ok += 1;
        }
    }
    let share = equal as f64 / n_inst as f64;
    Outcome {
        id: 7,
        pass: share >= 0.99 && below == 0 && exact_ok == n_inst,
        detail: format!("FAST = exhaustive in {share:.3} (>= 0.99), below exhaustive {below} (= 0), exact fit {exact_ok}/{n_inst}"),
    }
}

fn random_invertible(g: &mut StdRng, r: usize) -> DMatrix<f64> {
    loop {
        let a = DMatrix::from_fn(r, r, |_, _| normal(g));
        let sv = a.singular_values();
        if sv.min() > 0.1 * sv.max() {
            return a;
        }
    }
}

fn rel_close(a: &DVector<f64>, b: &DVector<f64>, tol: f64) -> bool {
    (a - b).amax() <= tol * a.amax().max(b.amax()).max(1.0)
}

fn contrast(est: &EffectEstimate<f64>) -> Option<f64> {
    let w = est.weights.as_ref()?;
    let d = &est.means.diff;
    Some(d[0] - est.selected_controls.iter().filter(|&&j| j != 0).map(|&j| w[j] * d[j]).sum::<f64>())
}

fn criterion_8() -> Outcome {
    let mut g = StdRng::seed_from_u64(SEED + 8);
    let config = cell(200, 2, 2, 0);
    let mut ok = 0;
    let mut worst = 0.0f64;
    for k in 0..50 {
        let draw = simulate_panel::<f64>(&config, k).unwrap();
        let base = estimate_average_effects(&draw.panel, 2, None).unwrap();
        let mut fit = base.factor_fit.clone();
        fit.loadings = &fit.loadings * random_invertible(&mut g, 2);
        let Ok(rot) = estimate_with_factors(&draw.panel, fit, &EstimatorOptions::default()) else { continue };
        worst = worst.max((&rot.beta_hat - &base.beta_hat).amax());
        let identity = match (contrast(&base), contrast(&rot)) {
            (Some(a), Some(b)) => {
                (a - b).abs() <= 1e-8 * a.abs().max(1.0)
                    && (base.is_selected(0) || (a - base.beta_hat[0]).abs() <= 1e-8 * a.abs().max(1.0))
            }
            (None, None) => true,
            _ => false,
        };
        if rot.selected_controls == base.selected_controls && rel_close(&rot.beta_hat, &base.beta_hat, 1e-8) && identity {
            ok += 1;
        }
    }
    Outcome { id: 8, pass: ok == 50, detail: format!("{ok}/50 transforms leave C_hat, beta_hat and the contrast invariant (max |d beta| {worst:.1e})") }
}

fn criterion_9() -> Outcome {
    let (mut checked, mut ok, mut worst) = (0, 0, 0.0f64);
    for (n0, t0) in [(1, 50), (2, 100), (3, 200), (2, 200)] {
        let config = cell(t0, n0, 2, 0);
        for k in 0..25 {
            let draw = simulate_panel::<f64>(&config, k).unwrap();
            let Ok(est) = estimate_average_effects(&draw.panel, 2, None) else { continue };
            let l = &est.factor_fit.loadings;
            let donors: Vec<usize> = est.selected_controls.iter().copied().filter(|&j| j != 0).collect();
            if l.select_rows(&donors).rank(1e-10) < 2 {
                continue;
            }
            checked += 1;
            let w = est.weights.as_ref().unwrap();
            let matched = donors.iter().fold(DVector::zeros(2), |acc, &j| acc + l.row(j).transpose() * w[j]);
            let e1 = (matched - l.row(0).transpose()).amax();
            let e2 = if est.is_selected(0) { 0.0 } else { (contrast(&est).unwrap() - est.beta_hat[0]).abs() };
            worst = worst.max(e1).max(e2);
            if e1 <= 1e-10 && e2 <= 1e-10 {
                ok += 1;
            }
        }
    }
    Outcome {
        id: 9,
        pass: checked > 0 && ok == checked,
        detail: format!("loading match and contrast rewriting within 1e-10 on {ok}/{checked} fits (max error {worst:.1e})"),
    }
}

fn criterion_10() -> Outcome {
    let config = cell(200, 2, 2, 0);
    let spec = TrendSpec::Sieve { k: Some(8), smoothness: 1.75 };
    let mut accuracy = Vec::new();
    let mut path_err = Vec::new();
    let truth: Vec<usize> = (2..10).collect();
    for k in 0..200 {
        let draw = simulate_panel::<f64>(&config, k).unwrap();
        let Ok(dy) = estimate_dynamic_effects(&draw.panel, 2, spec, None) else { continue };
        let hits = dy.selected_t.iter().filter(|s| **s == truth).count();
        accuracy.push(hits as f64 / dy.selected_t.len() as f64);
        let err = (0..200).map(|j| (dy.beta_t[(0, j)] - draw.effects[(0, j)]).abs()).sum::<f64>() / 200.0;
        path_err.push(err);
    }
    let n_ok = accuracy.len();
    let acc = accuracy.iter().sum::<f64>() / n_ok as f64;
    path_err.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = path_err[n_ok / 2];
    Outcome {
        id: 10,
        pass: n_ok >= 196 && acc >= 0.90 && med < 0.5,
        detail: format!("sieve k=8: per-period selection accuracy {acc:.3} (>= 0.90), median mean |b1t err| {med:.3} (< 0.5), {n_ok}/200 fits"),
    }
}

fn criterion_11() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_sci");
    let dir = tempfile::tempdir().unwrap();
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/middle_east_synthetic.csv");
    let smoke = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets/smoke.json");
    let data = data.to_str().unwrap();
    let common = ["--input", data, "--t0", "98", "--treated", "Israel-Palestine", "--r", "2", "--seed", "5"];
    let mut commands: Vec<Vec<&str>> = vec![
        [&["estimate", "--bootstrap", "100"], &common[..]].concat(),
        [&["placebo", "--placebo-t0", "60", "--bootstrap", "100"], &common[..]].concat(),
        [&["dynamic", "--trend", "sieve:auto:2"], &common[..]].concat(),
    ];
    let mut mismatched = Vec::new();
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let mut run_outputs = Vec::new();
        for args in &commands {
            let out = Command::new(bin).args(args).env("SCI_THREADS", threads).output().unwrap();
            run_outputs.push((out.status.code(), out.stdout));
        }
        let out_dir = dir.path().join(format!("sim{threads}"));
        let status = Command::new(bin)
            .args(["simulate", "--config", smoke.to_str().unwrap(), "--out", out_dir.to_str().unwrap()])
            .env("SCI_THREADS", threads)
            .status()
            .unwrap();
        let files: Vec<Vec<u8>> = ["report.json", "bias.csv", "coverage.csv", "selection.csv"]
            .iter()
            .map(|f| std::fs::read(out_dir.join(f)).unwrap_or_default())
            .collect();
        run_outputs.push((status.code(), files.concat()));
        outputs.push(run_outputs);
    }
    commands.push(vec!["simulate"]);
    for (i, args) in commands.iter().enumerate() {
        let (a, b) = (&outputs[0][i], &outputs[1][i]);
        if a.0 != Some(0) || a != b {
            mismatched.push(args[0]);
        }
    }
    Outcome {
        id: 11,
        pass: mismatched.is_empty(),
        detail: if mismatched.is_empty() {
            "estimate, placebo, dynamic and simulate byte-identical with 1 and 4 workers".into()
        } else {
            format!("not reproducible: {}", mismatched.join(", "))
        },
    }
}

fn report(o: &Outcome, seconds: f64) {
    let mut err = std::io::stderr().lock();
    let tag = if o.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(err, "{tag} criterion {}: {} [{seconds:.0}s]", o.id, o.detail);
}

fn main() {
    let mut results = Vec::new();
    let mut timed = |f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        report(&o, start.elapsed().as_secs_f64());
        results.push(o.pass);
    };
    timed(&mut criterion_1);
    timed(&mut criterion_2);
    let start = Instant::now();
    let cells = point_cells();
    let shared = start.elapsed().as_secs_f64();
    timed(&mut || criterion_3(&cells));
    timed(&mut criterion_4);
    timed(&mut || criterion_5(&cells));
    timed(&mut || criterion_6(&cells));
    timed(&mut criterion_7);
    timed(&mut criterion_8);
    timed(&mut criterion_9);
    timed(&mut criterion_10);
    timed(&mut criterion_11);
    let failed = results.iter().filter(|p| !**p).count();
    eprintln!("acceptance: {} of {} criteria passed (shared point-estimate cells took {shared:.0}s)", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
