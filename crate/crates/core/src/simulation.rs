//! Monte Carlo harness: the factor-model data-generating process with
//! interference, the mean-difference and difference-in-differences
//! comparators, and a replication engine that aggregates bias, interval
//! coverage and selection accuracy.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Step};
use crate::estimator::{estimate_average_effects_with, EstimatorOptions};
use crate::inference::{block_bootstrap, default_block_len, BootstrapOptions};
use crate::panel::{split_means, Panel};
use crate::rng::{derive_seed, stream, Domain};
use crate::scalar::{count, lit, to_f64, Scalar};

/// Loading matrix of the ten-unit design (before the 0.5 scale), columns
/// are the two factors.
const BASE_LOADINGS: [[f64; 2]; 10] = [
    [1.5, 0.5],
    [-0.5, 1.5],
    [1.0, 1.0],
    [1.0, -1.0],
    [1.0, 2.0],
    [-1.0, 1.0],
    [1.0, 1.0],
    [-1.0, 1.0],
    [1.5, 1.0],
    [-1.5, 1.0],
];
const LOADING_SCALE: f64 = 0.5;
const AR: (f64, f64) = (0.2, 0.1);
const ALPHA0: [f64; 2] = [0.0, 0.0];
const ALPHA1: [f64; 2] = [1.0, 1.0];
const INTERFERENCE_RATIO: f64 = 0.75;
/// Periods discarded before the first recorded period of each AR process.
pub const BURN_IN: usize = 100;
const COVERAGE_LEVEL: f64 = 0.95;
/// Largest tolerated share of failed repetitions per cell.
pub const FAILURE_BUDGET: f64 = 0.02;

/// Reading of the direct-effect path during the first twelve post periods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaPath {
    /// `(t - t0)/3 + sin(pi t / 12)`, which meets `4 + sin(pi t / 12)` at `t - t0 = 12`.
    #[default]
    Continuous,
    /// `(t - t0)/3 + t sin(pi t / 12)`.
    Printed,
}

/// Direct effect at absolute period `t` (1-based) for intervention after `t0`.
pub fn direct_effect(t: usize, t0: usize, path: BetaPath) -> f64 {
    assert!(t > t0, "effects are defined for post periods only");
    let tf = t as f64;
    let since = (t - t0) as f64;
    let wave = (PI * tf / 12.0).sin();
    if t - t0 <= 12 {
        match path {
            BetaPath::Continuous => since / 3.0 + wave,
            BetaPath::Printed => since / 3.0 + wave * tf,
        }
    } else {
        4.0 + wave
    }
}

/// Loadings used by the generator: the ten-unit matrix times 0.5, rows
/// repeated cyclically for larger panels.
pub fn design_loadings(n_units: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_units, 2, |i, k| LOADING_SCALE * BASE_LOADINGS[i % 10][k])
}

fn default_n_units() -> usize {
    10
}
fn default_reps() -> usize {
    300
}
fn default_boot() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_n_units")]
    pub n_units: usize,
    pub t0: usize,
    pub n_interfered: usize,
    pub r_fit: usize,
    #[serde(default = "default_reps")]
    pub n_reps: usize,
    /// Bootstrap replicates per repetition; 0 skips interval estimation.
    #[serde(default = "default_boot")]
    pub n_boot: usize,
    /// Block length; `round(T^(1/3))` when absent.
    #[serde(default)]
    pub block_len: Option<usize>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub beta_path: BetaPath,
    #[serde(default)]
    pub fix_selection: bool,
}

impl SimConfig {
    pub fn n_periods(&self) -> usize {
        2 * self.t0
    }

    pub fn block_len(&self) -> usize {
        self.block_len.unwrap_or_else(|| default_block_len(self.n_periods()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::validation(Step::Simulation, msg));
        if self.n_units < 3 {
            return bad(format!("n_units = {} is below 3", self.n_units));
        }
        if self.n_interfered < 1 || self.n_interfered > self.n_units {
            return bad(format!("n_interfered = {} must lie in [1, n_units]", self.n_interfered));
        }
        if self.t0 < 2 {
            return bad(format!("t0 = {} is too short", self.t0));
        }
        if self.n_reps == 0 {
            return bad("n_reps must be positive".into());
        }
        if self.r_fit == 0 {
            return bad("r_fit must be positive".into());
        }
        Ok(())
    }
}

/// A grid of cells sharing every setting except `t0`, `n_interfered` and `r_fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimGrid {
    #[serde(default = "default_n_units")]
    pub n_units: usize,
    pub t0: Vec<usize>,
    pub n_interfered: Vec<usize>,
    pub r_fit: Vec<usize>,
    #[serde(default = "default_reps")]
    pub n_reps: usize,
    #[serde(default = "default_boot")]
    pub n_boot: usize,
    #[serde(default)]
    pub block_len: Option<usize>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub beta_path: BetaPath,
    #[serde(default)]
    pub fix_selection: bool,
}

impl SimGrid {
    /// Cells ordered by `n_interfered`, then `t0`, then `r_fit`.
    pub fn cells(&self) -> Vec<SimConfig> {
        let mut out = Vec::new();
        for &n0 in &self.n_interfered {
            for &t0 in &self.t0 {
                for &r in &self.r_fit {
                    out.push(SimConfig {
                        n_units: self.n_units,
                        t0,
                        n_interfered: n0,
                        r_fit: r,
                        n_reps: self.n_reps,
                        n_boot: self.n_boot,
                        block_len: self.block_len,
                        master_seed: self.master_seed,
                        beta_path: self.beta_path,
                        fix_selection: self.fix_selection,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDraw<T: Scalar> {
    pub panel: Panel<T>,
    /// Post-period average effect per unit.
    pub truth: DVector<T>,
    /// Zero-based valid controls (units with no effect).
    pub true_set: Vec<usize>,
    /// `N x T1` per-period effects.
    pub effects: DMatrix<T>,
}

/// Stationary AR(2) path of length `len` after burn-in; one row per series.
fn ar2_paths(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, len: usize) -> DMatrix<f64> {
    let total = BURN_IN + len;
    let mut out = DMatrix::zeros(rows, len);
    let mut lag1 = vec![0.0; rows];
    let mut lag2 = vec![0.0; rows];
    for step in 0..total {
        for i in 0..rows {
            let shock: f64 = StandardNormal.sample(rng);
            let v = AR.0 * lag1[i] + AR.1 * lag2[i] + shock;
            lag2[i] = lag1[i];
            lag1[i] = v;
            if step >= BURN_IN {
                out[(i, step - BURN_IN)] = v;
            }
        }
    }
    out
}

/// Draws repetition `rep` of the configured design.
pub fn simulate_panel<T: Scalar>(config: &SimConfig, rep: u64) -> Result<SimDraw<T>> {
    config.validate()?;
    let n = config.n_units;
    let t0 = config.t0;
    let t = config.n_periods();
    let t1 = t - t0;
    let mut rng = stream(config.master_seed, Domain::Simulation, rep);
    let w = ar2_paths(&mut rng, 2, t);
    let eps = ar2_paths(&mut rng, n, t);
    let loadings = design_loadings(n);

    let effects = DMatrix::from_fn(n, t1, |i, j| {
        let b1 = direct_effect(t0 + j + 1, t0, config.beta_path);
        if i == 0 {
            b1
        } else if i < config.n_interfered {
            INTERFERENCE_RATIO * b1
        } else {
            0.0
        }
    });
    let y = DMatrix::from_fn(n, t, |i, j| {
        let post = j >= t0;
        let mean = if post { &ALPHA1 } else { &ALPHA0 };
        let common: f64 = (0..2).map(|k| loadings[(i, k)] * (mean[k] + w[(k, j)])).sum();
        let effect = if post { effects[(i, j - t0)] } else { 0.0 };
        effect + common + eps[(i, j)]
    });
    let truth = DVector::from_fn(n, |i, _| effects.row(i).sum() / t1 as f64);
    let true_set = (config.n_interfered..n).collect();
    Ok(SimDraw {
        panel: Panel::from_matrix(y.map(lit::<T>), t0)?,
        truth: truth.map(lit::<T>),
        true_set,
        effects: effects.map(lit::<T>),
    })
}

/// Mean-difference estimator: post mean minus pre mean per unit.
pub fn md_estimate<T: Scalar>(panel: &Panel<T>) -> DVector<T> {
    split_means(panel).diff
}

/// Four-mean difference-in-differences for the treated unit (index 0).
pub fn did_estimate<T: Scalar>(panel: &Panel<T>, controls: &[usize]) -> Result<T> {
    if controls.is_empty() {
        return Err(Error::validation(Step::Simulation, "difference-in-differences needs at least one control"));
    }
    if controls.contains(&0) || controls.iter().any(|&j| j >= panel.n_units()) {
        return Err(Error::validation(Step::Simulation, "controls must be valid indices other than the treated unit"));
    }
    let diff = split_means(panel).diff;
    let control_mean = controls.iter().fold(T::zero(), |a, &j| a + diff[j]) / count::<T>(controls.len());
    Ok(diff[0] - control_mean)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasSummary {
    pub estimator: String,
    /// One-based unit index.
    pub unit: usize,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub median_abs: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageEntry {
    pub estimator: String,
    pub unit: usize,
    pub level: f64,
    pub n: usize,
    pub coverage: f64,
    /// Monte Carlo standard error `sqrt(p (1 - p) / n)`.
    pub mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Proportion {
    pub n: usize,
    pub p: f64,
    pub mc_se: f64,
}

impl Proportion {
    fn from_flags(flags: impl Iterator<Item = bool>) -> Self {
        let (hits, n) = flags.fold((0usize, 0usize), |(h, n), f| (h + usize::from(f), n + 1));
        let p = if n == 0 { f64::NAN } else { hits as f64 / n as f64 };
        Proportion { n, p, mc_se: (p * (1.0 - p) / n as f64).sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub block_len: usize,
    pub n_ok: usize,
    pub n_failed: usize,
    pub bias: Vec<BiasSummary>,
    pub coverage: Vec<CoverageEntry>,
    /// Probability that the selected set equals the true valid set.
    pub selection_accuracy: Proportion,
    /// Mean bootstrap retries per repetition.
    pub mean_retries: f64,
    /// Failed repetitions stayed within [`FAILURE_BUDGET`].
    pub within_budget: bool,
    /// The first failed repetition and its error.
    pub first_failure: Option<String>,
}

impl SimReport {
    pub fn bias_for(&self, estimator: &str, unit: usize) -> Option<&BiasSummary> {
        self.bias.iter().find(|b| b.estimator == estimator && b.unit == unit)
    }

    pub fn coverage_for(&self, estimator: &str, unit: usize) -> Option<&CoverageEntry> {
        self.coverage.iter().find(|c| c.estimator == estimator && c.unit == unit)
    }
}

/// Estimator label used in reports: `SCI(r=2)` and so on.
pub fn sci_label(r: usize) -> String {
    format!("SCI(r={r})")
}

pub const MD_LABEL: &str = "MD";
pub const DID_ALL_LABEL: &str = "DID(all controls)";
pub const DID_VALID_LABEL: &str = "DID(valid controls)";

/// Outcome of one repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct RepOutcome {
    /// `beta_hat - beta_bar` for units 1, 2 and N.
    pub sci_error: [f64; 3],
    pub md_error: [f64; 3],
    pub did_all_error: f64,
    pub did_valid_error: f64,
    pub covered: Option<[bool; 3]>,
    pub selection_exact: bool,
    pub retries: usize,
}

pub fn reported_units(n: usize) -> [usize; 3] {
    [0, 1, n - 1]
}

/// Runs a single repetition.
pub fn run_rep(config: &SimConfig, rep: u64) -> Result<RepOutcome> {
    let draw = simulate_panel::<f64>(config, rep)?;
    let n = config.n_units;
    let units = reported_units(n);
    let opts = EstimatorOptions::default();
    let (estimate, covered, retries) = if config.n_boot > 0 {
        let boot = block_bootstrap(
            &draw.panel,
            config.r_fit,
            &BootstrapOptions {
                n_boot: config.n_boot,
                block_len: config.block_len(),
                levels: vec![COVERAGE_LEVEL],
                seed: derive_seed(config.master_seed, Domain::SimulationBootstrap, rep),
                fix_selection: config.fix_selection,
                estimator: opts,
            },
        )?;
        let covered = units.map(|i| boot.intervals[i][0].contains(to_f64(draw.truth[i])));
        (boot.estimate, Some(covered), boot.retries)
    } else {
        (estimate_average_effects_with(&draw.panel, config.r_fit, &opts)?, None, 0)
    };
    let md = md_estimate(&draw.panel);
    let all: Vec<usize> = (1..n).collect();
    let truth1 = draw.truth[0];
    Ok(RepOutcome {
        sci_error: units.map(|i| estimate.beta_hat[i] - draw.truth[i]),
        md_error: units.map(|i| md[i] - draw.truth[i]),
        did_all_error: did_estimate(&draw.panel, &all)? - truth1,
        did_valid_error: did_estimate(&draw.panel, &draw.true_set)? - truth1,
        covered,
        selection_exact: estimate.selected_controls == draw.true_set,
        retries,
    })
}

fn summarize(estimator: &str, unit: usize, errors: &[f64]) -> BiasSummary {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let n = errors.len();
    BiasSummary {
        estimator: estimator.to_string(),
        unit: unit + 1,
        n,
        mean: errors.iter().sum::<f64>() / n as f64,
        median: quantile(&sorted, 0.5),
        q25: quantile(&sorted, 0.25),
        q75: quantile(&sorted, 0.75),
        median_abs: quantile(&abs, 0.5),
        rmse: (errors.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt(),
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Aggregates repetition outcomes into a report.
pub fn aggregate(config: &SimConfig, outcomes: &[RepOutcome], n_failed: usize) -> SimReport {
    let n = config.n_units;
    let units = reported_units(n);
    let sci = sci_label(config.r_fit);
    let mut bias = Vec::new();
    for (k, &u) in units.iter().enumerate() {
        let e: Vec<f64> = outcomes.iter().map(|o| o.sci_error[k]).collect();
        bias.push(summarize(&sci, u, &e));
    }
    for (k, &u) in units.iter().enumerate() {
        let e: Vec<f64> = outcomes.iter().map(|o| o.md_error[k]).collect();
        bias.push(summarize(MD_LABEL, u, &e));
    }
    let e: Vec<f64> = outcomes.iter().map(|o| o.did_all_error).collect();
    bias.push(summarize(DID_ALL_LABEL, 0, &e));
    let e: Vec<f64> = outcomes.iter().map(|o| o.did_valid_error).collect();
    bias.push(summarize(DID_VALID_LABEL, 0, &e));

    let mut coverage = Vec::new();
    if outcomes.iter().all(|o| o.covered.is_some()) && !outcomes.is_empty() {
        for (k, &u) in units.iter().enumerate() {
            let prop = Proportion::from_flags(outcomes.iter().map(|o| o.covered.expect("checked")[k]));
            coverage.push(CoverageEntry {
                estimator: sci.clone(),
                unit: u + 1,
                level: COVERAGE_LEVEL,
                n: prop.n,
                coverage: prop.p,
                mc_se: prop.mc_se,
            });
        }
    }
    let retries: usize = outcomes.iter().map(|o| o.retries).sum();
    SimReport {
        config: config.clone(),
        block_len: config.block_len(),
        n_ok: outcomes.len(),
        n_failed,
        bias,
        coverage,
        selection_accuracy: Proportion::from_flags(outcomes.iter().map(|o| o.selection_exact)),
        mean_retries: if outcomes.is_empty() { 0.0 } else { retries as f64 / outcomes.len() as f64 },
        within_budget: true,
        first_failure: None,
    }
}

/// Runs every repetition of one cell and summarizes the successful ones,
/// however many failed. Repetitions run in parallel on the current rayon
/// pool; results do not depend on the pool size.
pub fn run_cell(config: &SimConfig) -> Result<SimReport> {
    config.validate()?;
    let results: Vec<Result<RepOutcome>> =
        (0..config.n_reps as u64).into_par_iter().map(|rep| run_rep(config, rep)).collect();
    let mut outcomes = Vec::with_capacity(results.len());
    let mut first_failure = None;
    let mut n_failed = 0;
    for (rep, res) in results.into_iter().enumerate() {
        match res {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                n_failed += 1;
                first_failure.get_or_insert_with(|| format!("repetition {rep}: {e}"));
            }
        }
    }
    let mut report = aggregate(config, &outcomes, n_failed);
    report.within_budget = n_failed as f64 <= FAILURE_BUDGET * config.n_reps as f64;
    report.first_failure = first_failure;
    Ok(report)
}

/// Like [`run_cell`], but a cell whose failures exceed [`FAILURE_BUDGET`]
/// is an error.
pub fn run_experiment(config: &SimConfig) -> Result<SimReport> {
    let report = run_cell(config)?;
    if !report.within_budget {
        return Err(budget_error(&report));
    }
    Ok(report)
}

pub fn budget_error(report: &SimReport) -> Error {
    Error::numerical(
        Step::Simulation,
        format!(
            "{} of {} repetitions failed (budget {:.0}%); first failure at {}",
            report.n_failed,
            report.config.n_reps,
            FAILURE_BUDGET * 100.0,
            report.first_failure.as_deref().unwrap_or("an unknown repetition")
        ),
    )
}
