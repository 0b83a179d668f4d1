//! Serialized report layouts. Field order is the JSON key order.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use sci_core::inference::Interval;
use sci_core::{BootstrapResult64, CovariateAdjustment, DynamicEffects64, EffectEstimate64, Panel64};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub version: &'static str,
    pub inputs: Inputs,
    pub panel: PanelInfo,
    /// Present for placebo runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub falsification: Option<Falsification>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariates: Option<CovariateReport>,
    pub estimate: EstimateReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dynamic: Option<DynamicReport>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Inputs {
    /// Arguments after the program name, verbatim.
    pub argv: Vec<String>,
    pub input: String,
    pub t0: usize,
    pub treated: String,
    pub r: usize,
    pub h: Option<usize>,
    pub covariates: Option<String>,
    pub bootstrap: Option<usize>,
    pub block_len: Option<usize>,
    pub levels: Vec<f64>,
    pub seed: u64,
    pub fix_selection: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub placebo_t0: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trend: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct PanelInfo {
    pub n_units: usize,
    pub n_periods: usize,
    pub t0: usize,
    /// Unit labels in estimation order; the treated unit comes first.
    pub units: Vec<String>,
    pub first_period: Option<String>,
    pub last_period: Option<String>,
}

impl PanelInfo {
    pub fn new(panel: &Panel64) -> Self {
        let periods = panel.period_labels();
        PanelInfo {
            n_units: panel.n_units(),
            n_periods: panel.n_periods(),
            t0: panel.t0(),
            units: panel.unit_labels().to_vec(),
            first_period: periods.and_then(|p| p.first().cloned()),
            last_period: periods.and_then(|p| p.last().cloned()),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Falsification {
    pub original_t0: usize,
    pub placebo_t0: usize,
    pub n_post_placebo: usize,
}

#[derive(Debug, Serialize)]
pub struct CovariateReport {
    pub names: Vec<String>,
    /// Per-unit coefficients, one row per unit.
    pub coefficients: Vec<Vec<f64>>,
}

impl CovariateReport {
    pub fn new(names: &[String], adj: &CovariateAdjustment<f64>) -> Self {
        CovariateReport { names: names.to_vec(), coefficients: rows(&adj.u_tilde) }
    }
}

#[derive(Debug, Serialize)]
pub struct UnitEstimate {
    pub unit: String,
    pub beta_hat: f64,
    pub selected: bool,
    pub mean_pre: f64,
    pub mean_post: f64,
    pub mean_diff: f64,
    pub lts_residual: f64,
    pub loadings: Vec<f64>,
    pub uniqueness: f64,
    /// Synthetic-control weight; absent for the treated unit and unselected units.
    pub weight: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct FactorReport {
    pub r: usize,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub heywood: bool,
}

#[derive(Debug, Serialize)]
pub struct EstimateReport {
    pub units: Vec<UnitEstimate>,
    pub selected_controls: Vec<String>,
    pub alpha_tilde: Vec<f64>,
    pub alpha1_hat: Vec<f64>,
    pub sigma_hat: f64,
    pub threshold: f64,
    pub h: usize,
    pub lts_objective: f64,
    pub rho: f64,
    pub interference_budget: Option<usize>,
    pub factor: FactorReport,
}

impl EstimateReport {
    pub fn new(panel: &Panel64, est: &EffectEstimate64) -> Self {
        let labels = panel.unit_labels();
        let weight_of = |i: usize| -> Option<f64> {
            let w = est.weights.as_ref()?;
            (i != 0 && est.is_selected(i)).then(|| w[i])
        };
        let units = (0..panel.n_units())
            .map(|i| UnitEstimate {
                unit: labels[i].clone(),
                beta_hat: est.beta_hat[i],
                selected: est.is_selected(i),
                mean_pre: est.means.pre[i],
                mean_post: est.means.post[i],
                mean_diff: est.means.diff[i],
                lts_residual: est.diagnostics.lts_residuals[i],
                loadings: est.factor_fit.loadings.row(i).iter().copied().collect(),
                uniqueness: est.factor_fit.uniquenesses[i],
                weight: weight_of(i),
            })
            .collect();
        let fit = &est.factor_fit;
        EstimateReport {
            units,
            selected_controls: est.selected_controls.iter().map(|&j| labels[j].clone()).collect(),
            alpha_tilde: vec_of(&est.alpha_tilde),
            alpha1_hat: vec_of(&est.alpha1_hat),
            sigma_hat: est.sigma_hat,
            threshold: est.threshold,
            h: est.diagnostics.h,
            lts_objective: est.lts.objective,
            rho: est.diagnostics.rho,
            interference_budget: est.diagnostics.interference_budget,
            factor: FactorReport {
                r: fit.r,
                log_likelihood: fit.log_likelihood,
                converged: fit.converged,
                iterations: fit.n_iter,
                heywood: fit.heywood,
            },
        }
    }
}

#[derive(Debug, Serialize)]
pub struct UnitInterval {
    pub unit: String,
    pub estimate: f64,
    pub se: f64,
    pub wald: Vec<Interval>,
    pub percentile: Vec<Interval>,
}

#[derive(Debug, Serialize)]
pub struct BootstrapReport {
    pub n_boot: usize,
    pub block_len: usize,
    pub seed: u64,
    pub fix_selection: bool,
    pub retries: usize,
    pub units: Vec<UnitInterval>,
}

impl BootstrapReport {
    pub fn new(panel: &Panel64, boot: &BootstrapResult64, fix_selection: bool) -> Self {
        let units = panel
            .unit_labels()
            .iter()
            .enumerate()
            .map(|(i, label)| UnitInterval {
                unit: label.clone(),
                estimate: boot.point[i],
                se: boot.se[i],
                wald: boot.intervals[i].clone(),
                percentile: boot.percentile[i].clone(),
            })
            .collect();
        BootstrapReport {
            n_boot: boot.n_boot,
            block_len: boot.block_len,
            seed: boot.seed,
            fix_selection,
            retries: boot.retries,
            units,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct PeriodEffects {
    pub period: String,
    pub beta_hat: Vec<f64>,
    pub tau_hat: Vec<f64>,
    pub alpha: Vec<f64>,
    pub selected: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct DynamicReport {
    pub trend: String,
    pub kind: sci_core::dynamic::TrendKind,
    pub degree_or_k: usize,
    pub rate_d: f64,
    pub sigma_hat: f64,
    pub threshold: f64,
    /// Post-period mean of the per-period effects, per unit.
    pub mean_beta_hat: Vec<f64>,
    pub periods: Vec<PeriodEffects>,
}

impl DynamicReport {
    pub fn new(panel: &Panel64, trend: String, dy: &DynamicEffects64) -> Self {
        let labels = panel.unit_labels();
        let periods = (0..panel.n_post())
            .map(|k| PeriodEffects {
                period: period_label(panel, panel.t0() + k),
                beta_hat: dy.beta_t.column(k).iter().copied().collect(),
                tau_hat: dy.tau_hat.column(k).iter().copied().collect(),
                alpha: dy.alpha_t.column(k).iter().copied().collect(),
                selected: dy.selected_t[k].iter().map(|&j| labels[j].clone()).collect(),
            })
            .collect();
        DynamicReport {
            trend,
            kind: dy.trend.kind,
            degree_or_k: dy.trend.degree_or_k,
            rate_d: dy.trend.rate_d,
            sigma_hat: dy.sigma_hat,
            threshold: dy.threshold_t,
            mean_beta_hat: dy.beta_t.row_iter().map(|r| r.mean()).collect(),
            periods,
        }
    }
}

/// The label of a zero-based period, or its one-based position.
pub fn period_label(panel: &Panel64, t: usize) -> String {
    panel.period_labels().map(|p| p[t].clone()).unwrap_or_else(|| (t + 1).to_string())
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}
