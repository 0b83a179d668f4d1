//! Per-period (dynamic) effects.
//!
//! The post-period series of every unit is smoothed on a polynomial time
//! basis, the smoothed values are centred at the pre-period mean, and each
//! post period is then treated like the average problem: LTS of the trend on
//! the loadings, effects as the residual, selection by a rate-scaled
//! threshold.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result, Step};
use crate::estimator::{estimate_sigma, SigmaWindow};
use crate::factor::{fit_factors_with, FactorFit, FactorOptions};
use crate::linalg::{lstsq, rank};
use crate::panel::{split_means, Panel};
use crate::robust::{default_h, lts_regress_with, LtsOptions};
use crate::scalar::{lit, Scalar};

/// Requested trend model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrendSpec {
    /// Polynomial of the given degree in rescaled post-period time.
    Poly { degree: usize },
    /// Legendre sieve with `k` basis functions for a trend with `smoothness`
    /// derivatives; `k = round(T1^(1/(2s-1)))` when absent.
    Sieve { k: Option<usize>, smoothness: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendKind {
    ParametricPoly,
    Sieve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendModel<T: Scalar> {
    pub kind: TrendKind,
    /// Polynomial degree, or sieve basis size.
    pub degree_or_k: usize,
    /// Convergence exponent `d` of the trend estimator.
    pub rate_d: f64,
    /// `N x T1` fitted trend over the post periods.
    pub fitted: DMatrix<T>,
}

/// Shifted Legendre polynomials `P_0..P_{k-1}` on `[0, 1]` evaluated at `x`.
pub fn legendre_basis<T: Scalar>(x: &[f64], k: usize) -> DMatrix<T> {
    DMatrix::from_fn(x.len(), k, |row, col| {
        let z = 2.0 * x[row] - 1.0;
        let (mut p0, mut p1) = (1.0, z);
        let v = match col {
            0 => 1.0,
            1 => z,
            _ => {
                for m in 1..col {
                    let m = m as f64;
                    let p2 = ((2.0 * m + 1.0) * z * p1 - m * p0) / (m + 1.0);
                    p0 = p1;
                    p1 = p2;
                }
                p1
            }
        };
        lit(v)
    })
}

pub fn fit_trend<T: Scalar>(panel: &Panel<T>, spec: TrendSpec) -> Result<TrendModel<T>> {
    let t1 = panel.n_post();
    let (kind, size, rate_d) = match spec {
        TrendSpec::Poly { degree } => (TrendKind::ParametricPoly, degree + 1, 0.5),
        TrendSpec::Sieve { k, smoothness } => {
            if !(smoothness > 1.0) {
                return Err(Error::validation(Step::Trend, format!("sieve smoothness must exceed 1, got {smoothness}")));
            }
            let k = k.unwrap_or_else(|| ((t1 as f64).powf(1.0 / (2.0 * smoothness - 1.0)).round() as usize).max(1));
            (TrendKind::Sieve, k, (smoothness - 1.0) / (2.0 * smoothness - 1.0))
        }
    };
    // polynomial: T1 >= degree + 1; sieve: k < T1
    let needed = match kind {
        TrendKind::ParametricPoly => size,
        TrendKind::Sieve => size + 1,
    };
    if size == 0 || t1 < needed {
        return Err(Error::validation(
            Step::Trend,
            format!("{t1} post periods are too few for a basis of size {size}"),
        ));
    }
    let x: Vec<f64> = (1..=t1).map(|j| j as f64 / t1 as f64).collect();
    let basis = legendre_basis::<T>(&x, size);
    if rank(&basis) < size {
        return Err(Error::numerical(Step::Trend, "time basis is rank deficient"));
    }
    let post = panel.outcomes().columns(panel.t0(), t1);
    let mut fitted = DMatrix::zeros(panel.n_units(), t1);
    for i in 0..panel.n_units() {
        let y = post.row(i).transpose();
        let coef = lstsq(&basis, &y).coef;
        fitted.row_mut(i).copy_from(&(&basis * coef).transpose());
    }
    let degree_or_k = match kind {
        TrendKind::ParametricPoly => size - 1,
        TrendKind::Sieve => size,
    };
    Ok(TrendModel { kind, degree_or_k, rate_d, fitted })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DynamicOptions {
    pub h: Option<usize>,
    pub factor: FactorOptions,
    pub lts: LtsOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicEffects<T: Scalar> {
    /// `N x T1` effects.
    pub beta_t: DMatrix<T>,
    /// Fitted trend minus the pre-period mean, `N x T1`.
    pub tau_hat: DMatrix<T>,
    /// Selected units per post period (zero-based).
    pub selected_t: Vec<Vec<usize>>,
    /// `r x T1`.
    pub alpha_t: DMatrix<T>,
    pub threshold_t: T,
    pub sigma_hat: T,
    pub trend: TrendModel<T>,
    pub factor_fit: FactorFit<T>,
}

pub fn estimate_dynamic_effects<T: Scalar>(
    panel: &Panel<T>,
    r: usize,
    spec: TrendSpec,
    h: Option<usize>,
) -> Result<DynamicEffects<T>> {
    estimate_dynamic_effects_with(panel, r, spec, &DynamicOptions { h, ..Default::default() })
}

pub fn estimate_dynamic_effects_with<T: Scalar>(
    panel: &Panel<T>,
    r: usize,
    spec: TrendSpec,
    opts: &DynamicOptions,
) -> Result<DynamicEffects<T>> {
    let n = panel.n_units();
    let h = opts.h.unwrap_or_else(|| default_h(n));
    let fit = fit_factors_with(panel, r, &opts.factor).map_err(|e| e.in_step(Step::FactorAnalysis))?;
    let trend = fit_trend(panel, spec)?;
    let sigma_hat = estimate_sigma(panel, r, SigmaWindow::Pre)?;
    let t = panel.n_periods() as f64;
    let threshold_t = lit::<T>((2.0 * (n as f64 * t).ln()).sqrt() / t.powf(trend.rate_d)) * sigma_hat;

    let pre_mean = split_means(panel).pre;
    let mut tau_hat = trend.fitted.clone();
    for mut col in tau_hat.column_iter_mut() {
        col -= &pre_mean;
    }
    let t1 = panel.n_post();
    let per_period: Vec<Result<(DVector<T>, DVector<T>, Vec<usize>)>> = (0..t1)
        .into_par_iter()
        .map(|j| {
            let tau = tau_hat.column(j).into_owned();
            let lts = lts_regress_with(&tau, &fit.loadings, h, &opts.lts).map_err(|e| Error::AtPeriod {
                step: Step::RobustRegression,
                period: panel.t0() + j + 1,
                source: Box::new(e),
            })?;
            let beta = &tau - &fit.loadings * &lts.coef;
            let selected = (0..n).filter(|&i| beta[i].abs() <= threshold_t).collect();
            Ok((lts.coef, beta, selected))
        })
        .collect();

    let mut beta_t = DMatrix::zeros(n, t1);
    let mut alpha_t = DMatrix::zeros(r, t1);
    let mut selected_t = Vec::with_capacity(t1);
    for (j, res) in per_period.into_iter().enumerate() {
        let (alpha, beta, selected) = res?;
        alpha_t.set_column(j, &alpha);
        beta_t.set_column(j, &beta);
        selected_t.push(selected);
    }
    Ok(DynamicEffects { beta_t, tau_hat, selected_t, alpha_t, threshold_t, sigma_hat, trend, factor_fit: fit })
}
