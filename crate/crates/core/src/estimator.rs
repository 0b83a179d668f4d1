//! Average direct and interference effects.
//!
//! Pipeline: factor analysis on the pre-period, LTS of the mean difference
//! on the loadings, hard-threshold selection of non-interfered controls,
//! least-squares refit of the post-period factor mean on the selected units.
//! Outcomes are centred at their pre-period means throughout, so the
//! post-period mean entering the refit is the mean difference `D` and
//! unit-level constants drop out.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result, Step};
use crate::factor::{fit_factors_with, FactorFit, FactorOptions};
use crate::linalg::{column_covariance, dependent_columns, lstsq, rank, sym_eigen_desc};
use crate::panel::{split_means, CovariatePanel, Panel, SplitMeans};
use crate::robust::{default_h, lts_breakdown_check, lts_regress_with, LtsFit, LtsOptions};
use crate::scalar::{count, lit, Scalar};

/// Periods entering the noise-scale covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaWindow {
    /// All `T` periods.
    #[default]
    Full,
    /// Pre-intervention periods only.
    Pre,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EstimatorOptions {
    /// LTS trim count; `floor(N/2) + 1` when absent.
    pub h: Option<usize>,
    pub factor: FactorOptions,
    pub lts: LtsOptions,
    pub sigma_window: SigmaWindow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics<T: Scalar> {
    /// `D - L alpha_tilde` per unit.
    pub lts_residuals: DVector<T>,
    pub rho: f64,
    pub h: usize,
    /// Treated unit fell inside the selected set.
    pub treated_selected: bool,
    /// Maximum tolerated number of interfered units, if any.
    pub interference_budget: Option<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectEstimate<T: Scalar> {
    pub beta_hat: DVector<T>,
    pub alpha_tilde: DVector<T>,
    pub alpha1_hat: DVector<T>,
    /// Zero-based unit indices, ascending.
    pub selected_controls: Vec<usize>,
    pub sigma_hat: T,
    pub threshold: T,
    /// Synthetic-control weights over the selected units other than the
    /// treated one; `None` when those units do not span the loadings.
    pub weights: Option<DVector<T>>,
    pub factor_fit: FactorFit<T>,
    pub lts: LtsFit<T>,
    pub means: SplitMeans<T>,
    pub diagnostics: Diagnostics<T>,
}

impl<T: Scalar> EffectEstimate<T> {
    pub fn is_selected(&self, unit: usize) -> bool {
        self.selected_controls.binary_search(&unit).is_ok()
    }
}

/// Noise scale from the trailing eigenvalues of the sample covariance:
/// `sigma^2 = N^-1 * sum_{i = ceil(N/2) - r}^{N} nu_i`.
pub fn estimate_sigma<T: Scalar>(panel: &Panel<T>, r: usize, window: SigmaWindow) -> Result<T> {
    let n = panel.n_units();
    let first = n.div_ceil(2);
    if r >= first {
        return Err(Error::validation(Step::Sigma, format!("r = {r} must be below ceil(N/2) = {first}")));
    }
    let periods = match window {
        SigmaWindow::Full => 0..panel.n_periods(),
        SigmaWindow::Pre => 0..panel.t0(),
    };
    if periods.len() < 2 {
        return Err(Error::numerical(Step::Sigma, "need at least two periods for a covariance"));
    }
    let cov = column_covariance(panel.outcomes(), periods);
    let (vals, _) = sym_eigen_desc(&cov);
    // 1-based index ceil(N/2) - r
    let start = first - r - 1;
    let tail = vals.iter().skip(start).map(|&v| if v > T::zero() { v } else { T::zero() });
    let sum = tail.fold(T::zero(), |a, b| a + b);
    Ok((sum / count::<T>(n)).sqrt())
}

/// `sqrt(2 log(N T) / T) * sigma`.
pub fn selection_threshold<T: Scalar>(n: usize, t: usize, sigma: T) -> T {
    let nt = (n * t) as f64;
    lit::<T>((2.0 * nt.ln() / t as f64).sqrt()) * sigma
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection<T: Scalar> {
    pub selected: Vec<usize>,
    pub threshold: T,
}

/// Units whose LTS residual `|D_i - l_i' alpha|` is within the threshold.
pub fn select_controls<T: Scalar>(
    diff: &DVector<T>,
    loadings: &DMatrix<T>,
    alpha_tilde: &DVector<T>,
    sigma_hat: T,
    n_periods: usize,
) -> Result<Selection<T>> {
    let n = diff.len();
    if loadings.nrows() != n || loadings.ncols() != alpha_tilde.len() {
        return Err(Error::validation(Step::Selection, "dimension mismatch between D, loadings and alpha"));
    }
    let threshold = selection_threshold(n, n_periods, sigma_hat);
    let residuals = diff - loadings * alpha_tilde;
    let selected: Vec<usize> = (0..n).filter(|&i| residuals[i].abs() <= threshold).collect();
    if selected.len() < loadings.ncols() {
        return Err(Error::numerical(
            Step::Selection,
            format!(
                "only {} units pass the threshold but r = {} are needed for the refit; revisit r or h",
                selected.len(),
                loadings.ncols()
            ),
        ));
    }
    Ok(Selection { selected, threshold })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refit<T: Scalar> {
    pub alpha1_hat: DVector<T>,
    pub beta_hat: DVector<T>,
}

fn loadings_on<T: Scalar>(loadings: &DMatrix<T>, units: &[usize], step: Step) -> Result<DMatrix<T>> {
    let sub = loadings.select_rows(units);
    if units.len() < loadings.ncols() || rank(&sub) < loadings.ncols() {
        let cols = if units.len() < loadings.ncols() {
            (0..loadings.ncols()).collect()
        } else {
            dependent_columns(&sub)
        };
        return Err(Error::numerical(
            step,
            format!("loading columns {cols:?} are collinear over the selected units {units:?}"),
        ));
    }
    Ok(sub)
}

/// Least-squares factor mean on the selected units and the implied effects.
pub fn refit<T: Scalar>(post_mean: &DVector<T>, loadings: &DMatrix<T>, selected: &[usize]) -> Result<Refit<T>> {
    let sub = loadings_on(loadings, selected, Step::Refit)?;
    let y = DVector::from_iterator(selected.len(), selected.iter().map(|&i| post_mean[i]));
    let alpha1_hat = lstsq(&sub, &y).coef;
    let beta_hat = post_mean - loadings * &alpha1_hat;
    Ok(Refit { alpha1_hat, beta_hat })
}

/// Weights `w_j = l_1' (L_C' L_C)^-1 l_j` over the selected units other than
/// unit 0; zero elsewhere.
pub fn synthetic_weights<T: Scalar>(loadings: &DMatrix<T>, selected: &[usize]) -> Result<DVector<T>> {
    let donors: Vec<usize> = selected.iter().copied().filter(|&j| j != 0).collect();
    let sub = loadings_on(loadings, &donors, Step::Weights)?;
    let gram = sub.transpose() * &sub;
    let treated = loadings.row(0).transpose();
    // solve (L_C' L_C) c = l_1 through the rank-revealing path
    let coef = lstsq(&gram, &treated).coef;
    let mut w = DVector::zeros(loadings.nrows());
    for (k, &j) in donors.iter().enumerate() {
        w[j] = sub.row(k).dot(&coef.transpose());
    }
    Ok(w)
}

pub fn estimate_average_effects<T: Scalar>(panel: &Panel<T>, r: usize, h: Option<usize>) -> Result<EffectEstimate<T>> {
    estimate_average_effects_with(panel, r, &EstimatorOptions { h, ..Default::default() })
}

fn check_pipeline<T: Scalar>(panel: &Panel<T>, r: usize, opts: &EstimatorOptions) -> Result<usize> {
    let n = panel.n_units();
    if r == 0 || r >= n.div_ceil(2) {
        return Err(Error::validation(
            Step::Input,
            format!("r = {r} is not usable with N = {n}: need 1 <= r < ceil(N/2) (degrees of freedom)"),
        ));
    }
    let h = opts.h.unwrap_or_else(|| default_h(n));
    if h < r + 1 || h > n {
        return Err(Error::validation(Step::RobustRegression, format!("h = {h} out of range [{}, {n}]", r + 1)));
    }
    Ok(h)
}

pub fn estimate_average_effects_with<T: Scalar>(
    panel: &Panel<T>,
    r: usize,
    opts: &EstimatorOptions,
) -> Result<EffectEstimate<T>> {
    check_pipeline(panel, r, opts)?;
    let fit = fit_factors_with(panel, r, &opts.factor).map_err(|e| e.in_step(Step::FactorAnalysis))?;
    estimate_with_factors(panel, fit, opts)
}

/// Steps 2-4 for a given factor fit. Any rotation of the loadings leaves
/// effects and selection unchanged.
pub fn estimate_with_factors<T: Scalar>(
    panel: &Panel<T>,
    fit: FactorFit<T>,
    opts: &EstimatorOptions,
) -> Result<EffectEstimate<T>> {
    let r = fit.loadings.ncols();
    let h = check_pipeline(panel, r, opts)?;
    let means = split_means(panel);
    let lts = lts_regress_with(&means.diff, &fit.loadings, h, &opts.lts)
        .map_err(|e| e.in_step(Step::RobustRegression))?;
    let sigma_hat = estimate_sigma(panel, r, opts.sigma_window)?;
    let selection = select_controls(&means.diff, &fit.loadings, &lts.coef, sigma_hat, panel.n_periods())?;
    finish(panel, fit, lts, means, sigma_hat, selection, h)
}

/// Steps 1, 2 and 4 with a frozen control set.
pub fn estimate_with_fixed_selection<T: Scalar>(
    panel: &Panel<T>,
    r: usize,
    selected: &[usize],
    opts: &EstimatorOptions,
) -> Result<EffectEstimate<T>> {
    let h = check_pipeline(panel, r, opts)?;
    let fit = fit_factors_with(panel, r, &opts.factor).map_err(|e| e.in_step(Step::FactorAnalysis))?;
    let means = split_means(panel);
    let lts = lts_regress_with(&means.diff, &fit.loadings, h, &opts.lts)
        .map_err(|e| e.in_step(Step::RobustRegression))?;
    let sigma_hat = estimate_sigma(panel, r, opts.sigma_window)?;
    let threshold = selection_threshold(panel.n_units(), panel.n_periods(), sigma_hat);
    let selection = Selection { selected: selected.to_vec(), threshold };
    finish(panel, fit, lts, means, sigma_hat, selection, h)
}

fn finish<T: Scalar>(
    panel: &Panel<T>,
    fit: FactorFit<T>,
    lts: LtsFit<T>,
    means: SplitMeans<T>,
    sigma_hat: T,
    selection: Selection<T>,
    h: usize,
) -> Result<EffectEstimate<T>> {
    let n = panel.n_units();
    let r = fit.r;
    let Refit { alpha1_hat, beta_hat } = refit(&means.diff, &fit.loadings, &selection.selected)?;
    let treated_selected = selection.selected.first() == Some(&0);
    let mut warnings = Vec::new();
    let weights = match synthetic_weights(&fit.loadings, &selection.selected) {
        Ok(w) => Some(w),
        Err(e) if treated_selected => {
            warnings.push(format!("weights unavailable: {e}"));
            None
        }
        Err(e) => return Err(e),
    };
    if treated_selected {
        warnings.push(format!(
            "treated unit '{}' passed the selection threshold: no detected direct effect",
            panel.unit_labels()[0]
        ));
    }
    let interference_budget = match lts_breakdown_check(n, r) {
        Ok(b) => Some(b.min(n - h)),
        Err(e) => {
            warnings.push(e.to_string());
            None
        }
    };
    if let Some(b) = interference_budget.filter(|_| h < n) {
        warnings.push(format!("estimates assume at most {b} interfered units (N = {n}, r = {r})"));
    }
    if h == n {
        warnings.push(format!("h = N = {n}: no trimming, LTS reduces to least squares and the interference budget is zero"));
    }
    if fit.heywood {
        warnings.push("factor analysis hit the uniqueness floor (Heywood case)".to_string());
    }
    let lts_residuals = &means.diff - &fit.loadings * &lts.coef;
    let diagnostics =
        Diagnostics { lts_residuals, rho: panel.rho(), h, treated_selected, interference_budget, warnings };
    Ok(EffectEstimate {
        beta_hat,
        alpha_tilde: lts.coef.clone(),
        alpha1_hat,
        selected_controls: selection.selected,
        sigma_hat,
        threshold: selection.threshold,
        weights,
        factor_fit: fit,
        lts,
        means,
        diagnostics,
    })
}

/// Reduced-form covariate coefficients and the residualised panel.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateAdjustment<T: Scalar> {
    /// `N x p`.
    pub u_tilde: DMatrix<T>,
    pub residual_panel: Panel<T>,
}

/// Regresses each unit's pre-period outcomes on the covariates and removes
/// the fitted covariate part from every period. All-zero covariates get a
/// zero coefficient.
pub fn residualize_covariates<T: Scalar>(panel: &Panel<T>, covariates: &CovariatePanel<T>) -> Result<CovariateAdjustment<T>> {
    let c = covariates.covariates();
    let (p, t) = c.shape();
    if t != panel.n_periods() {
        return Err(Error::validation(
            Step::Covariates,
            format!("covariates cover {t} periods, panel has {}", panel.n_periods()),
        ));
    }
    let t0 = panel.t0();
    if p >= t0 {
        return Err(Error::validation(Step::Covariates, format!("{p} covariates need more than {t0} pre-periods")));
    }
    let active: Vec<usize> = (0..p).filter(|&k| c.row(k).iter().any(|v| *v != T::zero())).collect();
    let n = panel.n_units();
    let mut u_tilde = DMatrix::zeros(n, p);
    if !active.is_empty() {
        let design = c.select_rows(&active).columns(0, t0).transpose();
        if rank(&design) < active.len() {
            let bad: Vec<&str> =
                dependent_columns(&design).iter().map(|&k| covariates.names()[active[k]].as_str()).collect();
            return Err(Error::numerical(
                Step::Covariates,
                format!("pre-period covariates are collinear: {bad:?}"),
            ));
        }
        for i in 0..n {
            let y = panel.outcomes().row(i).columns(0, t0).transpose();
            let coef = lstsq(&design, &y).coef;
            for (k, &row) in active.iter().enumerate() {
                u_tilde[(i, row)] = coef[k];
            }
        }
    }
    let residual = panel.outcomes() - &u_tilde * c;
    let residual_panel = panel.with_outcomes(residual)?;
    Ok(CovariateAdjustment { u_tilde, residual_panel })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_whitened_panel() -> Panel<f64> {
        // distinct Fourier frequencies: rows are centred and orthogonal
        let (n, t) = (10, 20);
        let y = DMatrix::from_fn(n, t, |i, j| {
            (2.0 * std::f64::consts::PI * ((i + 1) * j) as f64 / t as f64).cos()
        });
        let cov = column_covariance(&y, 0..t);
        let y = DMatrix::from_fn(n, t, |i, j| y[(i, j)] / cov[(i, i)].sqrt());
        Panel::from_matrix(y, 10).unwrap()
    }

    #[test]
    fn sigma_on_identity_covariance() {
        let p = identity_whitened_panel();
        let cov = column_covariance(p.outcomes(), 0..p.n_periods());
        assert!((cov - DMatrix::identity(10, 10)).norm() < 1e-10);
        let s = estimate_sigma(&p, 2, SigmaWindow::Full).unwrap();
        assert!((s - 0.8f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn sigma_summation_range_odd_n() {
        // eigenvalues 9..1 on a diagonal covariance: N = 9, r = 2 averages nu_3..nu_9
        let n = 9;
        let t = 20;
        let base = identity_whitened_panel();
        let y = DMatrix::from_fn(n, t, |i, j| base.outcomes()[(i, j)] * ((n - i) as f64).sqrt());
        let cov = column_covariance(&y, 0..t);
        let (vals, _) = sym_eigen_desc(&cov);
        let expect: f64 = vals.iter().skip(2).sum::<f64>() / 9.0;
        let p = Panel::from_matrix(y, 9).unwrap();
        let s = estimate_sigma(&p, 2, SigmaWindow::Full).unwrap();
        assert!((s * s - expect).abs() < 1e-12);
        assert!(estimate_sigma(&p, 5, SigmaWindow::Full).unwrap_err().is_validation());
    }

    #[test]
    fn threshold_closed_form() {
        let thr: f64 = selection_threshold(10, 400, 1.0);
        // sqrt(2 ln(4000) / 400)
        assert!((thr - 0.203_642_45).abs() < 1e-8, "{thr}");
    }

    #[test]
    fn zero_residuals_select_everyone() {
        let l = DMatrix::from_fn(6, 2, |i, k| (i + k) as f64 * 0.3 + 1.0 - k as f64);
        let a = DVector::from_vec(vec![0.5, -1.0]);
        let d = &l * &a;
        let sel = select_controls(&d, &l, &a, 1.0, 100).unwrap();
        assert_eq!(sel.selected, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_selected_is_error() {
        let l = DMatrix::from_element(4, 1, 1.0);
        let d = DVector::from_vec(vec![10.0, 20.0, 30.0, 40.0]);
        let a = DVector::from_vec(vec![0.0]);
        assert!(select_controls(&d, &l, &a, 1e-3, 100).is_err());
    }

    #[test]
    fn refit_null_and_constant_cases() {
        let l = DMatrix::from_fn(5, 2, |i, k| ((i * 3 + k * 7) % 5) as f64 + 0.5);
        let post = &l * DVector::from_vec(vec![1.0, -2.0]);
        let all: Vec<usize> = (0..5).collect();
        let out = refit(&post, &l, &all).unwrap();
        assert!(out.beta_hat.norm() < 1e-12);

        let ones = DMatrix::from_element(4, 1, 1.0);
        let post: DVector<f64> = DVector::from_vec(vec![1.0, 2.0, 4.0, 9.0]);
        let out = refit(&post, &ones, &[0, 1, 2, 3]).unwrap();
        assert!((out.alpha1_hat[0] - 4.0).abs() < 1e-12);
        let centred = post.add_scalar(-4.0);
        assert!((out.beta_hat - centred).norm() < 1e-12);
    }

    #[test]
    fn refit_names_collinear_columns() {
        let l = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 1.0]);
        let post = DVector::from_element(4, 1.0);
        let err = refit(&post, &l, &[0, 1, 2]).unwrap_err();
        assert!(err.to_string().contains("[1]"), "{err}");
    }

    #[test]
    fn uniform_and_matching_weights() {
        let ones: DMatrix<f64> = DMatrix::from_element(6, 1, 1.0);
        let w = synthetic_weights(&ones, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(w[0], 0.0);
        for j in 1..6 {
            assert!((w[j] - 0.2).abs() < 1e-14);
        }
        let l: DMatrix<f64> = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let w = synthetic_weights(&l, &[1, 2]).unwrap();
        assert!((w[1] - 1.0).abs() < 1e-14 && w[2].abs() < 1e-14);
    }

    #[test]
    fn covariates_zero_and_exact() {
        let t = 30;
        let c = DMatrix::from_fn(1, t, |_, j| (j as f64 * 0.37).sin() + 0.2);
        let u = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let eps = DMatrix::from_fn(3, t, |i, j| ((i * 31 + j * 17) % 11) as f64 / 11.0 - 0.5);
        let y = &u * &c + &eps;
        let panel = Panel::from_matrix(y, 20).unwrap();
        let cov = CovariatePanel::new(c.clone(), vec!["c".into()]).unwrap();
        let adj = residualize_covariates(&panel, &cov).unwrap();
        let resid = adj.residual_panel.outcomes();
        // pre-period residuals orthogonal to the covariate
        for i in 0..3 {
            let g: f64 = (0..20).map(|j| resid[(i, j)] * c[(0, j)]).sum();
            assert!(g.abs() < 1e-10);
        }
        let zero = CovariatePanel::new(DMatrix::zeros(1, t), vec!["z".into()]).unwrap();
        let adj = residualize_covariates(&panel, &zero).unwrap();
        assert_eq!(adj.u_tilde, DMatrix::zeros(3, 1));
        assert_eq!(adj.residual_panel, panel);
    }

    #[test]
    fn covariates_exact_regression_leaves_noise() {
        let t = 40;
        let c = DMatrix::from_fn(2, t, |k, j| ((j + 1) as f64).powf(0.5 + k as f64 * 0.3).ln() + k as f64);
        let u = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -1.0, 2.0, 0.0, 3.0]);
        let eps = DMatrix::zeros(3, t);
        let panel = Panel::from_matrix(&u * &c + &eps, 25).unwrap();
        let cov = CovariatePanel::new(c, vec!["a".into(), "b".into()]).unwrap();
        let adj = residualize_covariates(&panel, &cov).unwrap();
        assert!((adj.u_tilde - u).norm() < 1e-8);
        assert!(adj.residual_panel.outcomes().norm() < 1e-8);
    }

    #[test]
    fn collinear_covariates_rejected() {
        let t = 30;
        let row = DMatrix::from_fn(1, t, |_, j| j as f64);
        let c = DMatrix::from_fn(2, t, |k, j| row[(0, j)] * (k + 1) as f64);
        let panel = Panel::from_matrix(DMatrix::from_fn(3, t, |i, j| (i + j) as f64), 20).unwrap();
        let cov = CovariatePanel::new(c, vec!["a".into(), "b".into()]).unwrap();
        assert!(residualize_covariates(&panel, &cov).is_err());
    }
}
