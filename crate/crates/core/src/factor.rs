//! Maximum-likelihood factor analysis of the pre-intervention panel.
//!
//! The model `y_t = L f_t + e_t`, `Var(f_t) = I`, `Var(e_t) = diag(psi)` is
//! fitted by EM on the sample correlation matrix and rescaled to the outcome
//! scale afterwards. The returned loadings are rotated so that
//! `L' diag(psi)^-1 L` is diagonal with decreasing entries, and each column is
//! signed so that its largest-magnitude entry is positive.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result, Step};
use crate::linalg::{column_covariance, sym_eigen_desc};
use crate::panel::Panel;
use crate::scalar::{count, lit, resolvable_tol, to_f64, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorOptions {
    pub max_iter: usize,
    /// Relative change in log-likelihood that ends the iteration.
    pub tol: f64,
    /// Once the likelihood has settled, iteration continues until no
    /// uniqueness (correlation scale) moves by more than this, for at most
    /// `10 * max_iter` cycles in total.
    pub param_tol: f64,
    /// Lower bound for uniquenesses on the correlation scale.
    pub uniqueness_floor: f64,
    /// Keep the per-iteration log-likelihood in [`FactorFit::trace`].
    pub record_trace: bool,
}

impl Default for FactorOptions {
    fn default() -> Self {
        Self { max_iter: 1000, tol: 1e-8, param_tol: 1e-12, uniqueness_floor: 1e-3, record_trace: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorFit<T: Scalar> {
    /// `N x r` loadings on the outcome scale.
    pub loadings: DMatrix<T>,
    /// Idiosyncratic variances on the outcome scale.
    pub uniquenesses: DVector<T>,
    pub r: usize,
    /// Gaussian log-likelihood of the pre-period sample covariance.
    pub log_likelihood: f64,
    pub converged: bool,
    pub n_iter: usize,
    /// Some uniqueness sits on the floor at convergence.
    pub heywood: bool,
    pub trace: Vec<f64>,
}

impl<T: Scalar> FactorFit<T> {
    /// `L L' + diag(psi)`.
    pub fn fitted_covariance(&self) -> DMatrix<T> {
        let mut c = &self.loadings * self.loadings.transpose();
        for i in 0..c.nrows() {
            c[(i, i)] += self.uniquenesses[i];
        }
        c
    }

    /// `L' diag(psi)^-1 L`.
    pub fn constraint_matrix(&self) -> DMatrix<T> {
        let mut scaled = self.loadings.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row /= self.uniquenesses[i];
        }
        self.loadings.transpose() * scaled
    }
}

fn check_dimensions(n: usize, r: usize, t0: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::validation(Step::FactorAnalysis, "need at least one factor"));
    }
    if r >= n || (n - r) * (n - r) < n + r {
        return Err(Error::validation(
            Step::FactorAnalysis,
            format!("{r} factors are not identified with {n} units (need (N-r)^2 >= N+r)"),
        ));
    }
    if t0 <= n {
        return Err(Error::validation(
            Step::FactorAnalysis,
            format!("need more pre-intervention periods than units (t0 = {t0}, N = {n})"),
        ));
    }
    Ok(())
}

pub fn fit_factors<T: Scalar>(panel: &Panel<T>, r: usize) -> Result<FactorFit<T>> {
    fit_factors_with(panel, r, &FactorOptions::default())
}

pub fn fit_factors_with<T: Scalar>(panel: &Panel<T>, r: usize, opts: &FactorOptions) -> Result<FactorFit<T>> {
    let n = panel.n_units();
    check_dimensions(n, r, panel.t0())?;
    let cov = column_covariance(panel.outcomes(), 0..panel.t0());
    fit_covariance(&cov, panel.t0(), r, opts)
}

/// Fits the factor model to a sample covariance computed from `n_obs` periods.
pub fn fit_covariance<T: Scalar>(cov: &DMatrix<T>, n_obs: usize, r: usize, opts: &FactorOptions) -> Result<FactorFit<T>> {
    let n = cov.nrows();
    let sd: DVector<T> = DVector::from_iterator(n, (0..n).map(|i| cov[(i, i)].sqrt()));
    let max_sd = sd.iter().copied().fold(T::zero(), |a, b| if b > a { b } else { a });
    if sd.iter().any(|&s| !(s > max_sd * lit::<T>(resolvable_tol::<T>(1e-12)))) {
        return Err(singular());
    }
    let corr = DMatrix::from_fn(n, n, |i, j| if i == j { T::one() } else { cov[(i, j)] / (sd[i] * sd[j]) });

    let corr_inv = corr.clone().cholesky().ok_or_else(singular)?.inverse();
    let floor = lit::<T>(opts.uniqueness_floor);
    let tol = resolvable_tol::<T>(opts.tol);
    let param_tol = lit::<T>(resolvable_tol::<T>(opts.param_tol));

    // principal-axis start
    let start_scale = lit::<T>(1.0 - 0.5 * r as f64 / n as f64);
    let mut psi = DVector::from_fn(n, |i, _| clamp(start_scale / corr_inv[(i, i)], floor, T::one()));
    let mut reduced = corr.clone();
    for i in 0..n {
        reduced[(i, i)] -= psi[i];
    }
    let (vals, vecs) = sym_eigen_desc(&reduced);
    let mut loadings = DMatrix::from_fn(n, r, |i, k| {
        let v = if vals[k] > lit(1e-6) { vals[k] } else { lit(1e-6) };
        vecs[(i, k)] * v.sqrt()
    });

    let mut trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut converged = false;
    let mut n_iter = 0;
    let mut ll = f64::NEG_INFINITY;
    while n_iter < if converged { 10 * opts.max_iter } else { opts.max_iter } {
        n_iter += 1;
        let (next, ll0) = squarem_cycle(&corr, (loadings, psi.clone()), floor)?;
        ll = ll0;
        if opts.record_trace {
            trace.push(ll);
        }
        let step = (&next.1 - &psi).amax();
        (loadings, psi) = next;
        if !converged && prev_ll.is_finite() && ((ll - prev_ll).abs() <= tol * ll.abs().max(1.0)) {
            converged = true;
        }
        if converged && step <= param_tol {
            break;
        }
        prev_ll = ll;
    }

    let ll_total = n_obs as f64 * (ll - sd.iter().map(|&s| to_f64(s).ln()).sum::<f64>());
    if !converged {
        return Err(Error::NotConverged {
            step: Step::FactorAnalysis,
            iterations: n_iter,
            last_log_likelihood: ll_total,
            last_loadings: (0..n)
                .flat_map(|i| (0..r).map(move |k| (i, k)))
                .map(|(i, k)| to_f64(loadings[(i, k)] * sd[i]))
                .collect(),
            last_uniquenesses: (0..n).map(|i| to_f64(psi[i] * sd[i] * sd[i])).collect(),
        });
    }

    let heywood = psi.iter().any(|&p| p <= floor * lit(1.0 + 1e-9));
    let loadings = canonical_rotation(&loadings, &psi);
    let loadings = DMatrix::from_fn(n, r, |i, k| loadings[(i, k)] * sd[i]);
    let uniquenesses = DVector::from_fn(n, |i, _| psi[i] * sd[i] * sd[i]);
    Ok(FactorFit {
        loadings,
        uniquenesses,
        r,
        log_likelihood: ll_total,
        converged,
        n_iter,
        heywood,
        trace,
    })
}

fn singular() -> Error {
    Error::numerical(
        Step::FactorAnalysis,
        "pre-intervention sample covariance is singular; use fewer factors or more periods",
    )
}

fn clamp<T: Scalar>(x: T, lo: T, hi: T) -> T {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

type Params<T> = (DMatrix<T>, DVector<T>);

fn clamp_psi<T: Scalar>(psi: DVector<T>, floor: T) -> DVector<T> {
    psi.map(|p| clamp(p, floor, T::one()))
}

/// One squared-extrapolation cycle built from two EM updates. Returns the
/// next iterate and the log-likelihood of the incoming one. The extrapolated
/// point is kept only if it does not lower the likelihood; otherwise the
/// cycle reduces to two plain EM updates.
fn squarem_cycle<T: Scalar>(s: &DMatrix<T>, theta0: Params<T>, floor: T) -> Result<(Params<T>, f64)> {
    let first = em_step(s, &theta0.0, &theta0.1)?;
    let ll0 = first.log_likelihood;
    let theta1 = (first.loadings, clamp_psi(first.psi, floor));
    let second = em_step(s, &theta1.0, &theta1.1)?;
    let theta2 = (second.loadings, clamp_psi(second.psi, floor));

    let r_l = &theta1.0 - &theta0.0;
    let r_p = &theta1.1 - &theta0.1;
    let v_l = &theta2.0 - &theta1.0 - &r_l;
    let v_p = &theta2.1 - &theta1.1 - &r_p;
    let r_norm = (r_l.norm_squared() + r_p.norm_squared()).sqrt();
    let v_norm = (v_l.norm_squared() + v_p.norm_squared()).sqrt();
    if !(v_norm > T::zero()) {
        return Ok((theta2, ll0));
    }
    let mut alpha = -(r_norm / v_norm);
    if alpha > -T::one() {
        alpha = -T::one();
    }
    if alpha == -T::one() {
        return Ok((theta2, ll0));
    }
    let two = lit::<T>(2.0);
    let ext_l = &theta0.0 - &r_l * (two * alpha) + &v_l * (alpha * alpha);
    let ext_p = clamp_psi(&theta0.1 - &r_p * (two * alpha) + &v_p * (alpha * alpha), floor);
    match em_step(s, &ext_l, &ext_p) {
        Ok(step) if step.log_likelihood >= ll0 => Ok(((step.loadings, clamp_psi(step.psi, floor)), ll0)),
        _ => Ok((theta2, ll0)),
    }
}

struct EmStep<T: Scalar> {
    loadings: DMatrix<T>,
    psi: DVector<T>,
    /// Per-observation log-likelihood of the input parameters.
    log_likelihood: f64,
}

/// One EM update; also evaluates the log-likelihood at the incoming iterate.
fn em_step<T: Scalar>(s: &DMatrix<T>, loadings: &DMatrix<T>, psi: &DVector<T>) -> Result<EmStep<T>> {
    let n = s.nrows();
    let r = loadings.ncols();
    let mut lt_pinv = loadings.transpose();
    for (i, mut col) in lt_pinv.column_iter_mut().enumerate() {
        col /= psi[i];
    }
    let mut inner = &lt_pinv * loadings;
    for k in 0..r {
        inner[(k, k)] += T::one();
    }
    let chol = inner.cholesky().ok_or_else(|| Error::numerical(Step::FactorAnalysis, "EM update lost definiteness"))?;
    let logdet_inner: T = chol.l_dirty().diagonal().iter().map(|d| d.ln()).fold(T::zero(), |a, b| a + b);
    let g = chol.inverse();
    let w = s * lt_pinv.transpose(); // N x r
    let sbt = &w * &g; // S B'
    let b = &g * &lt_pinv; // r x N

    let logdet_psi = psi.iter().map(|p| p.ln()).fold(T::zero(), |a, b| a + b);
    let logdet = logdet_psi + logdet_inner * lit(2.0);
    let diag_term = (0..n).map(|i| s[(i, i)] / psi[i]).fold(T::zero(), |a, b| a + b);
    let trace_corr = (&g * (&lt_pinv * &w)).trace();
    let tr = diag_term - trace_corr;
    let ll = -0.5 * (to_f64(logdet) + to_f64(tr) + n as f64 * (2.0 * std::f64::consts::PI).ln());

    let mut ezz = &b * &sbt;
    ezz += &g;
    let ezz_inv = ezz
        .cholesky()
        .ok_or_else(|| Error::numerical(Step::FactorAnalysis, "EM moment matrix is not positive definite"))?
        .inverse();
    let new_loadings = &sbt * ezz_inv;
    let new_psi = DVector::from_fn(n, |i, _| {
        let explained = (0..r).map(|k| new_loadings[(i, k)] * sbt[(i, k)]).fold(T::zero(), |a, b| a + b);
        s[(i, i)] - explained
    });
    if !ll.is_finite() {
        return Err(Error::numerical(Step::FactorAnalysis, "log-likelihood is not finite"));
    }
    Ok(EmStep { loadings: new_loadings, psi: new_psi, log_likelihood: ll })
}

/// Rotates `loadings` so that `L' diag(psi)^-1 L` is diagonal with decreasing
/// entries and fixes column signs.
fn canonical_rotation<T: Scalar>(loadings: &DMatrix<T>, psi: &DVector<T>) -> DMatrix<T> {
    let mut scaled = loadings.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row /= psi[i];
    }
    let m = loadings.transpose() * scaled;
    let (_, q) = sym_eigen_desc(&m);
    let mut rotated = loadings * q;
    for mut col in rotated.column_iter_mut() {
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < T::zero() {
            col.neg_mut();
        }
    }
    rotated
}

/// Number of eigenvalues of the pre-period correlation matrix above one.
pub fn suggest_r<T: Scalar>(panel: &Panel<T>) -> usize {
    let cov = column_covariance(panel.outcomes(), 0..panel.t0());
    let n = cov.nrows();
    let sd: Vec<T> = (0..n).map(|i| cov[(i, i)].sqrt()).collect();
    let corr = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            T::one()
        } else if sd[i] > T::zero() && sd[j] > T::zero() {
            cov[(i, j)] / (sd[i] * sd[j])
        } else {
            T::zero()
        }
    });
    let (vals, _) = sym_eigen_desc(&corr);
    let cut = T::one() + lit::<T>(resolvable_tol::<T>(1e-9)) * count::<T>(n);
    vals.iter().filter(|&&v| v > cut).count()
}
