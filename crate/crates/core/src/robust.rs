//! Least trimmed squares without intercept.
//!
//! Minimises the sum of the `h` smallest squared residuals of
//! `response - design * coef`. Small problems are solved exactly by
//! enumerating every `h`-subset; larger ones use FAST-LTS (random elemental
//! starts followed by concentration steps).

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result, Step};
use crate::linalg::{rank, RANK_TOL};
use crate::rng::stream;
use crate::scalar::{lit, resolvable_tol, to_f64, Scalar};

/// Which solver to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LtsMode {
    /// Exhaustive when the number of subsets is at most `exhaustive_cap`.
    #[default]
    Auto,
    Exhaustive,
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LtsOptions {
    pub mode: LtsMode,
    pub exhaustive_cap: u64,
    pub n_starts: usize,
    pub keep_best: usize,
    pub max_csteps: usize,
    pub seed: u64,
}

impl Default for LtsOptions {
    fn default() -> Self {
        Self { mode: LtsMode::Auto, exhaustive_cap: 200_000, n_starts: 500, keep_best: 10, max_csteps: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LtsFit<T: Scalar> {
    pub coef: DVector<T>,
    /// Sum of the `h` smallest squared residuals.
    pub objective: T,
    pub h: usize,
    pub residuals: DVector<T>,
    /// Indices of the `h` smallest squared residuals, ascending by index.
    pub inlier_set: Vec<usize>,
    pub exact: bool,
}

/// Default trimming count `floor(N/2) + 1`.
pub fn default_h(n: usize) -> usize {
    n / 2 + 1
}

/// Largest number of interfered units the estimator tolerates: `floor(n/2 - r)`.
pub fn lts_breakdown_check(n: usize, r: usize) -> Result<usize> {
    if n < 2 * r + 2 {
        return Err(Error::validation(
            Step::RobustRegression,
            format!("no interference budget at N = {n} and r = {r} (need N >= 2r + 2)"),
        ));
    }
    Ok(n / 2 - r)
}

/// Binomial coefficient, saturating at `u64::MAX`.
pub fn n_choose_k(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

pub fn lts_regress<T: Scalar>(response: &DVector<T>, design: &DMatrix<T>, h: usize) -> Result<LtsFit<T>> {
    lts_regress_with(response, design, h, &LtsOptions::default())
}

pub fn lts_regress_with<T: Scalar>(
    response: &DVector<T>,
    design: &DMatrix<T>,
    h: usize,
    opts: &LtsOptions,
) -> Result<LtsFit<T>> {
    let (n, r) = design.shape();
    if response.len() != n {
        return Err(Error::validation(Step::RobustRegression, "response and design lengths differ"));
    }
    if h < r + 1 || h > n {
        return Err(Error::validation(
            Step::RobustRegression,
            format!("trim count h = {h} out of range [{}, {n}]", r + 1),
        ));
    }
    if rank(design) < r {
        return Err(Error::numerical(Step::RobustRegression, "design matrix is rank deficient"));
    }
    let problem = Problem::new(response, design, h);
    let exhaustive = match opts.mode {
        LtsMode::Exhaustive => true,
        LtsMode::Fast => false,
        LtsMode::Auto => n_choose_k(n, h) <= opts.exhaustive_cap,
    };
    let best = if exhaustive { problem.exhaustive() } else { problem.fast(opts) };
    let best = best.ok_or_else(|| Error::numerical(Step::RobustRegression, "every candidate subset was singular"))?;
    let best = problem.concentrate(best, opts.max_csteps);
    Ok(problem.finish(best.coef, exhaustive))
}

struct Problem<'a, T: Scalar> {
    response: &'a DVector<T>,
    design: &'a DMatrix<T>,
    h: usize,
    scratch: std::cell::RefCell<Scratch<T>>,
}

/// Reusable buffers for subset least squares.
struct Scratch<T> {
    /// Column-major copy of the subset design.
    a: Vec<T>,
    b: Vec<T>,
    order: Vec<usize>,
}

#[derive(Clone)]
struct Candidate<T: Scalar> {
    coef: DVector<T>,
    objective: T,
    subset: Vec<usize>,
}

impl<'a, T: Scalar> Problem<'a, T> {
    fn new(response: &'a DVector<T>, design: &'a DMatrix<T>, h: usize) -> Self {
        let (n, r) = design.shape();
        let scratch = Scratch { a: vec![T::zero(); n * r], b: vec![T::zero(); n], order: (0..n).collect() };
        Self { response, design, h, scratch: std::cell::RefCell::new(scratch) }
    }

    fn squared_residuals(&self, coef: &DVector<T>) -> DVector<T> {
        let fitted = self.design * coef;
        (self.response - fitted).map(|e| e * e)
    }

    /// Indices of the `h` smallest entries; ties broken by index.
    fn smallest(&self, sq: &DVector<T>) -> Vec<usize> {
        let mut scratch = self.scratch.borrow_mut();
        let idx = &mut scratch.order;
        idx.clear();
        idx.extend(0..sq.len());
        idx.sort_by(|&a, &b| sq[a].partial_cmp(&sq[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        idx[..self.h].to_vec()
    }

    fn trimmed(&self, sq: &DVector<T>, subset: &[usize]) -> T {
        subset.iter().fold(T::zero(), |acc, &i| acc + sq[i])
    }

    /// Least squares on the rows in `subset` by Householder QR; `None` when
    /// the subset design is rank deficient.
    fn fit_subset(&self, subset: &[usize]) -> Option<DVector<T>> {
        let r = self.design.ncols();
        let m = subset.len();
        if m < r {
            return None;
        }
        let mut guard = self.scratch.borrow_mut();
        let Scratch { a, b, .. } = &mut *guard;
        for (k, &i) in subset.iter().enumerate() {
            for j in 0..r {
                a[j * m + k] = self.design[(i, j)];
            }
            b[k] = self.response[i];
        }
        let tol = lit::<T>(resolvable_tol::<T>(RANK_TOL));
        let mut scale = T::zero();
        for j in 0..r {
            let col_norm = (0..m).fold(T::zero(), |acc, k| acc + a[j * m + k] * a[j * m + k]).sqrt();
            if col_norm > scale {
                scale = col_norm;
            }
        }
        if scale <= T::zero() {
            return None;
        }
        for j in 0..r {
            // Householder vector for column j below the diagonal
            let norm = (j..m).fold(T::zero(), |acc, k| acc + a[j * m + k] * a[j * m + k]).sqrt();
            if norm <= tol * scale {
                return None;
            }
            let alpha = if a[j * m + j] > T::zero() { -norm } else { norm };
            a[j * m + j] -= alpha;
            let vnorm2 = (j..m).fold(T::zero(), |acc, k| acc + a[j * m + k] * a[j * m + k]);
            if vnorm2 > T::zero() {
                for c in j + 1..r {
                    let dot = (j..m).fold(T::zero(), |acc, k| acc + a[j * m + k] * a[c * m + k]);
                    let f = (dot + dot) / vnorm2;
                    for k in j..m {
                        let v = a[j * m + k];
                        a[c * m + k] -= f * v;
                    }
                }
                let dot = (j..m).fold(T::zero(), |acc, k| acc + a[j * m + k] * b[k]);
                let f = (dot + dot) / vnorm2;
                for k in j..m {
                    b[k] -= f * a[j * m + k];
                }
            }
            // R_jj; the reflector itself is no longer needed
            a[j * m + j] = alpha;
        }
        let mut coef = DVector::zeros(r);
        for j in (0..r).rev() {
            let mut acc = b[j];
            for c in j + 1..r {
                acc -= a[c * m + j] * coef[c];
            }
            coef[j] = acc / a[j * m + j];
        }
        Some(coef)
    }

    fn evaluate(&self, coef: DVector<T>) -> Candidate<T> {
        let sq = self.squared_residuals(&coef);
        let subset = self.smallest(&sq);
        let objective = self.trimmed(&sq, &subset);
        Candidate { coef, objective, subset }
    }

    /// Concentration steps until the trimmed subset stops changing.
    fn concentrate(&self, mut cand: Candidate<T>, max_steps: usize) -> Candidate<T> {
        for _ in 0..max_steps {
            let mut subset = cand.subset.clone();
            subset.sort_unstable();
            let Some(coef) = self.fit_subset(&subset) else { break };
            let next = self.evaluate(coef);
            if next.objective < cand.objective {
                cand = next;
            } else {
                break;
            }
        }
        cand
    }

    fn exhaustive(&self) -> Option<Candidate<T>> {
        let n = self.design.nrows();
        let mut best: Option<Candidate<T>> = None;
        let mut subset: Vec<usize> = (0..self.h).collect();
        loop {
            if let Some(coef) = self.fit_subset(&subset) {
                let cand = self.evaluate(coef);
                if best.as_ref().map_or(true, |b| cand.objective < b.objective) {
                    best = Some(cand);
                }
            }
            if !next_combination(&mut subset, n) {
                break;
            }
        }
        best
    }

    fn fast(&self, opts: &LtsOptions) -> Option<Candidate<T>> {
        let (n, r) = self.design.shape();
        let mut rng = stream(opts.seed, crate::rng::Domain::Lts, 0);
        let mut pool: Vec<Candidate<T>> = Vec::with_capacity(opts.n_starts);
        for _ in 0..opts.n_starts {
            let mut start: Vec<usize> = sample(&mut rng, n, r).into_vec();
            start.sort_unstable();
            // grow singular elemental sets until they determine a fit
            let mut coef = self.fit_subset(&start);
            while coef.is_none() && start.len() < n {
                let unused: Vec<usize> = (0..n).filter(|i| !start.contains(i)).collect();
                start.push(unused[rng.gen_range(0..unused.len())]);
                start.sort_unstable();
                coef = self.fit_subset(&start);
            }
            let Some(coef) = coef else { continue };
            pool.push(self.concentrate(self.evaluate(coef), 2));
        }
        pool.sort_by(|a, b| a.objective.partial_cmp(&b.objective).unwrap_or(std::cmp::Ordering::Equal));
        pool.truncate(opts.keep_best);
        pool.into_iter()
            .map(|c| self.concentrate(c, opts.max_csteps))
            .fold(None, |best: Option<Candidate<T>>, c| match best {
                Some(b) if b.objective <= c.objective => Some(b),
                _ => Some(c),
            })
    }

    fn finish(&self, coef: DVector<T>, exact: bool) -> LtsFit<T> {
        let residuals = self.response - self.design * &coef;
        let sq = residuals.map(|e| e * e);
        let mut inlier_set = self.smallest(&sq);
        let objective = self.trimmed(&sq, &inlier_set);
        inlier_set.sort_unstable();
        debug_assert!(to_f64(objective).is_finite());
        LtsFit { coef, objective, h: self.h, residuals, inlier_set, exact }
    }
}

/// Advances `c` to the next k-combination of `0..n` in lexicographic order.
pub(crate) fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}
