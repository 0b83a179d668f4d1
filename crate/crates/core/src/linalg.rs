//! Small dense linear-algebra helpers built on nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::scalar::{count, lit, resolvable_tol, Scalar};

/// Relative singular-value cutoff for rank decisions.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LeastSquares<T: Scalar> {
    pub coef: DVector<T>,
    pub rank: usize,
}

/// Minimum-norm least squares through the SVD.
///
/// Singular values below `RANK_TOL * s_max` are treated as zero, so the
/// returned rank can be smaller than the column count.
pub fn lstsq<T: Scalar>(a: &DMatrix<T>, b: &DVector<T>) -> LeastSquares<T> {
    let ncols = a.ncols();
    if a.nrows() == 0 || ncols == 0 {
        return LeastSquares { coef: DVector::zeros(ncols), rank: 0 };
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(T::zero(), |m, s| if s > m { s } else { m });
    let cutoff = smax * lit::<T>(resolvable_tol::<T>(RANK_TOL));
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut coef = DVector::zeros(ncols);
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > T::zero() {
            rank += 1;
            let proj = u.column(k).dot(b) / s;
            coef.axpy(proj, &v_t.row(k).transpose(), T::one());
        }
    }
    LeastSquares { coef, rank }
}

/// Numerical rank of `a`.
pub fn rank<T: Scalar>(a: &DMatrix<T>) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().singular_values();
    let smax = sv.iter().copied().fold(T::zero(), |m, s| if s > m { s } else { m });
    if smax <= T::zero() {
        return 0;
    }
    let cutoff = smax * lit::<T>(resolvable_tol::<T>(RANK_TOL));
    sv.iter().filter(|&&s| s > cutoff).count()
}

/// Columns that are (numerically) spanned by the columns before them.
pub fn dependent_columns<T: Scalar>(a: &DMatrix<T>) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..a.ncols() {
        let mut cols = kept.clone();
        cols.push(j);
        let sub = a.select_columns(&cols);
        if rank(&sub) == cols.len() {
            kept.push(j);
        } else {
            dependent.push(j);
        }
    }
    dependent
}

/// Symmetric eigendecomposition with eigenvalues sorted in decreasing order.
pub fn sym_eigen_desc<T: Scalar>(m: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let eig = m.clone().symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = eig.eigenvectors.select_columns(&order);
    (values, vectors)
}

/// Sample covariance of the columns `cols` of `data` (rows = variables),
/// centred at the sample mean, with divisor equal to the number of columns.
pub fn column_covariance<T: Scalar>(data: &DMatrix<T>, cols: std::ops::Range<usize>) -> DMatrix<T> {
    let n = data.nrows();
    let len = cols.len();
    let block = data.columns(cols.start, len);
    let mean = block.column_mean();
    let mut centred = block.into_owned();
    for mut c in centred.column_iter_mut() {
        c -= &mean;
    }
    let mut cov = &centred * centred.transpose();
    cov /= count::<T>(len);
    // exact symmetry
    for i in 0..n {
        for j in 0..i {
            let v = (cov[(i, j)] + cov[(j, i)]) * lit::<T>(0.5);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}
