#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sci_core::Panel64;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// The ten-unit loading matrix of the simulation design.
pub fn design_loadings() -> DMatrix<f64> {
    let a = [1.5, -0.5, 1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.5, -1.5];
    let b = [0.5, 1.5, 1.0, -1.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0];
    DMatrix::from_fn(10, 2, |i, k| 0.5 * if k == 0 { a[i] } else { b[i] })
}

/// Rows of independent AR(2) series with coefficients (0.2, 0.1), started
/// from zero and run `burn` periods before recording.
pub fn ar2(rng: &mut ChaCha20Rng, rows: usize, len: usize, burn: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, len);
    for i in 0..rows {
        let (mut a, mut b) = (0.0, 0.0);
        for s in 0..burn + len {
            let z: f64 = StandardNormal.sample(rng);
            let v = 0.2 * a + 0.1 * b + z;
            b = a;
            a = v;
            if s >= burn {
                out[(i, s - burn)] = v;
            }
        }
    }
    out
}

/// Direct effect at 1-based period `t` for an intervention after `t0`.
pub fn beta1(t: usize, t0: usize) -> f64 {
    let k = (t - t0) as f64;
    let s = (std::f64::consts::PI * t as f64 / 12.0).sin();
    if k <= 12.0 {
        k / 3.0 + s
    } else {
        4.0 + s
    }
}

pub struct Design {
    pub t0: usize,
    pub n_interfered: usize,
    pub alpha0: [f64; 2],
    pub alpha1: [f64; 2],
    /// Scale of the direct effect; 0 gives a null design.
    pub effect_scale: f64,
}

impl Design {
    pub fn standard(t0: usize, n_interfered: usize) -> Self {
        Design { t0, n_interfered, alpha0: [0.0, 0.0], alpha1: [1.0, 1.0], effect_scale: 1.0 }
    }

    pub fn null(t0: usize) -> Self {
        Design { t0, n_interfered: 1, alpha0: [0.0, 0.0], alpha1: [0.0, 0.0], effect_scale: 0.0 }
    }
}

pub struct Draw {
    pub panel: Panel64,
    pub y: DMatrix<f64>,
    pub factors: DMatrix<f64>,
    /// `N x T1` effects.
    pub effects: DMatrix<f64>,
    pub truth: DVector<f64>,
}

/// Ten-unit panel from the simulation design, generated independently of
/// the library's generator.
pub fn draw(design: &Design, seed: u64) -> Draw {
    let mut g = rng(seed);
    let t0 = design.t0;
    let t = 2 * t0;
    let lam = design_loadings();
    let w = ar2(&mut g, 2, t, 100);
    let e = ar2(&mut g, 10, t, 100);
    let effects = DMatrix::from_fn(10, t - t0, |i, j| {
        let b = design.effect_scale * beta1(t0 + j + 1, t0);
        if i == 0 {
            b
        } else if i < design.n_interfered {
            0.75 * b
        } else {
            0.0
        }
    });
    let factors = DMatrix::from_fn(2, t, |k, j| w[(k, j)] + if j < t0 { design.alpha0[k] } else { design.alpha1[k] });
    let mut y = &lam * &factors + e;
    for i in 0..10 {
        for j in t0..t {
            y[(i, j)] += effects[(i, j - t0)];
        }
    }
    let truth = DVector::from_fn(10, |i, _| effects.row(i).mean());
    Draw { panel: Panel64::from_matrix(y.clone(), t0).unwrap(), y, factors, effects, truth }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn projector(l: &DMatrix<f64>) -> DMatrix<f64> {
    let g = (l.transpose() * l).try_inverse().unwrap();
    l * g * l.transpose()
}

/// Sum of the `h` smallest squared residuals.
pub fn trimmed_objective(y: &DVector<f64>, x: &DMatrix<f64>, coef: &DVector<f64>, h: usize) -> f64 {
    let mut sq: Vec<f64> = (y - x * coef).iter().map(|r| r * r).collect();
    sq.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sq[..h].iter().sum()
}

/// Global LTS minimum by brute force: OLS on every `h`-subset, scored by
/// the trimmed objective of its own fit.
pub fn brute_force_lts(y: &DVector<f64>, x: &DMatrix<f64>, h: usize) -> (DVector<f64>, f64) {
    let n = y.len();
    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut idx: Vec<usize> = (0..h).collect();
    loop {
        let xs = x.select_rows(&idx);
        let ys = DVector::from_iterator(h, idx.iter().map(|&i| y[i]));
        let svd = xs.svd(true, true);
        if svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min) > 1e-10 {
            let coef = svd.solve(&ys, 1e-12).unwrap();
            let obj = trimmed_objective(y, x, &coef, h);
            if best.as_ref().is_none_or(|b| obj < b.1) {
                best = Some((coef, obj));
            }
        }
        let mut k = h;
        loop {
            if k == 0 {
                return best.expect("some subset is full rank");
            }
            k -= 1;
            if idx[k] != k + n - h {
                break;
            }
        }
        idx[k] += 1;
        for j in k + 1..h {
            idx[j] = idx[j - 1] + 1;
        }
    }
}
