//! Circular block bootstrap for the average effects.
//!
//! Pre- and post-intervention periods are resampled separately with
//! wrap-around blocks; every resampled period keeps its whole cross-section.
//! Each replicate reruns the estimator and the replicate spread gives
//! Wald-type intervals.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result, Step};
use crate::estimator::{estimate_average_effects_with, estimate_with_fixed_selection, EffectEstimate, EstimatorOptions};
use crate::panel::Panel;
use crate::rng::{stream, Domain};
use crate::scalar::{lit, to_f64, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOptions {
    pub n_boot: usize,
    pub block_len: usize,
    /// Confidence levels in (0, 1).
    pub levels: Vec<f64>,
    pub seed: u64,
    /// Keep the original selected set in every replicate.
    pub fix_selection: bool,
    pub estimator: EstimatorOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Interval {
    pub level: f64,
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult<T: Scalar> {
    /// `B x N` replicate estimates.
    pub replicates: DMatrix<T>,
    pub point: DVector<T>,
    pub se: DVector<T>,
    /// Wald intervals, per unit then per level.
    pub intervals: Vec<Vec<Interval>>,
    /// Percentile intervals, reported for diagnostics.
    pub percentile: Vec<Vec<Interval>>,
    pub block_len: usize,
    pub n_boot: usize,
    pub seed: u64,
    /// Replicates that had to be redrawn after a failed fit.
    pub retries: usize,
    pub estimate: EffectEstimate<T>,
}

/// `max(1, round(T^(1/3)))`.
pub fn default_block_len(n_periods: usize) -> usize {
    ((n_periods as f64).cbrt().round() as usize).max(1)
}

/// Circular block resample of `0..len`.
pub fn circular_block_indices(rng: &mut ChaCha8Rng, len: usize, block_len: usize) -> Vec<usize> {
    let n_blocks = len.div_ceil(block_len);
    let mut out = Vec::with_capacity(n_blocks * block_len);
    for _ in 0..n_blocks {
        let start = rng.gen_range(0..len);
        out.extend((0..block_len).map(|k| (start + k) % len));
    }
    out.truncate(len);
    out
}

/// Period indices for one replicate: pre segment then post segment.
pub fn resample_periods(rng: &mut ChaCha8Rng, t0: usize, n_periods: usize, block_len: usize) -> Vec<usize> {
    let mut idx = circular_block_indices(rng, t0, block_len);
    idx.extend(circular_block_indices(rng, n_periods - t0, block_len).into_iter().map(|i| i + t0));
    idx
}

/// Two-sided standard normal quantile for a confidence level.
pub fn z_value(level: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

pub fn block_bootstrap<T: Scalar>(panel: &Panel<T>, r: usize, opts: &BootstrapOptions) -> Result<BootstrapResult<T>> {
    let t0 = panel.t0();
    let t = panel.n_periods();
    if opts.n_boot < 50 {
        return Err(Error::validation(Step::Bootstrap, format!("need at least 50 replicates, got {}", opts.n_boot)));
    }
    let max_len = t0.min(t - t0);
    if opts.block_len < 1 || opts.block_len > max_len {
        return Err(Error::validation(
            Step::Bootstrap,
            format!("block length {} out of range [1, {max_len}]", opts.block_len),
        ));
    }
    if let Some(bad) = opts.levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
        return Err(Error::validation(Step::Bootstrap, format!("confidence level {bad} not in (0, 1)")));
    }
    let estimate = estimate_average_effects_with(panel, r, &opts.estimator)?;
    let budget = 10 * opts.n_boot;

    let draws: Vec<std::result::Result<(DVector<T>, usize), String>> = (0..opts.n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(opts.seed, Domain::Bootstrap, b as u64);
            let mut failures = 0;
            loop {
                let periods = resample_periods(&mut rng, t0, t, opts.block_len);
                let fitted = panel.resampled(&periods, t0).and_then(|p| {
                    if opts.fix_selection {
                        estimate_with_fixed_selection(&p, r, &estimate.selected_controls, &opts.estimator)
                    } else {
                        estimate_average_effects_with(&p, r, &opts.estimator)
                    }
                });
                match fitted {
                    Ok(est) => return Ok((est.beta_hat, failures)),
                    Err(e) => {
                        failures += 1;
                        if failures > budget {
                            return Err(e.to_string());
                        }
                    }
                }
            }
        })
        .collect();

    let n = panel.n_units();
    let mut replicates = DMatrix::zeros(opts.n_boot, n);
    let mut retries = 0;
    for (b, draw) in draws.into_iter().enumerate() {
        match draw {
            Ok((beta, fails)) => {
                retries += fails;
                replicates.row_mut(b).copy_from(&beta.transpose());
            }
            Err(msg) => {
                return Err(Error::numerical(Step::Bootstrap, format!("replicate {b} kept failing: {msg}")));
            }
        }
    }
    if retries > budget {
        return Err(Error::numerical(
            Step::Bootstrap,
            format!("{retries} failed replicate fits exceed the budget of {budget}"),
        ));
    }

    let point = estimate.beta_hat.clone();
    let se = DVector::from_fn(n, |i, _| sample_sd(replicates.column(i).iter().copied()));
    let intervals = (0..n)
        .map(|i| {
            opts.levels
                .iter()
                .map(|&level| {
                    let half = z_value(level) * to_f64(se[i]);
                    let c = to_f64(point[i]);
                    Interval { level, low: c - half, high: c + half }
                })
                .collect()
        })
        .collect();
    let percentile = (0..n)
        .map(|i| {
            let mut col: Vec<f64> = replicates.column(i).iter().map(|&v| to_f64(v)).collect();
            col.sort_by(f64::total_cmp);
            opts.levels
                .iter()
                .map(|&level| {
                    let a = (1.0 - level) / 2.0;
                    Interval { level, low: quantile(&col, a), high: quantile(&col, 1.0 - a) }
                })
                .collect()
        })
        .collect();
    Ok(BootstrapResult {
        replicates,
        point,
        se,
        intervals,
        percentile,
        block_len: opts.block_len,
        n_boot: opts.n_boot,
        seed: opts.seed,
        retries,
        estimate,
    })
}

fn sample_sd<T: Scalar>(values: impl Iterator<Item = T> + Clone) -> T {
    let n = values.clone().count();
    if n < 2 {
        return T::zero();
    }
    let nf = lit::<T>(n as f64);
    let mean = values.clone().fold(T::zero(), |a, b| a + b) / nf;
    let ss = values.fold(T::zero(), |a, v| a + (v - mean) * (v - mean));
    (ss / lit::<T>((n - 1) as f64)).sqrt()
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}
