//! Synthetic control estimation that tolerates interference between units.
//!
//! A single treated unit (row 0 of a [`Panel`]) receives an intervention
//! after period `t0`. Control units may themselves be affected. The
//! estimator recovers the average effect on every unit by
//!
//! 1. fitting a factor model to the pre-intervention outcomes,
//! 2. regressing the pre/post mean difference on the loadings with least
//!    trimmed squares,
//! 3. keeping the units whose LTS residual is below a hard threshold, and
//! 4. refitting the post-period factor mean on those units.
//!
//! Inference uses a circular block bootstrap. [`dynamic`] extends the
//! method to per-period effects and [`simulation`] holds the Monte Carlo
//! harness.
//!
//! Everything numerical is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` / `*32` aliases below fix the scalar type.

pub mod dynamic;
pub mod error;
pub mod estimator;
pub mod factor;
pub mod inference;
pub mod linalg;
pub mod panel;
pub mod rng;
pub mod robust;
pub mod scalar;
pub mod simulation;

pub use dynamic::{estimate_dynamic_effects, fit_trend, DynamicEffects, TrendModel, TrendSpec};
pub use error::{Error, Result, Step};
pub use estimator::{
    estimate_average_effects, estimate_sigma, refit, residualize_covariates, select_controls, synthetic_weights,
    CovariateAdjustment, EffectEstimate, EstimatorOptions, SigmaWindow,
};
pub use factor::{fit_factors, suggest_r, FactorFit, FactorOptions};
pub use inference::{block_bootstrap, default_block_len, BootstrapOptions, BootstrapResult};
pub use panel::{load_covariates, load_panel, placebo_split, split_means, CovariatePanel, Panel};
pub use robust::{lts_breakdown_check, lts_regress, LtsFit, LtsOptions};
pub use scalar::Scalar;
pub use simulation::{did_estimate, md_estimate, run_cell, run_experiment, simulate_panel, SimConfig, SimReport};

pub type Panel64 = Panel<f64>;
pub type CovariatePanel64 = CovariatePanel<f64>;
pub type FactorFit64 = FactorFit<f64>;
pub type LtsFit64 = LtsFit<f64>;
pub type EffectEstimate64 = EffectEstimate<f64>;
pub type BootstrapResult64 = BootstrapResult<f64>;
pub type DynamicEffects64 = DynamicEffects<f64>;

pub type Panel32 = Panel<f32>;
pub type FactorFit32 = FactorFit<f32>;
pub type EffectEstimate32 = EffectEstimate<f32>;
