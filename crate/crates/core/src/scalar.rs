//! Scalar abstraction shared by every numerical routine in the crate.
//!
//! All estimators are written against [`Scalar`], which is implemented for
//! `f32` and `f64`. Constants enter through [`lit`], and values leave the
//! generic world through [`num_traits::ToPrimitive`].

use std::fmt::{Debug, Display};
use std::str::FromStr;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating-point scalar usable by the estimators.
pub trait Scalar:
    RealField
    + Copy
    + FromPrimitive
    + ToPrimitive
    + FromStr
    + Display
    + Debug
    + Default
    + Send
    + Sync
    + serde::Serialize
    + 'static
{
    /// Machine epsilon as an `f64`, used to scale tolerances for narrow types.
    const EPS: f64;
}

impl Scalar for f64 {
    const EPS: f64 = f64::EPSILON;
}

impl Scalar for f32 {
    const EPS: f64 = f32::EPSILON as f64;
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("finite literal")
}

/// Converts a count into `T`.
#[inline]
pub fn count<T: Scalar>(n: usize) -> T {
    T::from_usize(n).expect("representable count")
}

/// Lossy conversion to `f64`.
#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Raises a relative tolerance to something the scalar type can resolve.
#[inline]
pub fn resolvable_tol<T: Scalar>(tol: f64) -> f64 {
    tol.max(64.0 * T::EPS)
}
