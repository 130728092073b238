//! Floating point abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar type the tensor and estimation code is generic over.
///
/// Implemented for `f32` and `f64`. The statistical pipeline (simulation,
/// inference tables, CLI) runs in `f64`; the `f32` instantiation is useful
/// for memory-bound fitting where 1e-6 level accuracy is enough.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from `f64`.
    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    /// Lossy conversion from `usize`.
    #[inline]
    fn of_usize(x: usize) -> Self {
        <Self as FromPrimitive>::from_usize(x).expect("usize is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Tolerance for "unit norm" and orthogonality checks.
    ///
    /// 1e-12 in double precision, a few hundred ulps in single precision.
    #[inline]
    fn unit_tol() -> Self {
        let floor = Self::of(1e-12);
        let scaled = Self::epsilon() * Self::of(64.0);
        if scaled > floor {
            scaled
        } else {
            floor
        }
    }

    /// Relative residual at which power iteration stops.
    #[inline]
    fn eig_tol() -> Self {
        Self::unit_tol()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
