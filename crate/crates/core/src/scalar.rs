//! Scalar abstraction: every numerical routine in this crate is generic over
//! the floating-point type through [`Scalar`] (f32 or f64 in practice).

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable throughout the crate.
///
/// Blanket-implemented for anything float-like; in practice `f32` and `f64`.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum
    + ScalarOperand
    + LinalgScalar
    + Send
    + Sync
    + Display
    + Debug
    + 'static
{
    /// Convert an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal not representable")
    }

    /// Lossy view as `f64`, for reporting and serialization.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }

    /// Convert a `usize` count into this scalar type.
    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count not representable")
    }
}

impl<T> Scalar for T where
    T: Float
        + NumAssign
        + FromPrimitive
        + ToPrimitive
        + Sum
        + ScalarOperand
        + LinalgScalar
        + Send
        + Sync
        + Display
        + Debug
        + 'static
{
}
