//! Floating-point scalar abstraction.
//!
//! Tables, encoders and optimizers are generic over [`Scalar`] so the same
//! code runs in `f32` for training and in `f64` for gradient verification.
//! Reductions (means, dot products, log-sum-exp) always accumulate in `f64`.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// floating point: f32 or f64
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Round an `f64` into this scalar type.
    fn of(v: f64) -> Self;

    /// Widen to `f64` (exact for both implementors).
    fn wide(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn wide(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn wide(self) -> f64 {
        self
    }
}
