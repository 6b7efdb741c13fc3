//! Floating-point scalar abstraction for the numeric substrate.
//!
//! The math layers (matrices, MLPs, kernel density estimation, closed-form
//! bounds) are written against [`Real`] so they work for `f32` and `f64`.
//! The pipeline itself always runs in `f64`; the concrete aliases live at the
//! crate root.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Scalar type for all dense numeric code: `f32` or `f64`.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Shorthand for converting an `f64` constant, panicking only if the
    /// target type cannot represent any finite value (never for f32/f64).
    fn c(value: f64) -> Self {
        Self::from_f64(value).expect("constant not representable in scalar type")
    }

    /// Lossy view as `f64` for reporting and serialization.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl<T> Real for T where
    T: Float
        + FloatConst
        + FromPrimitive
        + ToPrimitive
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of_squares<F: Real>(xs: &[F]) -> F {
        xs.iter().fold(F::zero(), |acc, &x| acc + x * x)
    }

    #[test]
    fn works_for_both_widths() {
        assert_eq!(sum_of_squares(&[1.0f32, 2.0]), 5.0f32);
        assert_eq!(sum_of_squares(&[1.0f64, 2.0]), 5.0f64);
        assert_eq!(f64::c(0.5), 0.5);
    }
}
