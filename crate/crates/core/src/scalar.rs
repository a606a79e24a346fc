//! Scalar abstraction shared by the tabular and distance code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by the tabular MDP, distance and exact-metric
/// code. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Tolerance used when checking that probability rows sum to one.
    ///
    /// `1e-12` for `f64`; widened to a few ulps of `f32` for single precision.
    fn row_tolerance() -> Self {
        let floor = Self::epsilon() * Self::of(64.0);
        Self::of(1e-12).max(floor)
    }

    /// Lossy conversion from an `f64` literal.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Largest absolute entry of a slice, zero when empty.
pub fn sup_norm<T: Scalar>(values: &[T]) -> T {
    values.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
}

/// Largest absolute entry of `a - b`.
pub(crate) fn sup_diff<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc.max((*x - *y).abs()))
}
