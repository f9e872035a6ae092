//! Scalar abstractions.
//!
//! The simulation and dynamics code is written against [`Scalar`] (any IEEE
//! float). The simplex solver only needs an ordered field, so it is written
//! against the weaker [`LpField`], which is also implemented for
//! [`BigRational`] to allow exact pivoting.

use std::fmt::{Debug, Display};
use std::ops::Neg;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Float, FromPrimitive, Num, ToPrimitive, Zero};

/// Ordered field used by the simplex solver.
pub trait LpField: Clone + PartialOrd + Debug + Num + Neg<Output = Self> {
    /// Pivot entries and reduced costs at or below this magnitude count as zero.
    fn pivot_tolerance() -> Self;

    /// Margins within `[-tol, tol]` are reported as tight (non-robust).
    fn margin_tolerance() -> Self;

    fn magnitude(&self) -> Self {
        if *self < Self::zero() {
            -self.clone()
        } else {
            self.clone()
        }
    }

    fn approx_f64(&self) -> f64;
}

impl LpField for f64 {
    fn pivot_tolerance() -> Self {
        1e-11
    }
    fn margin_tolerance() -> Self {
        1e-9
    }
    fn approx_f64(&self) -> f64 {
        *self
    }
}

impl LpField for f32 {
    fn pivot_tolerance() -> Self {
        1e-6
    }
    fn margin_tolerance() -> Self {
        1e-5
    }
    fn approx_f64(&self) -> f64 {
        f64::from(*self)
    }
}

impl LpField for BigRational {
    fn pivot_tolerance() -> Self {
        BigRational::zero()
    }
    fn margin_tolerance() -> Self {
        BigRational::zero()
    }
    fn approx_f64(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

/// Floating-point scalar used throughout the library (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + LpField + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal, panicking only if the value is unrepresentable.
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("scalar literal out of range")
    }

    fn from_usize_lossy(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize out of scalar range")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Exact rational from a small integer ratio; used by tests and examples.
pub fn ratio(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&u, &v)| acc + u * v)
}

pub(crate) fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub(crate) fn dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&u, &v)| acc + (u - v) * (u - v))
        .sqrt()
}
