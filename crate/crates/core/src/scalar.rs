//! Scalar abstraction shared by every numerical routine in the crate.
//!
//! The solvers only need IEEE-style floating point with `exp`/`ln`, so the
//! bound is `num_traits::Float` plus conversions. `f64` is the workhorse;
//! `f32` compiles and runs but the default tolerances are tuned for doubles.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// floating point: f32 or f64
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal. Panics only if the target type cannot
    /// represent finite doubles at all, which no supported type does.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("scalar conversion from f64")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("scalar conversion from usize")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn half() -> Self {
        Self::lit(0.5)
    }

    #[inline]
    fn two() -> Self {
        Self::lit(2.0)
    }

    /// `x⁺ = max(x, 0)`.
    #[inline]
    fn pos(self) -> Self {
        self.max(Self::zero())
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable `ln Σ w_i exp(x_i)` for nonnegative weights.
///
/// Entries with zero weight are skipped so that `-∞` exponents paired with
/// zero-probability branches do not produce NaN.
pub fn log_sum_exp<T: Scalar>(weights: &[T], exponents: &[T]) -> T {
    debug_assert_eq!(weights.len(), exponents.len());
    let mut max = T::neg_infinity();
    for (w, x) in weights.iter().zip(exponents) {
        if *w > T::zero() && *x > max {
            max = *x;
        }
    }
    if max == T::neg_infinity() || max == T::infinity() {
        return max;
    }
    let s: T = weights
        .iter()
        .zip(exponents)
        .filter(|(w, _)| **w > T::zero())
        .map(|(w, x)| *w * (*x - max).exp())
        .sum();
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct_sum() {
        let w = [0.25_f64, 0.75];
        let x = [1.0_f64, -2.0];
        let direct = (0.25 * 1.0_f64.exp() + 0.75 * (-2.0_f64).exp()).ln();
        assert!((log_sum_exp(&w, &x) - direct).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_ignores_zero_weight_infinities() {
        let w = [0.0_f64, 1.0];
        let x = [f64::NEG_INFINITY, 3.0];
        assert_eq!(log_sum_exp(&w, &x), 3.0);
    }

    #[test]
    fn f32_literals_round_trip() {
        assert_eq!(f32::lit(0.5), 0.5_f32);
        assert_eq!(<f32 as Scalar>::half() * f32::two(), 1.0);
    }
}
