//! Numeric traits shared by the metric, estimator and strategy code.
//!
//! Metric arithmetic only needs a field with ordering, so it is written
//! against [`Scalar`] and runs unchanged on `f32`, `f64` or an exact
//! rational type. Anything involving logarithms, exponentials or square
//! roots (logistic fits, IoU on continuous boxes) requires [`Real`].

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, Num, Signed, ToPrimitive};

pub trait Scalar:
    Num + Signed + Copy + PartialOrd + FromPrimitive + ToPrimitive + Sum + Debug
{
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count is representable")
    }

    fn indicator(flag: bool) -> Self {
        if flag {
            Self::one()
        } else {
            Self::zero()
        }
    }

    /// Whether the value lies in the closed unit interval.
    fn is_probability(&self) -> bool {
        *self >= Self::zero() && *self <= Self::one()
    }
}

impl<T> Scalar for T where
    T: Num + Signed + Copy + PartialOrd + FromPrimitive + ToPrimitive + Sum + Debug
{
}

pub trait Real: Scalar + Float {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal is representable")
    }

    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }
}

impl<T> Real for T where T: Scalar + Float {}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    #[test]
    fn rationals_are_scalars() {
        fn half<T: Scalar>() -> T {
            T::one() / T::from_count(2)
        }
        assert_eq!(half::<Ratio<i64>>(), Ratio::new(1, 2));
        assert_eq!(half::<f32>(), 0.5);
        assert!(Ratio::new(3, 4).is_probability());
        assert!(!Ratio::new(5, 4).is_probability());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(Real::sigmoid(0.0_f64), 0.5);
        assert!(Real::sigmoid(-800.0_f64) >= 0.0);
        assert_eq!(Real::sigmoid(800.0_f64), 1.0);
        assert!((Real::sigmoid(2.0_f32) - 0.880_797).abs() < 1e-5);
    }
}
