use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, Num};

/// Floating-point scalar used by the queue simulator, the Vickrey solver and
/// the distribution metrics.
pub trait Scalar: Float + FromPrimitive + Debug + Display + Send + Sync + 'static {
    /// Converts an `f64` literal. Panics only for values the type cannot hold.
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("literal representable in scalar type")
    }

    fn from_count(count: usize) -> Self {
        Self::from_usize(count).expect("count representable in scalar type")
    }
}

impl<T> Scalar for T where T: Float + FromPrimitive + Debug + Display + Send + Sync + 'static {}

/// Ordered field arithmetic, implemented by the floats and by exact rationals.
/// The linear route solvers only need this much.
pub trait Field: Num + PartialOrd + Copy + FromPrimitive + Debug {
    fn from_count(count: usize) -> Self {
        Self::from_usize(count).expect("count representable in field")
    }
}

impl<T> Field for T where T: Num + PartialOrd + Copy + FromPrimitive + Debug {}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    #[test]
    fn rational_is_a_field() {
        let third = Ratio::<i64>::new(1, 3);
        let n = <Ratio<i64> as Field>::from_count(3);
        assert_eq!(third * n, Ratio::from_integer(1));
    }

    #[test]
    fn lit_round_trips_for_f32() {
        assert_eq!(<f32 as Scalar>::lit(0.5), 0.5f32);
    }
}
