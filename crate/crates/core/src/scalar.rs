//! Floating-point abstraction shared by the numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive};

/// Real scalar used by the generic kernels. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
    /// Converts an `f64` literal; every literal used in this crate is representable.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    /// Smallest tail bound a truncated series can meaningfully reach at this precision.
    fn series_floor() -> Self {
        Self::epsilon() * Self::lit(4.0)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
