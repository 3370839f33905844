//! Floating-point scalar abstraction shared by the tensor engine and the color math.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Real scalar usable throughout the crate: `f32` for training and inference,
/// `f64` for gradient checks and reference computations.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Bit width of the type, recorded in diagnostics.
    const BITS: u32;

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }
}

impl Real for f32 {
    const BITS: u32 = 32;

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    const BITS: u32 = 64;

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Converts a fixed-size triple between scalar types.
pub fn cast3<A: Real, B: Real>(v: [A; 3]) -> [B; 3] {
    [B::lit(v[0].as_f64()), B::lit(v[1].as_f64()), B::lit(v[2].as_f64())]
}
