//! Scalar abstraction for the numeric core.
//!
//! Every container and algorithm in this crate is generic over a real
//! scalar type. `f64` is the intended precision for the solver path and
//! is what the crate-root aliases use; `f32` works for lightweight
//! experimentation.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable by the tensor algebra, the autodiff engine and the
/// solver. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, for literals and tolerances.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 literal must convert")
    }

    /// Lossy conversion to `f64`, for reporting and I/O.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar must convert to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
