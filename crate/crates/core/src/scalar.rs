//! Scalar abstraction for the numeric kernels.
//!
//! All dense math in this crate is generic over [`Scalar`] so the same
//! kernels can run in `f32` (the engine's working precision) or `f64`
//! (useful as a high-precision cross-check in tests). The crate root
//! exports `f32`-concrete type aliases for the engine layer.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable by the tensor, rotary-encoding and model
/// kernels.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for converting an `f64` constant into the working scalar.
#[inline]
pub fn scalar<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("f64 constant representable in scalar type")
}
