//! Scalar abstraction: all numeric code in this crate is generic over the
//! floating point type. Training runs in `f32` (see [`crate::Real`]);
//! gradient checks instantiate the same code with `f64`.

use std::fmt;

/// Floating point scalar usable by tensors, networks and losses.
///
/// `ndarray::LinalgScalar` keeps matrix products on the fast GEMM path for
/// `f32`/`f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + ndarray::LinalgScalar
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
    fn of_f32(x: f32) -> Self;
    fn into_f32(self) -> f32;

    fn half() -> Self {
        Self::of_f64(0.5)
    }
    fn two() -> Self {
        Self::of_f64(2.0)
    }
}

impl Scalar for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
    fn of_f32(x: f32) -> Self {
        x
    }
    fn into_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn into_f64(self) -> f64 {
        self
    }
    fn of_f32(x: f32) -> Self {
        x as f64
    }
    fn into_f32(self) -> f32 {
        self as f32
    }
}
