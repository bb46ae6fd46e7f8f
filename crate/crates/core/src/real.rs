//! Scalar element types for tensors.

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssign};

/// Floating-point element type: `f32` for models, `f64` for oracles.
pub trait Real: Float + NumAssign + Default + Debug + Display + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
