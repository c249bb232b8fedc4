//! Scalar element abstraction over the two supported precisions.
//!
//! Training runs in `f32`; gradient checks and numeric oracles run the same
//! code paths in `f64`.

use std::fmt::{Debug, Display};

/// Floating-point element of a [`crate::tensor::Tape`].
pub trait Element:
    num_traits::Float + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Gauss error function, used by the exact (erf-form) GeLU.
    fn erf(self) -> Self;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}
