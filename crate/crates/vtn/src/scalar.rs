//! Floating-point abstraction for the numeric core.
//!
//! Core math (autodiff, DSP, evaluation) is written against [`Scalar`] so it
//! instantiates at `f32` or `f64`. Learnable computation and all file formats
//! use the `f64` aliases exported from the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, NumAssignOps};

pub trait Scalar:
    Float + FloatConst + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shorthand for converting an `f64` literal into the working scalar type.
pub fn sc<S: Scalar>(x: f64) -> S {
    S::of(x)
}
