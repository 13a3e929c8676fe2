//! Dense tensor kernels and a reverse-mode tape.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and inference and in `f64` for finite-difference checks.

pub mod gradcheck;
mod kernels;
mod stats;
mod tape;
mod tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub use kernels::{
    add, argmax, cross_entropy_nll, embedding, gelu, matmul, matmul_nt, matmul_tn, mul,
    rms_norm, scale, silu, softmax, top_k_indices, RMS_EPS,
};
pub use stats::{mean, min_max_normalize, percentile, spearman};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

/// Floating-point element type of a [`Tensor`].
pub trait Real:
    Float
    + Debug
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
