//! Differentiable dense-array computation.
//!
//! [`Array`] is a flat row-major tensor of rank 1..=4. [`Tape`] records a
//! forward graph over arrays and accumulates reverse-mode gradients.
//! Everything is generic over [`Scalar`]: tests and gradient checks run in
//! `f64`, training runs in `f32`.

mod array;
mod tape;

pub use array::{dot, matmul_nn_acc, matmul_nt_acc, matmul_tn_acc, Array};
pub use tape::{NodeId, Tape};

/// Element type for arrays: `f32` for training, `f64` for verification.
pub trait Scalar:
    num_traits::Float
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Additive mask value that drives softmax weights to exactly zero.
    fn mask_neg() -> Self;
    fn from_double(v: f64) -> Self;
    fn to_double(self) -> f64;
}

impl Scalar for f32 {
    fn mask_neg() -> Self {
        -1e30
    }
    fn from_double(v: f64) -> Self {
        v as f32
    }
    fn to_double(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn mask_neg() -> Self {
        -1e30
    }
    fn from_double(v: f64) -> Self {
        v
    }
    fn to_double(self) -> f64 {
        self
    }
}
