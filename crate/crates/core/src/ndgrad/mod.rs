//! Dense row-major tensors with first-order reverse-mode differentiation.
//!
//! The primitive set is deliberately small: elementwise arithmetic, a 2-D
//! matmul, channel (last-axis) concat/slice, full reductions, a flat gather
//! and a handful of pointwise nonlinearities. Shapes never broadcast; the only
//! scalar-by-tensor operation is [`PrimitiveOp::ScalarMul`], whose factor is a
//! constant attribute.
//!
//! Element storage is generic over [`Real`]. Training and serialized state use
//! `f32`; gradient checks instantiate the same code paths with `f64`.

mod backward;
mod gradcheck;
mod kernels;
mod ops;
mod tensor;

pub use backward::backward;
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use ops::{forward, PrimitiveOp, LEAKY_SLOPE};
pub use tensor::Tensor;

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Floating-point element type a [`Tensor`] can hold.
pub trait Real:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;
    /// Raw bit pattern, widened to 64 bits, for bit-exact comparisons.
    fn bits(self) -> u64;
}

macro_rules! impl_real {
    ($t:ty, $name:literal) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NAME: &'static str = $name;

            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline(always)]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline(always)]
            fn bits(self) -> u64 {
                self.to_bits() as u64
            }
        }
    };
}

impl_real!(f32, "f32");
impl_real!(f64, "f64");
