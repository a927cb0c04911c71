//! Floating-point scalar abstraction shared by every numeric routine.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};

use std::ops::{AddAssign, MulAssign, SubAssign};

/// Real scalar the tensors, tape and models are generic over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// Lossless-where-possible conversion from `f64`.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
