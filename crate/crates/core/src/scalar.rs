use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating-point element type of a [`Tensor`](crate::Tensor): `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumCast
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; used for constants and hyper-parameters.
    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 is representable in every Scalar")
    }

    /// Widening conversion to `f64`.
    fn to_f64_lossless(self) -> f64 {
        self.to_f64().expect("Scalar always converts to f64")
    }

    /// Little-endian 32-bit encoding used by checkpoints and scene dumps.
    fn to_le_f32(self) -> [u8; 4] {
        (self.to_f64_lossless() as f32).to_le_bytes()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
