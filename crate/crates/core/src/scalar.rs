//! Scalar abstraction shared by every numeric kernel.
//!
//! Training runs in `f32`; finite-difference gradient checks run the same code
//! paths in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal, panicking only for values the type cannot
    /// represent at all (never the case for `f32`/`f64`).
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("scalar literal out of range")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Little-endian bytes of the value narrowed to `f32`, the archive dtype.
    fn to_f32_le(self) -> [u8; 4] {
        self.to_f32().unwrap_or(f32::NAN).to_le_bytes()
    }

    fn of_f32(v: f32) -> Self {
        Self::lit(v as f64)
    }
}

impl Scalar for f32 {
    fn of_f32(v: f32) -> Self {
        v
    }
}

impl Scalar for f64 {}
