//! Scalar abstraction shared by every floating-point computation in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type usable by the quantizer, the reference engine and the
/// pose metrics. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal. Never fails for the implemented types.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_int(x: i64) -> Self {
        Self::from_i64(x).expect("integer representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Round to nearest, ties to even.
    fn round_half_even(self) -> Self {
        let floor = self.floor();
        let diff = self - floor;
        let half = Self::lit(0.5);
        if diff < half {
            floor
        } else if diff > half {
            floor + Self::one()
        } else {
            let two = Self::lit(2.0);
            if (floor / two).floor() * two == floor {
                floor
            } else {
                floor + Self::one()
            }
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
