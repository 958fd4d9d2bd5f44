//! Scalar abstraction: every numeric kernel in the crate is generic over
//! `Scalar` so the same code runs in f32 for training and f64 for
//! finite-difference verification and physics.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Copy + Default + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    /// Lossy conversion from f64 (the working precision of oracles and RNG).
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 convertible to scalar")
    }

    /// Widen to f64 for reductions that the spec requires in 64-bit.
    fn wide(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
