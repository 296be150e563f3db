//! Scalar abstraction for the numeric substrate.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar the tensor machinery is generic over.
///
/// Implementations exist for `f32` and `f64`. The conversion helpers panic on
/// unrepresentable values, which cannot happen for the literal constants they
/// are used with.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("value not representable")
    }

    fn of_usize(x: usize) -> Self {
        <Self as num_traits::FromPrimitive>::from_usize(x).expect("value not representable")
    }

    fn real(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("value not convertible")
    }

    /// One draw from the standard normal distribution.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One draw from the uniform distribution on `[0, 1)`.
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f64>()
    }
}

impl Scalar for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f32>()
    }
}
