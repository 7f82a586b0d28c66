//! Scalar abstraction shared by every numeric module.

use nalgebra::RealField;
use num_complex::Complex;
use num_traits::{FloatConst, FromPrimitive, ToPrimitive};
use rustfft::FftNum;

/// Real floating point type the pipeline can run on (`f32` or `f64`).
///
/// Generic code calls the `RealField` flavour of the elementary functions
/// (`ComplexField::abs(x)` where `Signed::abs` would be ambiguous).
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + FloatConst + FftNum + Default
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite real")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// `e^{i phase}`.
#[inline]
pub fn cis<T: Real>(phase: T) -> Complex<T> {
    Complex::new(phase.cos(), phase.sin())
}

/// Modulus of a complex number without requiring `num_traits::Float`.
#[inline]
pub fn modulus<T: Real>(z: Complex<T>) -> T {
    (z.re * z.re + z.im * z.im).sqrt()
}
