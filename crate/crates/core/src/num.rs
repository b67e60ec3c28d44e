//! Scalar traits shared by the numeric parts of the pipeline.
//!
//! Vector math (TF-IDF weights, k-means) is written against [`Real`] so it runs
//! in `f32` or `f64`. N-gram probabilities are ratios of integer counts and are
//! produced through [`Probability`], which also admits exact rationals.

use std::fmt::Debug;
use std::iter::Sum;

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, One, ToPrimitive, Zero};

/// Floating point scalar usable for embeddings and clustering.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Default + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A probability built from a count ratio.
///
/// `from_counts(0, d)` must be zero and `from_counts(n, n)` one.
pub trait Probability: Clone + PartialEq + Debug + Zero + One + std::ops::Mul<Output = Self> {
    fn from_counts(numerator: u64, denominator: u64) -> Self;

    fn to_float(&self) -> f64;
}

impl Probability for f64 {
    fn from_counts(numerator: u64, denominator: u64) -> Self {
        numerator as f64 / denominator as f64
    }

    fn to_float(&self) -> f64 {
        *self
    }
}

impl Probability for f32 {
    fn from_counts(numerator: u64, denominator: u64) -> Self {
        (numerator as f64 / denominator as f64) as f32
    }

    fn to_float(&self) -> f64 {
        f64::from(*self)
    }
}

impl Probability for Ratio<u64> {
    fn from_counts(numerator: u64, denominator: u64) -> Self {
        Ratio::new(numerator, denominator)
    }

    fn to_float(&self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}
