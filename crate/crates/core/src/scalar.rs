//! Scalar abstraction for the probability and vector math.
//!
//! Co-activation estimation, activation synthesis, token fusion and the
//! popularity predictor are written against [`Scalar`] so they run in `f32`
//! (compact, large traces) or `f64` (the default used by the simulator).

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point types usable by the numeric kernels.
///
/// Implemented automatically for every type meeting the bounds, i.e. `f32`
/// and `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; values outside the range saturate.
    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    /// Conversion from a count.
    fn of_count(n: usize) -> Self {
        Self::from_usize(n).unwrap_or_else(Self::infinity)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
}

/// Cosine similarity of two equal-length vectors. Zero vectors have
/// similarity 0 with everything.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Total variation distance between two probability vectors,
/// `0.5 * sum |p - q|`.
pub fn total_variation<T: Scalar>(p: &[T], q: &[T]) -> T {
    debug_assert_eq!(p.len(), q.len());
    let half = T::of(0.5);
    half * p.iter().zip(q).map(|(&a, &b)| (a - b).abs()).sum::<T>()
}

/// Scales `v` in place so it sums to one. Leaves all-zero vectors untouched.
pub fn normalize<T: Scalar>(v: &mut [T]) {
    let s: T = v.iter().copied().sum();
    if s > T::zero() {
        for x in v.iter_mut() {
            *x = *x / s;
        }
    }
}
