//! Scalar abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display};

use nalgebra as na;
use num_traits as nt;

/// Real floating point type the controller stack is generic over (`f32` or `f64`).
///
/// Arithmetic and elementary functions come from [`na::RealField`]; conversions
/// from literals and to `f64` (logging, JSON, CSV) come from `num-traits`.
pub trait Scalar:
    na::RealField
    + Copy
    + nt::FromPrimitive
    + nt::ToPrimitive
    + nt::FloatConst
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Machine epsilon.
    fn epsilon() -> Self;
    /// Positive infinity.
    fn infinity() -> Self;

    /// Converts an `f64` literal. Values outside the range of `Self` saturate.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as nt::FromPrimitive>::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        <Self as nt::ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        <Self as nt::FromPrimitive>::from_usize(n).expect("usize representable")
    }
}

impl Scalar for f32 {
    fn epsilon() -> Self {
        f32::EPSILON
    }
    fn infinity() -> Self {
        f32::INFINITY
    }
}

impl Scalar for f64 {
    fn epsilon() -> Self {
        f64::EPSILON
    }
    fn infinity() -> Self {
        f64::INFINITY
    }
}

pub type Vector<T> = na::DVector<T>;
pub type Matrix<T> = na::DMatrix<T>;

/// Converts an `f64` slice into a vector of `T`.
pub fn vector_from_f64<T: Scalar>(values: &[f64]) -> Vector<T> {
    Vector::from_iterator(values.len(), values.iter().map(|&v| T::lit(v)))
}

/// Converts a row-major nested `f64` array into a matrix of `T`.
///
/// Returns `None` for ragged input.
pub fn matrix_from_rows<T: Scalar>(rows: &[Vec<f64>]) -> Option<Matrix<T>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(Matrix::from_fn(nrows, ncols, |i, j| T::lit(rows[i][j])))
}

/// Row-major nested `f64` array, the JSON representation of every matrix.
pub fn matrix_to_rows<T: Scalar>(m: &Matrix<T>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)].to_f64_lossy()).collect())
        .collect()
}

pub fn vector_to_f64<T: Scalar>(v: &Vector<T>) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}
