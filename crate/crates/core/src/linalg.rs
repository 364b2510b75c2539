//! Small dense linear-algebra helpers not provided directly by nalgebra.

use crate::error::{Error, Result};
use crate::scalar::{Matrix, Scalar};

/// True iff `m` is square, symmetric to `1e-9` relative, and admits a Cholesky factor.
pub fn is_symmetric_positive_definite<T: Scalar>(m: &Matrix<T>) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(T::one());
    let tol = T::lit(1e-9) * scale;
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    m.clone().cholesky().is_some()
}

pub fn symmetrize<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

/// Spectral radius from the real Schur form.
pub fn spectral_radius<T: Scalar>(a: &Matrix<T>) -> T {
    eigenvalue_moduli(a)
        .into_iter()
        .fold(T::zero(), |acc, v| acc.max(v))
}

pub fn eigenvalue_moduli<T: Scalar>(a: &Matrix<T>) -> Vec<T> {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|c| (c.re * c.re + c.im * c.im).sqrt())
        .collect()
}

/// Solves `Aᵀ P A − P = −W` for `P` through the Kronecker form.
///
/// Only meant for the handful of states this crate deals with: the linear system
/// has `n²` unknowns.
pub fn solve_discrete_lyapunov<T: Scalar>(a: &Matrix<T>, w: &Matrix<T>) -> Result<Matrix<T>> {
    let n = a.nrows();
    if !a.is_square() || w.shape() != (n, n) {
        return Err(Error::usage(
            "discrete Lyapunov equation needs square A and W of equal size",
        ));
    }
    let at = a.transpose();
    let lhs = at.kronecker(&at) - Matrix::<T>::identity(n * n, n * n);
    let rhs = -Matrix::from_column_slice(n * n, 1, w.as_slice());
    let vec_p = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Synthesis("discrete Lyapunov equation is singular".into()))?;
    let p = Matrix::from_column_slice(n, n, vec_p.as_slice());
    Ok(symmetrize(&p))
}

/// Stabilizing state-feedback gain for `x⁺ = A x + B u` minimizing `Σ xᵀQx + uᵀRu`,
/// returned with the sign convention `u = K x` (so `K = −(R + BᵀPB)⁻¹ BᵀPA`).
pub fn lqr_gain<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    q: &Matrix<T>,
    r: &Matrix<T>,
) -> Result<Matrix<T>> {
    let mut p = q.clone();
    let tol = T::lit(1e-12);
    for _ in 0..10_000 {
        let btp = b.transpose() * &p;
        let gram = r + &btp * b;
        let gain = gram
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Synthesis("R + BᵀPB lost positive definiteness".into()))?
            .solve(&(&btp * a));
        let next = symmetrize(&(q + a.transpose() * &p * a - a.transpose() * &p * b * &gain));
        let change = (&next - &p).amax();
        p = next;
        if change <= tol * p.amax().max(T::one()) {
            let btp = b.transpose() * &p;
            let gain = (r + &btp * b)
                .cholesky()
                .ok_or_else(|| Error::Synthesis("R + BᵀPB lost positive definiteness".into()))?
                .solve(&(&btp * a));
            return Ok(-gain);
        }
    }
    Err(Error::Synthesis(
        "Riccati iteration did not converge".into(),
    ))
}
