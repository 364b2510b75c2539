//! Seeded sample generators used by the sampling-based verifications.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::symmetrize;
use crate::scalar::{Matrix, Scalar, Vector};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform point in the box `[lower, upper]`.
pub fn uniform_in_box<T: Scalar, R: Rng>(
    rng: &mut R,
    lower: &Vector<T>,
    upper: &Vector<T>,
) -> Vector<T> {
    Vector::from_iterator(
        lower.len(),
        (0..lower.len()).map(|i| {
            let s: f64 = rng.random();
            lower[i] + (upper[i] - lower[i]) * T::lit(s)
        }),
    )
}

/// Uniform point on the unit sphere in `R^n`.
pub fn unit_sphere<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|c| c / norm).collect();
        }
    }
}

/// Points `w` of the closed unit ball, the first `n_boundary` of them on the
/// sphere and the rest uniform in the interior.
pub fn unit_ball_samples(
    seed: u64,
    dim: usize,
    n_boundary: usize,
    n_interior: usize,
) -> Vec<Vec<f64>> {
    let mut rng = rng(seed);
    let mut out = Vec::with_capacity(n_boundary + n_interior);
    for _ in 0..n_boundary {
        out.push(unit_sphere(&mut rng, dim));
    }
    for _ in 0..n_interior {
        // Rejection from the enclosing cube.
        loop {
            let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
            if w.iter().map(|c| c * c).sum::<f64>() <= 1.0 {
                out.push(w);
                break;
            }
        }
    }
    out
}

/// Maps unit-ball coordinates onto the ellipsoid `{x : (x−c)ᵀP(x−c) ≤ α}`.
#[derive(Debug, Clone)]
pub struct EllipsoidMap<T: Scalar> {
    center: Vector<T>,
    /// `L^{-T}` with `P = L Lᵀ`.
    shape: Matrix<T>,
}

impl<T: Scalar> EllipsoidMap<T> {
    pub fn new(center: Vector<T>, p: &Matrix<T>) -> Option<Self> {
        let chol = symmetrize(p).cholesky()?;
        let l_inv = chol.l().try_inverse()?;
        Some(Self {
            center,
            shape: l_inv.transpose(),
        })
    }

    pub fn point(&self, w: &[f64], alpha: T) -> Vector<T> {
        let w = Vector::from_iterator(w.len(), w.iter().map(|&c| T::lit(c)));
        &self.center + &self.shape * w * alpha.sqrt()
    }
}
