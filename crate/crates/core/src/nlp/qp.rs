//! Dense strictly convex QP:
//!
//! ```text
//! min ½ xᵀ H x + gᵀ x   s.t.  E x = e,  G x ≤ h
//! ```
//!
//! Goldfarb–Idnani dual active-set method. The projected direction and the dual
//! direction are recomputed from the active normals at every iteration instead
//! of being updated with rotations; the problems solved here have a few dozen
//! variables at most.

use crate::scalar::{Matrix, Scalar, Vector};

#[derive(Debug, Clone)]
pub struct DenseQp<T: Scalar> {
    /// Symmetric positive definite.
    pub hessian: Matrix<T>,
    pub gradient: Vector<T>,
    pub eq: Matrix<T>,
    pub eq_rhs: Vector<T>,
    pub ineq: Matrix<T>,
    pub ineq_rhs: Vector<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    /// The Hessian is not positive definite.
    NotConvex,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct QpSolution<T: Scalar> {
    pub x: Vector<T>,
    pub status: QpStatus,
    /// Multipliers for `E x − e` in `L = f + λᵀ(Ex − e) + μᵀ(Gx − h)`.
    pub eq_multipliers: Vector<T>,
    /// Nonnegative multipliers for `G x − h`.
    pub ineq_multipliers: Vector<T>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
struct Active {
    /// Row in the combined constraint list (equalities first).
    index: usize,
    /// `+1` or `−1`: the normal used for this constraint is `sign · row`.
    sign: i8,
    multiplier_is_free: bool,
}

impl<T: Scalar> DenseQp<T> {
    pub fn n_vars(&self) -> usize {
        self.gradient.len()
    }

    pub fn objective(&self, x: &Vector<T>) -> T {
        (x.transpose() * &self.hessian * x)[(0, 0)] * T::lit(0.5) + self.gradient.dot(x)
    }

    pub fn solve(&self) -> QpSolution<T> {
        let n = self.n_vars();
        let n_eq = self.eq.nrows();
        let n_in = self.ineq.nrows();
        let fail = |status| QpSolution {
            x: Vector::zeros(n),
            status,
            eq_multipliers: Vector::zeros(n_eq),
            ineq_multipliers: Vector::zeros(n_in),
            iterations: 0,
        };
        let Some(chol) = self.hessian.clone().cholesky() else {
            return fail(QpStatus::NotConvex);
        };
        let h_inv = chol.inverse();

        // Constraint i reads  nᵢᵀ x ≥ bᵢ  with the stored sign applied.
        let normal = |i: usize| -> Vector<T> {
            if i < n_eq {
                self.eq.row(i).transpose()
            } else {
                -self.ineq.row(i - n_eq).transpose()
            }
        };
        let bound = |i: usize| -> T {
            if i < n_eq {
                self.eq_rhs[i]
            } else {
                -self.ineq_rhs[i - n_eq]
            }
        };
        let row_scale = |i: usize| -> T { normal(i).norm().max(T::one()) };

        let mut x = -(&h_inv * &self.gradient);
        let mut active: Vec<Active> = Vec::new();
        let mut mult: Vec<T> = Vec::new();
        let feas_tol = T::lit(1e-12);
        let max_iter = 20 * (n + n_eq + n_in) + 100;
        let mut iterations = 0;

        // Equalities are added first and never dropped; inequalities are added in
        // order of largest violation.
        let mut pending_eq = 0usize;
        loop {
            let candidate = if pending_eq < n_eq {
                let i = pending_eq;
                pending_eq += 1;
                let s = normal(i).dot(&x) - bound(i);
                let sign: i8 = if s > T::zero() { -1 } else { 1 };
                Some((i, sign, true))
            } else {
                let mut worst: Option<(usize, T)> = None;
                for i in n_eq..n_eq + n_in {
                    if active.iter().any(|a| a.index == i) {
                        continue;
                    }
                    let s = (normal(i).dot(&x) - bound(i)) / row_scale(i);
                    if s < -feas_tol && worst.is_none_or(|(_, w)| s < w) {
                        worst = Some((i, s));
                    }
                }
                worst.map(|(i, _)| (i, 1, false))
            };
            let Some((p, p_sign, p_free)) = candidate else {
                break;
            };
            let sgn = |s: i8| if s > 0 { T::one() } else { -T::one() };
            let n_p = normal(p) * sgn(p_sign);
            let b_p = bound(p) * sgn(p_sign);
            let mut u_p = T::zero();

            loop {
                iterations += 1;
                if iterations > max_iter {
                    return QpSolution {
                        x,
                        status: QpStatus::IterationLimit,
                        eq_multipliers: Vector::zeros(n_eq),
                        ineq_multipliers: Vector::zeros(n_in),
                        iterations,
                    };
                }
                let q = active.len();
                let hn = &h_inv * &n_p;
                let (z, r) = if q == 0 {
                    (hn.clone(), Vector::zeros(0))
                } else {
                    let mut nmat = Matrix::zeros(n, q);
                    for (c, a) in active.iter().enumerate() {
                        nmat.set_column(c, &(normal(a.index) * sgn(a.sign)));
                    }
                    let h_n = &h_inv * &nmat;
                    let gram = nmat.transpose() * &h_n;
                    let Some(r) = gram.lu().solve(&(nmat.transpose() * &hn)) else {
                        return fail(QpStatus::Infeasible);
                    };
                    (hn.clone() - &h_n * &r, r)
                };

                // Partial step: largest dual step keeping active inequality
                // multipliers nonnegative.
                let mut t1: Option<(T, usize)> = None;
                for (j, a) in active.iter().enumerate() {
                    if a.multiplier_is_free || r[j] <= T::zero() {
                        continue;
                    }
                    let ratio = mult[j] / r[j];
                    if t1.is_none_or(|(t, _)| ratio < t) {
                        t1 = Some((ratio, j));
                    }
                }
                let curvature = z.dot(&n_p);
                let s_p = n_p.dot(&x) - b_p;
                let t2 = if curvature > T::lit(1e-13) * n_p.dot(&hn).max(T::epsilon()) {
                    Some(-s_p / curvature)
                } else {
                    None
                };

                match (t1, t2) {
                    (None, None) => {
                        if p_free {
                            // Dependent equality: consistent iff already satisfied.
                            if s_p.abs() <= feas_tol * row_scale(p) {
                                break;
                            }
                        }
                        return QpSolution {
                            x,
                            status: QpStatus::Infeasible,
                            eq_multipliers: Vector::zeros(n_eq),
                            ineq_multipliers: Vector::zeros(n_in),
                            iterations,
                        };
                    }
                    (Some((t, k)), None) => {
                        for j in 0..active.len() {
                            mult[j] -= t * r[j];
                        }
                        u_p += t;
                        active.remove(k);
                        mult.remove(k);
                    }
                    (t1, Some(t_full)) => {
                        let (t, drop) = match t1 {
                            Some((t_part, k)) if t_part < t_full => (t_part, Some(k)),
                            _ => (t_full, None),
                        };
                        x += &z * t;
                        for j in 0..active.len() {
                            mult[j] -= t * r[j];
                        }
                        u_p += t;
                        match drop {
                            None => {
                                active.push(Active {
                                    index: p,
                                    sign: p_sign,
                                    multiplier_is_free: p_free,
                                });
                                mult.push(u_p);
                                break;
                            }
                            Some(k) => {
                                active.remove(k);
                                mult.remove(k);
                            }
                        }
                    }
                }
            }
        }

        let mut eq_multipliers = Vector::zeros(n_eq);
        let mut ineq_multipliers = Vector::zeros(n_in);
        for (a, &u) in active.iter().zip(&mult) {
            if a.index < n_eq {
                // nᵀx ≥ b with n = sign·E_i contributes −u·sign·E_i to ∇L.
                let s = if a.sign > 0 { T::one() } else { -T::one() };
                eq_multipliers[a.index] = -u * s;
            } else {
                ineq_multipliers[a.index - n_eq] = u.max(T::zero());
            }
        }
        QpSolution {
            x,
            status: QpStatus::Optimal,
            eq_multipliers,
            ineq_multipliers,
            iterations,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn qp(h: &[f64], g: &[f64], eq: (&[f64], &[f64]), ineq: (&[f64], &[f64])) -> DenseQp<f64> {
        let n = g.len();
        DenseQp {
            hessian: Matrix::from_row_slice(n, n, h),
            gradient: Vector::from_column_slice(g),
            eq: Matrix::from_row_slice(eq.1.len(), n, eq.0),
            eq_rhs: Vector::from_column_slice(eq.1),
            ineq: Matrix::from_row_slice(ineq.1.len(), n, ineq.0),
            ineq_rhs: Vector::from_column_slice(ineq.1),
        }
    }

    #[test]
    fn unconstrained_minimizer() {
        let sol = qp(&[2.0, 0.0, 0.0, 4.0], &[-2.0, -4.0], (&[], &[]), (&[], &[])).solve();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.x[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn projection_onto_halfspace() {
        // min ½‖x‖² s.t. x₀ ≥ 1 → x = (1, 0), μ = 1.
        let sol = qp(
            &[1.0, 0.0, 0.0, 1.0],
            &[0.0, 0.0],
            (&[], &[]),
            (&[-1.0, 0.0], &[-1.0]),
        )
        .solve();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.x[1], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.ineq_multipliers[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn equality_constrained_matches_kkt_solve() {
        // min ½(x² + 2y² + 3z²) − x s.t. x + y + z = 1, x − z = 0.
        let h = [1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0];
        let g = [-1.0, 0.0, 0.0];
        let e = [1.0, 1.0, 1.0, 1.0, 0.0, -1.0];
        let sol = qp(&h, &g, (&e, &[1.0, 0.0]), (&[], &[])).solve();
        assert_eq!(sol.status, QpStatus::Optimal);
        let kkt = Matrix::from_row_slice(
            5,
            5,
            &[
                1.0, 0.0, 0.0, 1.0, 1.0, //
                0.0, 2.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 3.0, 1.0, -1.0, //
                1.0, 1.0, 1.0, 0.0, 0.0, //
                1.0, 0.0, -1.0, 0.0, 0.0,
            ],
        );
        let rhs = Vector::from_column_slice(&[1.0, 0.0, 0.0, 1.0, 0.0]);
        let oracle = kkt.lu().solve(&rhs).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(sol.x[i], oracle[i], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(sol.eq_multipliers[0], oracle[3], epsilon = 1e-12);
        assert_abs_diff_eq!(sol.eq_multipliers[1], oracle[4], epsilon = 1e-12);
    }

    #[test]
    fn detects_infeasibility() {
        let sol = qp(
            &[1.0],
            &[0.0],
            (&[], &[]),
            (&[1.0, -1.0], &[0.0, -1.0]), // x ≤ 0 and x ≥ 1
        )
        .solve();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn rejects_indefinite_hessian() {
        let sol = qp(&[1.0, 0.0, 0.0, -1.0], &[0.0, 0.0], (&[], &[]), (&[], &[])).solve();
        assert_eq!(sol.status, QpStatus::NotConvex);
    }

    #[test]
    fn redundant_equalities_are_tolerated() {
        let sol = qp(
            &[1.0, 0.0, 0.0, 1.0],
            &[0.0, 0.0],
            (&[1.0, 1.0, 2.0, 2.0], &[1.0, 2.0]),
            (&[], &[]),
        )
        .solve();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 0.5, epsilon = 1e-12);
    }

    proptest! {
        // KKT conditions hold for random box-constrained strictly convex QPs.
        #[test]
        fn kkt_holds_on_random_box_qps(
            diag in proptest::collection::vec(0.1f64..5.0, 3),
            off in -0.3f64..0.3,
            g in proptest::collection::vec(-5.0f64..5.0, 3),
            row in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            let mut h = Matrix::from_diagonal(&Vector::from_column_slice(&diag));
            h[(0, 1)] = off * 0.1;
            h[(1, 0)] = off * 0.1;
            let mut ineq = Matrix::zeros(7, 3);
            let mut rhs = Vector::zeros(7);
            for i in 0..3 {
                ineq[(i, i)] = 1.0;
                rhs[i] = 1.0;
                ineq[(3 + i, i)] = -1.0;
                rhs[3 + i] = 1.0;
                ineq[(6, i)] = row[i];
            }
            rhs[6] = 0.5;
            let problem = DenseQp {
                hessian: h.clone(),
                gradient: Vector::from_column_slice(&g),
                eq: Matrix::zeros(0, 3),
                eq_rhs: Vector::zeros(0),
                ineq: ineq.clone(),
                ineq_rhs: rhs.clone(),
            };
            let sol = problem.solve();
            prop_assert_eq!(sol.status, QpStatus::Optimal);
            let slack = &ineq * &sol.x - &rhs;
            prop_assert!(slack.max() <= 1e-10);
            let stationarity = &h * &sol.x + Vector::from_column_slice(&g) + ineq.transpose() * &sol.ineq_multipliers;
            prop_assert!(stationarity.amax() <= 1e-9);
            for i in 0..7 {
                prop_assert!(sol.ineq_multipliers[i] >= 0.0);
                prop_assert!((sol.ineq_multipliers[i] * slack[i]).abs() <= 1e-9);
            }
        }
    }
}
