//! Dense SQP: damped-BFGS Hessian, Goldfarb–Idnani QP subproblems, elastic
//! mode for inconsistent linearizations, backtracking on the l1 exact penalty.

use serde::{Deserialize, Serialize};

use super::qp::{DenseQp, QpStatus};
use crate::error::{Error, Result};
use crate::scalar::{Matrix, Scalar, Vector};

/// Values and first derivatives of an NLP at one point.
#[derive(Debug, Clone)]
pub struct NlpEvaluation<T: Scalar> {
    pub objective: T,
    pub gradient: Vector<T>,
    /// `c_eq(z) = 0`.
    pub eq: Vector<T>,
    pub eq_jacobian: Matrix<T>,
    /// `c_in(z) ≤ 0`.
    pub ineq: Vector<T>,
    pub ineq_jacobian: Matrix<T>,
}

impl<T: Scalar> NlpEvaluation<T> {
    fn is_finite(&self) -> bool {
        self.objective.is_finite()
            && self.gradient.iter().all(|v| v.is_finite())
            && self.eq.iter().all(|v| v.is_finite())
            && self.ineq.iter().all(|v| v.is_finite())
            && self.eq_jacobian.iter().all(|v| v.is_finite())
            && self.ineq_jacobian.iter().all(|v| v.is_finite())
    }
}

/// Objective and constraint callbacks of a smooth NLP
/// `min f(z) s.t. c_eq(z) = 0, c_in(z) ≤ 0, lower ≤ z ≤ upper`.
pub trait NlpProblem<T: Scalar>: Send + Sync {
    fn n_vars(&self) -> usize;
    fn n_eq(&self) -> usize;
    fn n_ineq(&self) -> usize;

    /// `(f, c_eq, c_in)` without derivatives.
    fn values(&self, z: &Vector<T>) -> (T, Vector<T>, Vector<T>);

    /// Values and analytic derivatives. Defaults to forward differences of
    /// [`NlpProblem::values`].
    fn evaluate(&self, z: &Vector<T>) -> NlpEvaluation<T> {
        forward_difference_evaluation(self, z)
    }
}

pub(crate) fn forward_difference_evaluation<T: Scalar, P: NlpProblem<T> + ?Sized>(
    problem: &P,
    z: &Vector<T>,
) -> NlpEvaluation<T> {
    let n = z.len();
    let (f0, e0, i0) = problem.values(z);
    let mut gradient = Vector::zeros(n);
    let mut eq_jacobian = Matrix::zeros(e0.len(), n);
    let mut ineq_jacobian = Matrix::zeros(i0.len(), n);
    let sqrt_eps = T::epsilon().sqrt();
    for j in 0..n {
        let h = sqrt_eps * z[j].abs().max(T::one());
        let mut zp = z.clone();
        zp[j] += h;
        let (f, e, i) = problem.values(&zp);
        gradient[j] = (f - f0) / h;
        eq_jacobian.set_column(j, &((e - &e0) / h));
        ineq_jacobian.set_column(j, &((i - &i0) / h));
    }
    NlpEvaluation {
        objective: f0,
        gradient,
        eq: e0,
        eq_jacobian,
        ineq: i0,
        ineq_jacobian,
    }
}

/// A problem together with its variable bounds and starting point.
pub struct NlpSpec<'a, T: Scalar> {
    pub problem: Box<dyn NlpProblem<T> + 'a>,
    pub lower: Vector<T>,
    pub upper: Vector<T>,
    pub initial_point: Vector<T>,
}

impl<'a, T: Scalar> NlpSpec<'a, T> {
    pub fn new(
        problem: impl NlpProblem<T> + 'a,
        lower: Vector<T>,
        upper: Vector<T>,
        initial_point: Vector<T>,
    ) -> Result<Self> {
        let n = problem.n_vars();
        for (what, len) in [
            ("lower bounds", lower.len()),
            ("upper bounds", upper.len()),
            ("initial point", initial_point.len()),
        ] {
            if len != n {
                return Err(Error::Dimension {
                    context: what,
                    expected: n,
                    actual: len,
                });
            }
        }
        if (0..n).any(|i| lower[i] > upper[i]) {
            return Err(Error::usage("variable bounds must satisfy lower ≤ upper"));
        }
        Ok(Self {
            problem: Box::new(problem),
            lower,
            upper,
            initial_point,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.problem.n_vars()
    }

    /// Largest violation of any constraint or bound at `z`.
    pub fn max_violation(&self, z: &Vector<T>) -> T {
        let (_, eq, ineq) = self.problem.values(z);
        violation_of(&eq, &ineq).max(self.bound_violation(z))
    }

    fn bound_violation(&self, z: &Vector<T>) -> T {
        (0..z.len()).fold(T::zero(), |acc, i| {
            acc.max(self.lower[i] - z[i]).max(z[i] - self.upper[i])
        })
    }

    fn clamp(&self, z: &Vector<T>) -> Vector<T> {
        Vector::from_iterator(
            z.len(),
            (0..z.len()).map(|i| z[i].max(self.lower[i]).min(self.upper[i])),
        )
    }
}

fn violation_of<T: Scalar>(eq: &Vector<T>, ineq: &Vector<T>) -> T {
    let e = eq.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    ineq.iter().fold(e, |a, &v| a.max(v))
}

fn l1_violation<T: Scalar>(eq: &Vector<T>, ineq: &Vector<T>) -> T {
    eq.iter().fold(T::zero(), |a, v| a + v.abs())
        + ineq.iter().fold(T::zero(), |a, &v| a + v.max(T::zero()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiffMode {
    /// Derivatives supplied by the problem.
    Analytic,
    /// Forward differences of the problem values.
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub feas_tol: f64,
    pub opt_tol: f64,
    pub max_iter: usize,
    pub diff_mode: DiffMode,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-8,
            opt_tol: 1e-6,
            max_iter: 200,
            diff_mode: DiffMode::Analytic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NlpStatus {
    /// Feasible within `feas_tol` and first-order stationary within `opt_tol`.
    Optimal,
    /// Stopped early (line search stalled) at a feasible point.
    FeasibleSuboptimal,
    /// No iterate satisfied the constraints.
    Infeasible,
    /// Iteration cap reached; the best feasible iterate is returned.
    IterationLimit,
}

impl NlpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            NlpStatus::Optimal => "optimal",
            NlpStatus::FeasibleSuboptimal => "feasible-suboptimal",
            NlpStatus::Infeasible => "infeasible",
            NlpStatus::IterationLimit => "iteration-limit",
        }
    }
}

#[derive(Debug, Clone)]
pub struct NlpResult<T: Scalar> {
    pub solution: Vector<T>,
    pub objective: T,
    pub max_violation: T,
    pub status: NlpStatus,
    pub iterations: usize,
    /// Scaled Lagrangian-gradient norm at the returned point.
    pub stationarity: T,
}

impl<T: Scalar> NlpResult<T> {
    pub fn is_feasible(&self, feas_tol: T) -> bool {
        self.status != NlpStatus::Infeasible && self.max_violation <= feas_tol
    }
}

struct Iterate<T: Scalar> {
    z: Vector<T>,
    eval: NlpEvaluation<T>,
}

fn evaluate<T: Scalar>(
    spec: &NlpSpec<'_, T>,
    opts: &SolverOptions,
    z: &Vector<T>,
) -> NlpEvaluation<T> {
    match opts.diff_mode {
        DiffMode::Analytic => spec.problem.evaluate(z),
        DiffMode::FiniteDifference => forward_difference_evaluation(spec.problem.as_ref(), z),
    }
}

/// Solves `spec` from its initial point (projected into the bounds).
pub fn solve<T: Scalar>(spec: &NlpSpec<'_, T>, opts: &SolverOptions) -> Result<NlpResult<T>> {
    let n = spec.n_vars();
    let feas_tol = T::lit(opts.feas_tol);
    let opt_tol = T::lit(opts.opt_tol);
    let half = T::lit(0.5);

    let z0 = spec.clamp(&spec.initial_point);
    let eval0 = evaluate(spec, opts, &z0);
    if !eval0.is_finite() {
        return Err(Error::NonFinite { iteration: 0 });
    }
    let mut cur = Iterate { z: z0, eval: eval0 };
    let mut hessian = Matrix::<T>::identity(n, n);
    let mut penalty = T::one();
    let mut best: Option<(Vector<T>, T)> = None;
    let mut fresh_hessian = true;

    let note_feasible = |best: &mut Option<(Vector<T>, T)>, it: &Iterate<T>| {
        let viol = violation_of(&it.eval.eq, &it.eval.ineq);
        if viol <= feas_tol && best.as_ref().is_none_or(|(_, f)| it.eval.objective < *f) {
            *best = Some((it.z.clone(), it.eval.objective));
        }
    };
    note_feasible(&mut best, &cur);

    let finish =
        |z: Vector<T>, status: NlpStatus, iterations: usize, stationarity: T| -> NlpResult<T> {
            let (objective, eq, ineq) = spec.problem.values(&z);
            let max_violation = violation_of(&eq, &ineq).max(spec.bound_violation(&z));
            NlpResult {
                solution: z,
                objective,
                max_violation,
                status,
                iterations,
                stationarity,
            }
        };

    let mut last_stationarity = T::infinity();
    let mut iterations = 0;
    let mut stalled = false;
    for iter in 1..=opts.max_iter {
        iterations = iter;
        let ev = &cur.eval;
        let viol = violation_of(&ev.eq, &ev.ineq);

        let Some(step) = solve_subproblem(spec, &cur, &hessian, penalty) else {
            stalled = true;
            break;
        };

        // First-order optimality at the current point with the QP multipliers.
        let grad_lagrangian =
            lagrangian_gradient(ev, &step.eq_mult, &step.ineq_mult) + &step.bound_mult;
        let grad_scale = ev.gradient.amax().max(T::one());
        let stationarity = grad_lagrangian.amax() / grad_scale;
        let complementarity = (0..ev.ineq.len()).fold(T::zero(), |acc, i| {
            acc.max((step.ineq_mult[i] * ev.ineq[i]).abs())
        }) / grad_scale;
        last_stationarity = stationarity;
        if !step.elastic
            && viol <= feas_tol
            && stationarity <= opt_tol
            && complementarity <= opt_tol
        {
            let result = finish(cur.z.clone(), NlpStatus::Optimal, iter - 1, stationarity);
            assert!(
                result.max_violation <= feas_tol,
                "optimal status with violation"
            );
            return Ok(result);
        }

        let mult_max = step
            .eq_mult
            .iter()
            .chain(step.ineq_mult.iter())
            .fold(T::zero(), |a, v| a.max(v.abs()));
        if mult_max * T::lit(1.5) > penalty {
            penalty = mult_max * T::lit(2.0) + T::lit(1e-3);
        }

        let l1 = l1_violation(&ev.eq, &ev.ineq);
        let merit = ev.objective + penalty * l1;
        let predicted_l1 = l1_violation(
            &(&ev.eq + &ev.eq_jacobian * &step.d),
            &(&ev.ineq + &ev.ineq_jacobian * &step.d),
        );
        let slope = ev.gradient.dot(&step.d) - penalty * (l1 - predicted_l1);

        let mut alpha = T::one();
        let mut accepted: Option<Iterate<T>> = None;
        for _ in 0..40 {
            let trial_z = spec.clamp(&(&cur.z + &step.d * alpha));
            let trial = evaluate(spec, opts, &trial_z);
            if !trial.is_finite() {
                return Err(Error::NonFinite { iteration: iter });
            }
            let trial_merit = trial.objective + penalty * l1_violation(&trial.eq, &trial.ineq);
            let tol = T::lit(1e-12) * merit.abs().max(T::one());
            if trial_merit <= merit + T::lit(1e-4) * alpha * slope.min(T::zero()) + tol {
                accepted = Some(Iterate {
                    z: trial_z,
                    eval: trial,
                });
                break;
            }
            alpha *= half;
        }

        let Some(next) = accepted else {
            if fresh_hessian {
                stalled = true;
                break;
            }
            hessian = Matrix::identity(n, n);
            fresh_hessian = true;
            continue;
        };

        // Damped BFGS on the Lagrangian with the new multipliers.
        let s = &next.z - &cur.z;
        let y = lagrangian_gradient(&next.eval, &step.eq_mult, &step.ineq_mult)
            - lagrangian_gradient(&cur.eval, &step.eq_mult, &step.ineq_mult);
        let hs = &hessian * &s;
        let shs = s.dot(&hs);
        if shs > T::lit(1e-20) * s.norm_squared().max(T::lit(1e-300)) && s.amax() > T::zero() {
            let sy = s.dot(&y);
            let y = if sy >= T::lit(0.2) * shs {
                y
            } else {
                let theta = T::lit(0.8) * shs / (shs - sy);
                &y * theta + &hs * (T::one() - theta)
            };
            let sy = s.dot(&y);
            hessian += &y * y.transpose() / sy - &hs * hs.transpose() / shs;
            hessian = crate::linalg::symmetrize(&hessian);
            fresh_hessian = false;
        }

        let step_size = s.amax();
        cur = next;
        note_feasible(&mut best, &cur);

        if step_size <= T::lit(1e-15) * cur.z.amax().max(T::one()) {
            stalled = true;
            break;
        }
    }

    // Stalled or out of iterations: fall back to the best feasible iterate.
    match best {
        Some((z, _)) => {
            let status = if stalled {
                NlpStatus::FeasibleSuboptimal
            } else {
                NlpStatus::IterationLimit
            };
            Ok(finish(z, status, iterations, last_stationarity))
        }
        None => Ok(finish(
            cur.z,
            NlpStatus::Infeasible,
            iterations,
            last_stationarity,
        )),
    }
}

fn lagrangian_gradient<T: Scalar>(
    ev: &NlpEvaluation<T>,
    eq_mult: &Vector<T>,
    ineq_mult: &Vector<T>,
) -> Vector<T> {
    &ev.gradient + ev.eq_jacobian.transpose() * eq_mult + ev.ineq_jacobian.transpose() * ineq_mult
}

struct Step<T: Scalar> {
    d: Vector<T>,
    eq_mult: Vector<T>,
    ineq_mult: Vector<T>,
    /// Multipliers of the variable bounds folded into one vector (`ν_up − ν_low`).
    bound_mult: Vector<T>,
    elastic: bool,
}

/// Solves the QP subproblem, switching to the elastic formulation when the
/// linearized constraints are inconsistent.
fn solve_subproblem<T: Scalar>(
    spec: &NlpSpec<'_, T>,
    cur: &Iterate<T>,
    hessian: &Matrix<T>,
    penalty: T,
) -> Option<Step<T>> {
    let n = cur.z.len();
    let ev = &cur.eval;
    let m_in = ev.ineq.len();

    // Finite bounds as rows  ±d_i ≤ …
    let mut bound_rows: Vec<(usize, T, T)> = Vec::new();
    for i in 0..n {
        if spec.upper[i].is_finite() {
            bound_rows.push((i, T::one(), spec.upper[i] - cur.z[i]));
        }
        if spec.lower[i].is_finite() {
            bound_rows.push((i, -T::one(), cur.z[i] - spec.lower[i]));
        }
    }

    let build = |elastic: bool| -> DenseQp<T> {
        let nv = if elastic { n + 1 } else { n };
        let rows = m_in + bound_rows.len() + usize::from(elastic);
        let mut h = Matrix::zeros(nv, nv);
        h.view_mut((0, 0), (n, n)).copy_from(hessian);
        let mut g = Vector::zeros(nv);
        g.rows_mut(0, n).copy_from(&ev.gradient);
        let mut gin = Matrix::zeros(rows, nv);
        let mut hin = Vector::zeros(rows);
        gin.view_mut((0, 0), (m_in, n)).copy_from(&ev.ineq_jacobian);
        hin.rows_mut(0, m_in).copy_from(&(-&ev.ineq));
        for (r, &(i, sign, rhs)) in bound_rows.iter().enumerate() {
            gin[(m_in + r, i)] = sign;
            hin[m_in + r] = rhs;
        }
        if elastic {
            // One shared slack s ≥ 0 relaxes every nonlinear inequality.
            let weight = penalty.max(T::lit(100.0));
            h[(n, n)] = T::lit(1e-6) * weight;
            g[n] = weight;
            for r in 0..m_in {
                gin[(r, n)] = -T::one();
            }
            gin[(rows - 1, n)] = -T::one();
        }
        let mut eq = Matrix::zeros(ev.eq.len(), nv);
        eq.view_mut((0, 0), (ev.eq.len(), n))
            .copy_from(&ev.eq_jacobian);
        DenseQp {
            hessian: h,
            gradient: g,
            eq,
            eq_rhs: -&ev.eq,
            ineq: gin,
            ineq_rhs: hin,
        }
    };

    let mut elastic = false;
    let mut sol = build(false).solve();
    if sol.status != QpStatus::Optimal {
        elastic = true;
        sol = build(true).solve();
        if sol.status != QpStatus::Optimal {
            return None;
        }
    }
    let d = sol.x.rows(0, n).into_owned();
    let ineq_mult = sol.ineq_multipliers.rows(0, m_in).into_owned();
    let mut bound_mult = Vector::zeros(n);
    for (r, &(i, sign, _)) in bound_rows.iter().enumerate() {
        bound_mult[i] += sign * sol.ineq_multipliers[m_in + r];
    }
    Some(Step {
        d,
        eq_mult: sol.eq_multipliers,
        ineq_mult,
        bound_mult,
        elastic,
    })
}
