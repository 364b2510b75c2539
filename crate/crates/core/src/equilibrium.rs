//! Optimal economic steady state: `min l_e(x,u)` s.t. `x = f(x,u)`, `x ∈ X_∞`, `u ∈ U`.

use crate::costs::{econ_stage_cost, EconomicCostParams};
use crate::dynamics::SystemModel;
use crate::error::{Error, Result};
use crate::nlp::{self, NlpProblem, NlpSpec, NlpStatus, SolverOptions};
use crate::scalar::{Scalar, Vector};

/// Tolerance on `‖f(x_s,u_s) − x_s‖` for a solved pair.
pub const STEADY_TOL: f64 = 1e-8;
/// Tolerance for pairs copied from the published (4-decimal) model.
pub const PUBLISHED_STEADY_TOL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState<T: Scalar> {
    pub xs: Vector<T>,
    pub us: Vector<T>,
    /// `l_e(x_s, u_s)`.
    pub cost: T,
    /// `‖f(x_s,u_s) − x_s‖`.
    pub residual: T,
}

impl<T: Scalar> SteadyState<T> {
    /// Wraps a given pair, checking it against the model with tolerance `tol`.
    pub fn from_pair(
        model: &SystemModel<T>,
        econ: &EconomicCostParams<T>,
        xs: Vector<T>,
        us: Vector<T>,
        tol: T,
    ) -> Result<Self> {
        let residual = (model.step(&xs, &us)? - &xs).norm();
        if !(residual <= tol) {
            return Err(Error::Infeasible {
                message: "given pair is not a steady state of the model".into(),
                residual: residual.to_f64_lossy(),
            });
        }
        if !model.input_set.contains(&us, T::lit(STEADY_TOL)) {
            return Err(Error::Infeasible {
                message: "steady input outside U".into(),
                residual: residual.to_f64_lossy(),
            });
        }
        let cost = econ_stage_cost(econ, &xs, &us);
        Ok(Self {
            xs,
            us,
            cost,
            residual,
        })
    }
}

/// Solves the steady-state problem over every point of `X_∞` and returns the
/// cheapest admissible pair.
///
/// For a point `x` with a square, nonsingular `∂f/∂u` the input is the unique
/// root of `f(x,u) = x` (Newton). Otherwise `min_u l_e(x,u)` s.t. `f(x,u) = x`,
/// `u ∈ U` is solved with the SQP.
pub fn solve_steady_state<T: Scalar>(
    model: &SystemModel<T>,
    econ: &EconomicCostParams<T>,
) -> Result<SteadyState<T>> {
    if model.asymptotic_set.is_empty() {
        return Err(Error::usage("asymptotic set is empty"));
    }
    let mut best: Option<SteadyState<T>> = None;
    let mut last_err = None;
    for xs in &model.asymptotic_set {
        match steady_input_at(model, econ, xs) {
            Ok(s) => {
                if best.as_ref().is_none_or(|b| s.cost < b.cost) {
                    best = Some(s);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one point was tried"))
}

fn steady_input_at<T: Scalar>(
    model: &SystemModel<T>,
    econ: &EconomicCostParams<T>,
    xs: &Vector<T>,
) -> Result<SteadyState<T>> {
    let tol = T::lit(STEADY_TOL);
    let mut singular = false;
    if model.n_u() == model.n_x() {
        let mut u = model
            .input_set
            .feasible_point()
            .unwrap_or_else(|| Vector::zeros(model.n_u()));
        for _ in 0..50 {
            let r = model.step(xs, &u)? - xs;
            if r.norm() <= tol * T::lit(1e-2) {
                break;
            }
            let (_, b) = model.jacobians(xs, &u)?;
            match b.lu().solve(&r) {
                Some(du) if du.iter().all(|v| v.is_finite()) => u -= du,
                _ => {
                    singular = true;
                    break;
                }
            }
        }
        if !singular {
            let residual = (model.step(xs, &u)? - xs).norm();
            if residual <= tol {
                if !model.input_set.contains(&u, tol) {
                    return Err(Error::Infeasible {
                        message: format!(
                            "the unique steady input {:?} at {:?} lies outside U",
                            u.as_slice(),
                            xs.as_slice()
                        ),
                        residual: residual.to_f64_lossy(),
                    });
                }
                let cost = econ_stage_cost(econ, xs, &u);
                return Ok(SteadyState {
                    xs: xs.clone(),
                    us: u,
                    cost,
                    residual,
                });
            }
        }
    }
    let problem = SteadyProblem { model, econ, xs };
    let start = model
        .input_set
        .feasible_point()
        .unwrap_or_else(|| Vector::zeros(model.n_u()));
    let spec = NlpSpec::new(
        problem,
        model.input_set.lower.clone(),
        model.input_set.upper.clone(),
        start,
    )?;
    let opts = SolverOptions {
        max_iter: 500,
        ..Default::default()
    };
    let result = nlp::solve(&spec, &opts)?;
    let residual = (model.step(xs, &result.solution)? - xs).norm();
    if result.status == NlpStatus::Infeasible || residual > tol {
        let why = if singular {
            " (∂f/∂u is singular at x)"
        } else {
            ""
        };
        return Err(Error::Infeasible {
            message: format!("no admissible steady input at {:?}{why}", xs.as_slice()),
            residual: residual.to_f64_lossy(),
        });
    }
    Ok(SteadyState {
        xs: xs.clone(),
        cost: econ_stage_cost(econ, xs, &result.solution),
        us: result.solution,
        residual,
    })
}

struct SteadyProblem<'a, T: Scalar> {
    model: &'a SystemModel<T>,
    econ: &'a EconomicCostParams<T>,
    xs: &'a Vector<T>,
}

impl<T: Scalar> NlpProblem<T> for SteadyProblem<'_, T> {
    fn n_vars(&self) -> usize {
        self.model.n_u()
    }

    fn n_eq(&self) -> usize {
        self.model.n_x()
    }

    fn n_ineq(&self) -> usize {
        self.model.input_set.n_rows()
    }

    fn values(&self, u: &Vector<T>) -> (T, Vector<T>, Vector<T>) {
        let set = &self.model.input_set;
        let next = self.model.dynamics().eval(self.xs, u);
        (
            econ_stage_cost(self.econ, self.xs, u),
            next - self.xs,
            &set.rows * u - &set.rhs,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{AffineBilinearModel, StateBox};
    use crate::scalar::vector_from_f64;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn published_case_study_pair() {
        let model = AffineBilinearModel::<f64>::printed()
            .into_system(None)
            .unwrap();
        let econ = EconomicCostParams::hvac_default();
        let s = solve_steady_state(&model, &econ).unwrap();
        assert_eq!(s.xs.as_slice(), &[24.0, 25.0]);
        assert_abs_diff_eq!(s.us[0], 0.4646, epsilon = 1e-3);
        assert_abs_diff_eq!(s.us[1], 0.4020, epsilon = 1e-3);
        assert!(s.residual <= STEADY_TOL);
    }

    #[test]
    fn published_pair_passes_loose_check() {
        let model = AffineBilinearModel::<f64>::printed_literal()
            .into_system(None)
            .unwrap();
        let econ = EconomicCostParams::hvac_default();
        let s = SteadyState::from_pair(
            &model,
            &econ,
            vector_from_f64(&[24.0, 25.0]),
            vector_from_f64(&[0.4646, 0.4020]),
            PUBLISHED_STEADY_TOL,
        )
        .unwrap();
        assert!(s.residual > 0.02 && s.residual < 0.05);
    }

    #[test]
    fn zero_input_fixed_point() {
        // Free equilibrium of A x + d: x = (I − A)^{-1} d.
        let m = AffineBilinearModel::<f64>::printed();
        let xf = (crate::Matrix::identity(2, 2) - &m.a_matrix)
            .lu()
            .solve(&m.d_vector)
            .unwrap();
        let model = m
            .into_system_with(
                StateBox::new(
                    vector_from_f64(&[15.0, 15.0]),
                    vector_from_f64(&[300.0, 300.0]),
                )
                .unwrap(),
                3.2,
                xf.clone(),
                600.0,
            )
            .unwrap();
        let s = solve_steady_state(&model, &EconomicCostParams::hvac_default()).unwrap();
        assert!(s.us.amax() < 1e-10);
    }

    #[test]
    fn setpoint_needing_too_much_flow_is_infeasible() {
        let model = AffineBilinearModel::<f64>::printed()
            .into_system_with(
                StateBox::new(
                    vector_from_f64(&[15.0, 15.0]),
                    vector_from_f64(&[35.0, 35.0]),
                )
                .unwrap(),
                3.2,
                vector_from_f64(&[16.0, 16.0]),
                600.0,
            )
            .unwrap();
        let err = solve_steady_state(&model, &EconomicCostParams::hvac_default()).unwrap_err();
        assert!(matches!(err, Error::Infeasible { .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn planted_equilibrium_is_recovered(seed in 0u64..10_000) {
            let mut rng = crate::sampling::rng(seed);
            let a = crate::Matrix::from_fn(2, 2, |i, j| {
                if i == j { rng.random_range(0.8..0.99) } else { rng.random_range(0.0..0.01) }
            });
            let g = vector_from_f64(&[rng.random_range(0.03..0.1), rng.random_range(0.03..0.1)]);
            let offset = vector_from_f64(&[15.0, 15.0]);
            let xs = vector_from_f64(&[rng.random_range(18.0..30.0), rng.random_range(18.0..30.0)]);
            let us = vector_from_f64(&[rng.random_range(0.1..1.4), rng.random_range(0.1..1.4)]);
            let mut d = &xs - &a * &xs;
            for i in 0..2 {
                d[i] -= g[i] * (offset[i] - xs[i]) * us[i];
            }
            let model = AffineBilinearModel::new(a, g, offset, d)
                .unwrap()
                .into_system_with(
                    StateBox::new(vector_from_f64(&[15.0, 15.0]), vector_from_f64(&[35.0, 35.0])).unwrap(),
                    3.2,
                    xs.clone(),
                    600.0,
                )
                .unwrap();
            let s = solve_steady_state(&model, &EconomicCostParams::hvac_default()).unwrap();
            prop_assert!((s.us - us).amax() < 1e-8);
        }
    }
}
