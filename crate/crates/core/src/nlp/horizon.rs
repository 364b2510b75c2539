//! Finite-horizon problems in single-shooting form: the decision vector is the
//! stacked control sequence `(u_0, …, u_{N−1})` and states are eliminated by rollout.
//!
//! Inequality rows, in order:
//! - input rows `A_u u_k − b_u ≤ 0` for every `k` (per-coordinate input bounds are
//!   variable bounds);
//! - state box rows `lower − x_k ≤ 0`, `x_k − upper ≤ 0` for `k = 0, …, N−1`;
//! - terminal row `l_f(x_N) − α ≤ 0`;
//! - the Lyapunov rows of the selected [`HorizonKind`].

use serde::{Deserialize, Serialize};

use super::sqp::{NlpEvaluation, NlpProblem, NlpSpec};
use crate::costs::{econ_stage_gradient, CostSuite};
use crate::dynamics::{stack_controls, unstack_controls, SystemModel};
use crate::error::{check_dim, Error, Result};
use crate::scalar::{Matrix, Scalar, Vector};
use crate::terminal::TerminalIngredients;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HorizonKind {
    /// `min Σ l + l_f`.
    Tracking,
    /// `min Σ l_e`, terminal constraint only.
    EconPlain,
    /// Economic with `V^δ ≤ η`.
    EconEta,
    /// Economic with `V^δ ≤ ξ` and `V^δ − βJ^δ ≤ ζ`.
    EconXiZeta,
    /// Economic with `V^δ − βJ^δ ≤ ζ`.
    EconZeta,
}

impl HorizonKind {
    pub fn is_economic(self) -> bool {
        !matches!(self, HorizonKind::Tracking)
    }
}

/// Lyapunov constraint levels. Only the ones the kind uses are read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovLevels<T: Scalar> {
    pub eta: Option<T>,
    pub xi: Option<T>,
    pub zeta: Option<T>,
    pub beta: T,
}

impl<T: Scalar> Default for LyapunovLevels<T> {
    fn default() -> Self {
        Self {
            eta: None,
            xi: None,
            zeta: None,
            beta: T::one(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum LyapunovRow<T> {
    /// `V^δ − level ≤ 0`.
    Value(T),
    /// `V^δ − βJ^δ − level ≤ 0`.
    Decrease(T),
}

/// Values of the trajectory functions at one control sequence.
#[derive(Debug, Clone)]
pub struct TrajectoryValues<T: Scalar> {
    pub states: Vec<Vector<T>>,
    pub tracking: T,
    pub v_delta: T,
    pub j_delta: T,
    pub v_econ: T,
    pub terminal_level: T,
}

#[derive(Debug)]
struct TrajectoryGradients<T: Scalar> {
    values: TrajectoryValues<T>,
    tracking: Vector<T>,
    v_delta: Vector<T>,
    j_delta: Vector<T>,
    v_econ: Vector<T>,
    terminal_level: Vector<T>,
    /// `∂x_k/∂z`.
    sensitivities: Vec<Matrix<T>>,
}

/// One online optimization problem at the measured state `x0`.
pub struct HorizonProblem<'a, T: Scalar> {
    model: &'a SystemModel<T>,
    costs: &'a CostSuite<T>,
    terminal: &'a TerminalIngredients<T>,
    horizon: usize,
    kind: HorizonKind,
    x0: Vector<T>,
    lyapunov: Vec<LyapunovRow<T>>,
    beta: T,
}

impl<'a, T: Scalar> HorizonProblem<'a, T> {
    pub fn new(
        model: &'a SystemModel<T>,
        costs: &'a CostSuite<T>,
        terminal: &'a TerminalIngredients<T>,
        horizon: usize,
        kind: HorizonKind,
        x0: Vector<T>,
        levels: LyapunovLevels<T>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::usage("horizon must be at least 1"));
        }
        check_dim("initial state", model.n_x(), x0.len())?;
        if costs.weights.p != terminal.p_matrix {
            return Err(Error::usage(
                "cost suite terminal weight differs from the terminal ingredients",
            ));
        }
        if !(levels.beta > T::zero() && levels.beta <= T::one()) {
            return Err(Error::usage("β must lie in (0, 1]"));
        }
        let need = |level: Option<T>, name: &str| {
            level.ok_or_else(|| {
                Error::usage(format!("problem kind {kind:?} needs the level {name}"))
            })
        };
        let mut lyapunov = Vec::new();
        match kind {
            HorizonKind::Tracking | HorizonKind::EconPlain => {}
            HorizonKind::EconEta => {
                let eta = need(levels.eta, "η")?;
                // η = +∞ leaves the problem unconstrained.
                if eta.is_finite() {
                    lyapunov.push(LyapunovRow::Value(eta));
                }
            }
            HorizonKind::EconXiZeta => {
                lyapunov.push(LyapunovRow::Value(need(levels.xi, "ξ")?));
                lyapunov.push(LyapunovRow::Decrease(need(levels.zeta, "ζ")?));
            }
            HorizonKind::EconZeta => {
                lyapunov.push(LyapunovRow::Decrease(need(levels.zeta, "ζ")?));
            }
        }
        if lyapunov.iter().any(|r| match r {
            LyapunovRow::Value(v) | LyapunovRow::Decrease(v) => v.partial_cmp(v).is_none(),
        }) {
            return Err(Error::usage("Lyapunov level is NaN"));
        }
        Ok(Self {
            model,
            costs,
            terminal,
            horizon,
            kind,
            x0,
            lyapunov,
            beta: levels.beta,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn kind(&self) -> HorizonKind {
        self.kind
    }

    pub fn n_input_rows(&self) -> usize {
        self.model.input_set.n_rows() * self.horizon
    }

    pub fn n_state_rows(&self) -> usize {
        2 * self.model.n_x() * self.horizon
    }

    pub fn n_lyapunov_rows(&self) -> usize {
        self.lyapunov.len()
    }

    /// Cost functions along the rollout of `controls` from `x0`.
    pub fn trajectory(&self, controls: &[Vector<T>]) -> TrajectoryValues<T> {
        let dynamics = self.model.dynamics();
        let mut states = Vec::with_capacity(self.horizon + 1);
        states.push(self.x0.clone());
        for u in controls {
            let next = dynamics.eval(states.last().expect("nonempty"), u);
            states.push(next);
        }
        let c = self.costs;
        TrajectoryValues {
            tracking: c.tracking_value_on(&states, controls),
            v_delta: c.v_delta_on(&states, controls),
            j_delta: c.j_delta_on(&states, controls),
            v_econ: c.v_econ_on(&states, controls),
            terminal_level: self.terminal.level(&states[self.horizon]),
            states,
        }
    }

    fn objective_of(&self, t: &TrajectoryValues<T>) -> T {
        if self.kind.is_economic() {
            t.v_econ
        } else {
            t.tracking
        }
    }

    fn rows_of(&self, controls: &[Vector<T>], t: &TrajectoryValues<T>) -> Vector<T> {
        let set = &self.model.input_set;
        let sb = &self.model.state_box;
        let n_x = self.model.n_x();
        let mut rows = Vec::with_capacity(self.n_ineq());
        for u in controls {
            rows.extend((&set.rows * u - &set.rhs).iter().copied());
        }
        for x in &t.states[..self.horizon] {
            rows.extend((0..n_x).map(|i| sb.lower[i] - x[i]));
            rows.extend((0..n_x).map(|i| x[i] - sb.upper[i]));
        }
        rows.push(t.terminal_level - self.terminal.alpha);
        for row in &self.lyapunov {
            rows.push(match *row {
                LyapunovRow::Value(level) => t.v_delta - level,
                LyapunovRow::Decrease(level) => t.v_delta - self.beta * t.j_delta - level,
            });
        }
        Vector::from_vec(rows)
    }

    fn gradients(&self, controls: &[Vector<T>]) -> TrajectoryGradients<T> {
        let n = self.horizon;
        let n_x = self.model.n_x();
        let n_u = self.model.n_u();
        let nz = n * n_u;
        let values = self.trajectory(controls);
        let states = &values.states;
        let c = self.costs;

        let mut sens = Vec::with_capacity(n + 1);
        sens.push(Matrix::zeros(n_x, nz));
        for k in 0..n {
            let (a, b) = self.model.dynamics().jacobians(&states[k], &controls[k]);
            let mut next = &a * &sens[k];
            let mut block = next.columns_mut(k * n_u, n_u);
            block += &b;
            sens.push(next);
        }

        // ∂φ(x_k, u_k)/∂z = S_kᵀ ∂φ/∂x + E_kᵀ ∂φ/∂u.
        let chain = |k: usize, gx: &Vector<T>, gu: &Vector<T>, acc: &mut Vector<T>, w: T| {
            *acc += sens[k].transpose() * gx * w;
            let mut seg = acc.rows_mut(k * n_u, n_u);
            seg += gu * w;
        };
        let mut g_track = Vector::zeros(nz);
        let mut g_v = Vector::zeros(nz);
        let mut g_j = Vector::zeros(nz);
        let mut g_e = Vector::zeros(nz);
        for k in 0..n {
            let (x, u) = (&states[k], &controls[k]);
            let (lx, lu) = c.stage_gradient(x, u);
            chain(k, &lx, &lu, &mut g_track, T::one());
            chain(k, &lx, &lu, &mut g_v, T::one());
            let (dx, du) = c.delta_gradient(x, u);
            if k > 0 {
                chain(k, &dx, &du, &mut g_v, T::of_usize(k));
                chain(k, &dx, &du, &mut g_j, T::one());
            } else {
                chain(k, &lx, &lu, &mut g_j, T::one());
            }
            let (ex, eu) = econ_stage_gradient(&c.economic, x, u);
            chain(k, &ex, &eu, &mut g_e, T::one());
        }
        let lf_x = self.terminal.level_gradient(&states[n]);
        let g_lf = sens[n].transpose() * &lf_x;
        g_track += &g_lf;
        g_v += &g_lf;
        g_j += sens[n].transpose() * c.gamma_gradient(&states[n]);

        TrajectoryGradients {
            values,
            tracking: g_track,
            v_delta: g_v,
            j_delta: g_j,
            v_econ: g_e,
            terminal_level: g_lf,
            sensitivities: sens,
        }
    }

    /// Wraps the problem with the input bounds as variable bounds and `initial`
    /// (or repeated `u_s` projected into `U`) as starting point.
    pub fn into_spec(self, initial: Option<&[Vector<T>]>) -> Result<NlpSpec<'a, T>> {
        let set = &self.model.input_set;
        let n = self.horizon;
        let start = match initial {
            Some(seq) => {
                if seq.len() != n {
                    return Err(Error::Dimension {
                        context: "initial control sequence",
                        expected: n,
                        actual: seq.len(),
                    });
                }
                stack_controls(seq)
            }
            None => stack_controls(&vec![set.project(&self.costs.us); n]),
        };
        let lower = stack_controls(&vec![set.lower.clone(); n]);
        let upper = stack_controls(&vec![set.upper.clone(); n]);
        NlpSpec::new(self, lower, upper, start)
    }
}

impl<T: Scalar> NlpProblem<T> for HorizonProblem<'_, T> {
    fn n_vars(&self) -> usize {
        self.horizon * self.model.n_u()
    }

    fn n_eq(&self) -> usize {
        0
    }

    fn n_ineq(&self) -> usize {
        self.n_input_rows() + self.n_state_rows() + 1 + self.lyapunov.len()
    }

    fn values(&self, z: &Vector<T>) -> (T, Vector<T>, Vector<T>) {
        let controls = unstack_controls(z, self.model.n_u());
        let t = self.trajectory(&controls);
        (
            self.objective_of(&t),
            Vector::zeros(0),
            self.rows_of(&controls, &t),
        )
    }

    fn evaluate(&self, z: &Vector<T>) -> NlpEvaluation<T> {
        let n_u = self.model.n_u();
        let n_x = self.model.n_x();
        let nz = self.n_vars();
        let controls = unstack_controls(z, n_u);
        let g = self.gradients(&controls);
        let ineq = self.rows_of(&controls, &g.values);
        let mut jac = Matrix::zeros(self.n_ineq(), nz);
        let mut row = 0;
        let set = &self.model.input_set;
        for k in 0..self.horizon {
            for r in 0..set.n_rows() {
                for j in 0..n_u {
                    jac[(row, k * n_u + j)] = set.rows[(r, j)];
                }
                row += 1;
            }
        }
        for k in 0..self.horizon {
            let s = &g.sensitivities[k];
            for i in 0..n_x {
                jac.set_row(row + i, &(-s.row(i)));
                jac.set_row(row + n_x + i, &s.row(i));
            }
            row += 2 * n_x;
        }
        jac.set_row(row, &g.terminal_level.transpose());
        row += 1;
        for lr in &self.lyapunov {
            let grad = match lr {
                LyapunovRow::Value(_) => g.v_delta.clone(),
                LyapunovRow::Decrease(_) => &g.v_delta - &g.j_delta * self.beta,
            };
            jac.set_row(row, &grad.transpose());
            row += 1;
        }
        let (objective, gradient) = if self.kind.is_economic() {
            (g.values.v_econ, g.v_econ)
        } else {
            (g.values.tracking, g.tracking)
        };
        NlpEvaluation {
            objective,
            gradient,
            eq: Vector::zeros(0),
            eq_jacobian: Matrix::zeros(0, nz),
            ineq,
            ineq_jacobian: jac,
        }
    }
}

/// Builds the NLP of `kind` at `x0`.
#[allow(clippy::too_many_arguments)]
pub fn build_horizon_problem<'a, T: Scalar>(
    model: &'a SystemModel<T>,
    costs: &'a CostSuite<T>,
    terminal: &'a TerminalIngredients<T>,
    horizon: usize,
    kind: HorizonKind,
    x0: Vector<T>,
    levels: LyapunovLevels<T>,
    initial: Option<&[Vector<T>]>,
) -> Result<NlpSpec<'a, T>> {
    HorizonProblem::new(model, costs, terminal, horizon, kind, x0, levels)?.into_spec(initial)
}

/// `(u_1, …, u_{N−1}, κ_f(x_N))`.
pub fn warm_start_shift<T: Scalar>(
    prev: &[Vector<T>],
    prev_terminal_state: &Vector<T>,
    terminal: &TerminalIngredients<T>,
) -> Vec<Vector<T>> {
    let mut next: Vec<Vector<T>> = prev.iter().skip(1).cloned().collect();
    next.push(terminal.kappa_f(prev_terminal_state));
    next
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::costs::{EconomicCostParams, PenaltySpec, TrackingWeights};
    use crate::dynamics::AffineBilinearModel;
    use crate::equilibrium::solve_steady_state;
    use crate::nlp::sqp::{forward_difference_evaluation, solve, SolverOptions};
    use crate::scalar::vector_from_f64;
    use crate::terminal::{synthesize_terminal, TerminalOptions};
    use rand::Rng;

    pub(crate) struct Case {
        pub model: SystemModel<f64>,
        pub costs: CostSuite<f64>,
        pub terminal: TerminalIngredients<f64>,
    }

    pub(crate) fn case() -> Case {
        let model = AffineBilinearModel::<f64>::printed()
            .into_system(None)
            .unwrap();
        let econ = EconomicCostParams::hvac_default().with_kappa(0.2);
        let s = solve_steady_state(&model, &econ).unwrap();
        let mut costs = CostSuite::new(
            TrackingWeights::identity(2, 2),
            PenaltySpec::default(),
            econ,
            s.xs,
            s.us,
        )
        .unwrap();
        let terminal = synthesize_terminal(
            &model,
            &costs,
            Some(Matrix::from_row_slice(
                2,
                2,
                &[0.6947, 0.0059, 0.0061, 0.6818],
            )),
            5,
            &TerminalOptions {
                n_samples: 1_000,
                bisection_samples: 400,
                ..Default::default()
            },
        )
        .unwrap();
        costs.weights = costs
            .weights
            .with_terminal(terminal.p_matrix.clone())
            .unwrap();
        Case {
            model,
            costs,
            terminal,
        }
    }

    fn levels(eta: Option<f64>, xi: Option<f64>, zeta: Option<f64>) -> LyapunovLevels<f64> {
        LyapunovLevels {
            eta,
            xi,
            zeta,
            beta: 1.0,
        }
    }

    #[test]
    fn row_count_matches_hand_count() {
        let c = case();
        let x0 = vector_from_f64(&[31.0, 30.0]);
        let p = HorizonProblem::new(
            &c.model,
            &c.costs,
            &c.terminal,
            5,
            HorizonKind::EconPlain,
            x0.clone(),
            levels(None, None, None),
        )
        .unwrap();
        // 5 flow rows + 2·2·5 state rows + 1 terminal row.
        assert_eq!(p.n_vars(), 10);
        assert_eq!(p.n_ineq(), 26);
        let p = HorizonProblem::new(
            &c.model,
            &c.costs,
            &c.terminal,
            5,
            HorizonKind::EconXiZeta,
            x0.clone(),
            levels(None, Some(1.0), Some(1.0)),
        )
        .unwrap();
        assert_eq!(p.n_ineq(), 28);
        let p = HorizonProblem::new(
            &c.model,
            &c.costs,
            &c.terminal,
            5,
            HorizonKind::EconEta,
            x0,
            levels(Some(3.0), None, None),
        )
        .unwrap();
        assert_eq!(p.n_ineq(), 27);
    }

    #[test]
    fn infinite_eta_equals_plain() {
        let c = case();
        let x0 = vector_from_f64(&[27.0, 26.0]);
        let eta = HorizonProblem::new(
            &c.model,
            &c.costs,
            &c.terminal,
            5,
            HorizonKind::EconEta,
            x0.clone(),
            levels(Some(f64::INFINITY), None, None),
        )
        .unwrap();
        let plain = HorizonProblem::new(
            &c.model,
            &c.costs,
            &c.terminal,
            5,
            HorizonKind::EconPlain,
            x0,
            levels(None, None, None),
        )
        .unwrap();
        assert_eq!(eta.n_ineq(), plain.n_ineq());
        let z = vector_from_f64(&[0.5, 0.4, 0.6, 0.2, 1.0, 1.0, 0.0, 0.3, 0.7, 0.7]);
        assert_eq!(eta.values(&z).2, plain.values(&z).2);
    }

    #[test]
    fn xi_at_vmax_reduces_to_zeta_rows() {
        let c = case();
        let x0 = vector_from_f64(&[27.0, 26.0]);
        let big = 1e6;
        let both = HorizonProblem::new(
            &c.model,
            &c.costs,
            &c.terminal,
            5,
            HorizonKind::EconXiZeta,
            x0.clone(),
            levels(None, Some(big), Some(2.0)),
        )
        .unwrap();
        let zeta = HorizonProblem::new(
            &c.model,
            &c.costs,
            &c.terminal,
            5,
            HorizonKind::EconZeta,
            x0,
            levels(None, None, Some(2.0)),
        )
        .unwrap();
        let z = vector_from_f64(&[0.5, 0.4, 0.6, 0.2, 1.0, 1.0, 0.0, 0.3, 0.7, 0.7]);
        let (_, _, rb) = both.values(&z);
        let (_, _, rz) = zeta.values(&z);
        assert!(rb[26] < 0.0);
        assert_eq!(rb[27], rz[26]);
    }

    #[test]
    fn missing_level_is_a_usage_error() {
        let c = case();
        let x0 = vector_from_f64(&[27.0, 26.0]);
        let r = HorizonProblem::new(
            &c.model,
            &c.costs,
            &c.terminal,
            5,
            HorizonKind::EconZeta,
            x0,
            levels(None, None, None),
        );
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn analytic_derivatives_match_central_differences() {
        let c = case();
        let mut rng = crate::sampling::rng(5);
        for kind in [HorizonKind::Tracking, HorizonKind::EconXiZeta] {
            for _ in 0..20 {
                let x0 =
                    vector_from_f64(&[rng.random_range(16.0..34.0), rng.random_range(16.0..34.0)]);
                let p = HorizonProblem::new(
                    &c.model,
                    &c.costs,
                    &c.terminal,
                    5,
                    kind,
                    x0,
                    levels(None, Some(50.0), Some(20.0)),
                )
                .unwrap();
                let z = Vector::from_fn(10, |_, _| rng.random_range(0.0..1.6));
                let e = p.evaluate(&z);
                let h = 1e-6;
                for j in 0..10 {
                    let mut zp = z.clone();
                    zp[j] += h;
                    let mut zm = z.clone();
                    zm[j] -= h;
                    let (fp, _, ip) = p.values(&zp);
                    let (fm, _, im) = p.values(&zm);
                    let fd = (fp - fm) / (2.0 * h);
                    assert!(
                        (fd - e.gradient[j]).abs() <= 1e-5 * (1.0 + fd.abs()),
                        "objective {kind:?} {j}"
                    );
                    let fdi = (ip - im) / (2.0 * h);
                    for r in 0..fdi.len() {
                        let a = e.ineq_jacobian[(r, j)];
                        assert!(
                            (fdi[r] - a).abs() <= 1e-5 * (1.0 + fdi[r].abs()),
                            "row {r} col {j}"
                        );
                    }
                }
                // Values agree with the derivative-free path.
                let fwd = forward_difference_evaluation(&p, &z);
                assert_eq!(fwd.objective, e.objective);
            }
        }
    }

    #[test]
    fn shift_of_steady_sequence_is_steady() {
        let c = case();
        let seq = vec![c.costs.us.clone(); 5];
        let shifted = warm_start_shift(&seq, &c.costs.xs, &c.terminal);
        assert_eq!(shifted, seq);
        let one = warm_start_shift(&seq[..1], &vector_from_f64(&[24.5, 25.0]), &c.terminal);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0], c.terminal.kappa_f(&vector_from_f64(&[24.5, 25.0])));
    }

    #[test]
    fn economic_problem_solves_from_hot_start() {
        let c = case();
        let x0 = vector_from_f64(&[26.0, 26.5]);
        let spec = build_horizon_problem(
            &c.model,
            &c.costs,
            &c.terminal,
            5,
            HorizonKind::EconPlain,
            x0,
            levels(None, None, None),
            None,
        )
        .unwrap();
        let r = solve(&spec, &SolverOptions::default()).unwrap();
        assert!(r.is_feasible(1e-8), "{:?}", r.status);
    }
}
