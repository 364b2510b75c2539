//! Receding-horizon controllers: tracking MPC, economic MPC with a monotone
//! Lyapunov constraint (level η) and economic MPC with an m-step non-monotone
//! Lyapunov constraint (levels ξ, ζ).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::costs::CostSuite;
use crate::dynamics::SystemModel;
use crate::error::{check_dim, Error, Result};
use crate::nlp::{
    self, warm_start_shift, HorizonKind, HorizonProblem, LyapunovLevels, NlpStatus, SolverOptions,
};
use crate::scalar::{Scalar, Vector};
use crate::terminal::TerminalIngredients;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Tracking,
    /// Monotone Lyapunov constraint, `V^δ ≤ η_t`.
    Alg1,
    /// m-step constraint pair `V^δ ≤ ξ_t`, `V^δ − βJ^δ ≤ ζ_t`.
    Alg2,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Tracking => "tracking",
            Scheme::Alg1 => "alg1",
            Scheme::Alg2 => "alg2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub scheme: Scheme,
    pub horizon: usize,
    /// Decrease period; read by `alg2` only.
    pub m: usize,
    pub beta: f64,
    pub tau: f64,
    /// Overrides the computed `V_max` used to initialize `ξ` and `ζ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_max: Option<f64>,
}

impl ControllerConfig {
    pub fn new(scheme: Scheme, horizon: usize, m: usize) -> Self {
        Self {
            scheme,
            horizon,
            m,
            beta: 1.0,
            tau: 0.6,
            v_max: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid(format!(
                "β must lie in (0, 1], got {}",
                self.beta
            )));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::invalid(format!(
                "τ must lie in [0, 1), got {}",
                self.tau
            )));
        }
        if self.scheme == Scheme::Alg2 && self.m < 2 {
            return Err(Error::invalid(format!("alg2 needs m ≥ 2, got {}", self.m)));
        }
        if let Some(v) = self.v_max {
            if !(v > 0.0) {
                return Err(Error::invalid("v_max override must be positive"));
            }
        }
        Ok(())
    }

    /// Decrease period in effect (`alg1` and tracking behave as `m = 1`).
    pub fn period(&self) -> usize {
        match self.scheme {
            Scheme::Alg2 => self.m,
            _ => 1,
        }
    }

    /// Short label such as `alg2-m8`.
    pub fn label(&self) -> String {
        match self.scheme {
            Scheme::Alg2 => format!("alg2-m{}", self.m),
            s => s.as_str().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState<T: Scalar> {
    pub t: usize,
    pub prev_useq: Option<Vec<Vector<T>>>,
    /// Predicted terminal state of `prev_useq`.
    pub prev_terminal_state: Option<Vector<T>>,
    pub prev_vdelta: Option<T>,
    pub prev_jdelta: Option<T>,
    /// `ζ_{t−m+1}, …, ζ_t` once `ζ_t` has been computed.
    pub zeta_history: VecDeque<T>,
    /// `ξ_{t−m}, …, ξ_{t−1}`.
    pub xi_history: VecDeque<T>,
    pub fallback_count: usize,
}

impl<T: Scalar> Default for ControllerState<T> {
    fn default() -> Self {
        Self {
            t: 0,
            prev_useq: None,
            prev_terminal_state: None,
            prev_vdelta: None,
            prev_jdelta: None,
            zeta_history: VecDeque::new(),
            xi_history: VecDeque::new(),
            fallback_count: 0,
        }
    }
}

fn previous_values<T: Scalar>(state: &ControllerState<T>) -> Result<(T, T)> {
    if state.t == 0 {
        return Err(Error::usage("no previous solution at t = 0"));
    }
    match (state.prev_vdelta, state.prev_jdelta) {
        (Some(v), Some(j)) => Ok((v, j)),
        _ => Err(Error::Internal("previous V^δ/J^δ missing".into())),
    }
}

/// `η_t = V^δ(x(t−1), u*_{t−1}) − βJ^δ(x(t−1), u*_{t−1})`.
pub fn update_eta<T: Scalar>(state: &ControllerState<T>, beta: T) -> Result<T> {
    let (v, j) = previous_values(state)?;
    Ok(v - beta * j)
}

/// `ζ_t`; same formula as [`update_eta`].
pub fn update_zeta<T: Scalar>(state: &ControllerState<T>, beta: T) -> Result<T> {
    update_eta(state, beta)
}

/// `ξ_t = max(τ ξ_{t−m}, ζ_{t−m+1})` for `t ≥ m`, `V_max` before. Expects
/// `ζ_t` to be in the history already.
pub fn update_xi<T: Scalar>(state: &ControllerState<T>, m: usize, tau: T, v_max: T) -> Result<T> {
    if state.t < m {
        return Ok(v_max);
    }
    if state.xi_history.len() < m || state.zeta_history.len() < m {
        return Err(Error::Internal(format!(
            "level history underflow at t = {} (ξ: {}, ζ: {}, m = {m})",
            state.t,
            state.xi_history.len(),
            state.zeta_history.len()
        )));
    }
    let xi_back = state.xi_history[state.xi_history.len() - m];
    let zeta_next = state.zeta_history[state.zeta_history.len() - m];
    Ok((tau * xi_back).max(zeta_next))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T: Scalar> {
    pub t: usize,
    pub applied: Vector<T>,
    pub sequence: Vec<Vector<T>>,
    pub predicted_terminal: Vector<T>,
    pub v_delta: T,
    pub j_delta: T,
    pub v_econ: T,
    pub eta: Option<T>,
    pub xi: Option<T>,
    pub zeta: Option<T>,
    pub kind: HorizonKind,
    pub status: NlpStatus,
    pub fallback: bool,
    pub iterations: usize,
}

/// One controller instance: a single-owner state machine over a fixed model,
/// cost suite and terminal ingredients.
pub struct Controller<'a, T: Scalar> {
    model: &'a SystemModel<T>,
    costs: &'a CostSuite<T>,
    terminal: &'a TerminalIngredients<T>,
    config: ControllerConfig,
    solver: SolverOptions,
    v_max: T,
    state: ControllerState<T>,
}

impl<'a, T: Scalar> Controller<'a, T> {
    pub fn new(
        model: &'a SystemModel<T>,
        costs: &'a CostSuite<T>,
        terminal: &'a TerminalIngredients<T>,
        config: ControllerConfig,
        solver: SolverOptions,
        v_max: T,
    ) -> Result<Self> {
        config.validate()?;
        let v_max = config.v_max.map_or(v_max, T::lit);
        if config.scheme == Scheme::Alg2 && !(v_max > T::zero() && v_max.is_finite()) {
            return Err(Error::usage("alg2 needs a finite positive V_max"));
        }
        Ok(Self {
            model,
            costs,
            terminal,
            config,
            solver,
            v_max,
            state: ControllerState::default(),
        })
    }

    /// Replaces the internal state, e.g. to resume from a previous solution.
    pub fn with_state(mut self, state: ControllerState<T>) -> Self {
        self.state = state;
        self
    }

    pub fn state(&self) -> &ControllerState<T> {
        &self.state
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn v_max(&self) -> T {
        self.v_max
    }

    fn problem(
        &self,
        x: &Vector<T>,
        kind: HorizonKind,
        levels: LyapunovLevels<T>,
    ) -> Result<HorizonProblem<'a, T>> {
        HorizonProblem::new(
            self.model,
            self.costs,
            self.terminal,
            self.config.horizon,
            kind,
            x.clone(),
            levels,
        )
    }

    /// Initial guess without a previous solution: repeated `u_s` projected into
    /// `U`, or, if that violates the constraints, the tracking solution.
    fn initial_guess(&self, x: &Vector<T>) -> Result<Vec<Vector<T>>> {
        let n = self.config.horizon;
        let guess = vec![self.model.input_set.project(&self.costs.us); n];
        let feas_tol = T::lit(self.solver.feas_tol);
        let spec = self
            .problem(x, HorizonKind::Tracking, LyapunovLevels::default())?
            .into_spec(Some(&guess))?;
        if spec.max_violation(&spec.initial_point) <= feas_tol {
            return Ok(guess);
        }
        log::debug!(
            "repeated steady input infeasible at t = {}; running a feasibility phase",
            self.state.t
        );
        let opts = SolverOptions {
            max_iter: self.solver.max_iter.max(500),
            ..self.solver
        };
        let r = nlp::solve(&spec, &opts)?;
        if r.max_violation > feas_tol {
            return Err(Error::Infeasible {
                message: format!(
                    "no feasible control sequence found at x = {:?}",
                    x.as_slice()
                ),
                residual: r.max_violation.to_f64_lossy(),
            });
        }
        Ok(crate::dynamics::unstack_controls(
            &r.solution,
            self.model.n_u(),
        ))
    }

    /// Solves the problem of the current time step at the measured `x`, applies
    /// bookkeeping and returns the first control.
    pub fn step(&mut self, x: &Vector<T>) -> Result<StepOutput<T>> {
        check_dim("measured state", self.model.n_x(), x.len())?;
        let t = self.state.t;
        let beta = T::lit(self.config.beta);
        let mut levels = LyapunovLevels {
            beta,
            ..Default::default()
        };
        let (kind, eta, xi, zeta) = match self.config.scheme {
            Scheme::Tracking => (HorizonKind::Tracking, None, None, None),
            Scheme::Alg1 => {
                let eta = if t == 0 {
                    T::infinity()
                } else {
                    update_eta(&self.state, beta)?
                };
                levels.eta = Some(eta);
                (HorizonKind::EconEta, Some(eta), None, None)
            }
            Scheme::Alg2 => {
                let m = self.config.m;
                let zeta = if t == 0 {
                    self.v_max
                } else {
                    update_zeta(&self.state, beta)?
                };
                self.state.zeta_history.push_back(zeta);
                while self.state.zeta_history.len() > m {
                    self.state.zeta_history.pop_front();
                }
                let xi = update_xi(&self.state, m, T::lit(self.config.tau), self.v_max)?;
                levels.zeta = Some(zeta);
                levels.xi = Some(xi);
                let kind = if t == 0 {
                    HorizonKind::EconPlain
                } else if t < m {
                    HorizonKind::EconZeta
                } else {
                    HorizonKind::EconXiZeta
                };
                (kind, None, Some(xi), Some(zeta))
            }
        };

        let warm = match (&self.state.prev_useq, &self.state.prev_terminal_state) {
            (Some(prev), Some(xn)) => warm_start_shift(prev, xn, self.terminal),
            _ => self.initial_guess(x)?,
        };
        let problem = self.problem(x, kind, levels)?;
        let spec = problem.into_spec(Some(&warm))?;
        let feas_tol = T::lit(self.solver.feas_tol);
        let warm_violation = spec.max_violation(&spec.initial_point);
        let warm_feasible = warm_violation <= feas_tol;
        let warm_objective = spec.problem.values(&spec.initial_point).0;
        let result = nlp::solve(&spec, &self.solver)?;
        let solver_ok = result.status != NlpStatus::Infeasible
            && result.max_violation <= feas_tol
            && (!warm_feasible || result.objective <= warm_objective);
        let (sequence, fallback) = if solver_ok {
            (
                crate::dynamics::unstack_controls(&result.solution, self.model.n_u()),
                false,
            )
        } else if warm_feasible {
            log::warn!(
                "t = {t}: solver returned {} (violation {:.3e}); applying the warm start",
                result.status.as_str(),
                result.max_violation.to_f64_lossy()
            );
            self.state.fallback_count += 1;
            (warm, true)
        } else {
            return Err(Error::Infeasible {
                message: format!(
                    "t = {t}: neither the solver ({}) nor the warm start is feasible",
                    result.status.as_str()
                ),
                residual: result.max_violation.min(warm_violation).to_f64_lossy(),
            });
        };
        drop(spec);

        let values = self.problem(x, kind, levels)?.trajectory(&sequence);
        let predicted_terminal = values.states[self.config.horizon].clone();
        if self.config.scheme == Scheme::Alg2 {
            self.state.xi_history.push_back(xi.expect("alg2 sets ξ"));
            while self.state.xi_history.len() > self.config.m {
                self.state.xi_history.pop_front();
            }
        }
        self.state.prev_vdelta = Some(values.v_delta);
        self.state.prev_jdelta = Some(values.j_delta);
        self.state.prev_terminal_state = Some(predicted_terminal.clone());
        self.state.prev_useq = Some(sequence.clone());
        self.state.t += 1;
        Ok(StepOutput {
            t,
            applied: sequence[0].clone(),
            sequence,
            predicted_terminal,
            v_delta: values.v_delta,
            j_delta: values.j_delta,
            v_econ: values.v_econ,
            eta,
            xi,
            zeta,
            kind,
            status: result.status,
            fallback,
            iterations: result.iterations,
        })
    }
}

/// Free-function form of [`Controller::step`].
pub fn controller_step<T: Scalar>(
    controller: &mut Controller<'_, T>,
    x: &Vector<T>,
) -> Result<StepOutput<T>> {
    controller.step(x)
}
