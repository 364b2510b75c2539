//! Closed-loop simulation, per-step monitors, metrics and CSV logging.

mod csvlog;
mod monitor;

use serde::{Deserialize, Serialize};

pub use self::csvlog::{read_csv, write_csv, CsvRow, CSV_COLUMNS};
pub use self::monitor::{
    monitor_suite, MonitorId, MonitorReport, MonitorSummary, MonitorToggles, Verdict,
};

use crate::controller::{Controller, ControllerConfig};
use crate::costs::{energy_kwh, CostSuite};
use crate::dynamics::SystemModel;
use crate::error::{check_dim, Error, Result};
use crate::nlp::{NlpStatus, SolverOptions};
use crate::scalar::{Scalar, Vector};
use crate::terminal::TerminalIngredients;

/// Final-distance threshold (°C) used for "converged" verdicts.
pub const CONVERGENCE_RADIUS: f64 = 0.1;
/// Threshold on the last-quarter mean of `J^δ`.
pub const J_DECAY_THRESHOLD: f64 = 1e-3;
/// Relative slack on the steady-state economic cost.
pub const AVERAGE_COST_SLACK: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub x0: Vec<f64>,
    pub steps: usize,
    pub controller: ControllerConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub monitors: MonitorToggles,
    #[serde(default)]
    pub seed: u64,
}

impl SimConfig {
    pub fn validate<T: Scalar>(&self, model: &SystemModel<T>) -> Result<Vector<T>> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        check_dim("x0", model.n_x(), self.x0.len())?;
        let x0 = crate::scalar::vector_from_f64(&self.x0);
        if !model.state_box.contains(&x0, T::zero()) {
            return Err(Error::invalid(format!(
                "x0 {:?} lies outside the state box",
                self.x0
            )));
        }
        self.controller.validate()?;
        Ok(x0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<T: Scalar> {
    pub t: usize,
    pub x: Vector<T>,
    pub u: Vector<T>,
    pub v_delta: T,
    pub j_delta: T,
    pub v_econ: T,
    /// `l_e(x(t), u(t))`.
    pub le_inst: T,
    pub eta: Option<T>,
    pub xi: Option<T>,
    pub zeta: Option<T>,
    pub status: NlpStatus,
    pub fallback: bool,
}

/// Why a run stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub t: usize,
    pub message: String,
    pub infeasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog<T: Scalar> {
    pub config: SimConfig,
    pub records: Vec<StepRecord<T>>,
    /// `x(T)`, the state after the last applied control.
    pub final_state: Vector<T>,
    pub xs: Vector<T>,
    pub steady_cost: T,
    pub dt: T,
    pub v_max: T,
    pub fallback_count: usize,
    pub abort: Option<Abort>,
}

impl<T: Scalar> SimLog<T> {
    pub fn is_complete(&self) -> bool {
        self.abort.is_none() && self.records.len() == self.config.steps
    }

    pub fn controls(&self) -> Vec<Vector<T>> {
        self.records.iter().map(|r| r.u.clone()).collect()
    }

    /// Total energy of the applied controls in kWh.
    pub fn total_kwh(&self) -> T {
        let power: Vec<T> = self.records.iter().map(|r| r.le_inst).collect();
        energy_kwh(&power, self.dt).unwrap_or_else(|_| T::lit(f64::NAN))
    }

    /// `x(0), …, x(T)` including the state after the last control.
    pub fn states(&self) -> Vec<Vector<T>> {
        self.records
            .iter()
            .map(|r| r.x.clone())
            .chain([self.final_state.clone()])
            .collect()
    }

    pub fn final_distance(&self) -> T {
        (&self.final_state - &self.xs).norm()
    }
}

/// Runs `config.steps` controller steps from `config.x0`, applying each first
/// control to the model.
///
/// Invalid configuration and an infeasible first problem are errors. Later
/// failures stop the run and return the partial log with `abort` set.
pub fn simulate<T: Scalar>(
    model: &SystemModel<T>,
    costs: &CostSuite<T>,
    terminal: &TerminalIngredients<T>,
    v_max: T,
    config: &SimConfig,
) -> Result<SimLog<T>> {
    let mut x = config.validate(model)?;
    let mut controller = Controller::new(
        model,
        costs,
        terminal,
        config.controller,
        config.solver,
        v_max,
    )?;
    let mut records = Vec::with_capacity(config.steps);
    let mut abort = None;
    for t in 0..config.steps {
        let out = match controller.step(&x) {
            Ok(out) => out,
            Err(e) if t == 0 => return Err(e),
            Err(e) => {
                log::error!("{}: run aborted at t = {t}: {e}", config.controller.label());
                abort = Some(Abort {
                    t,
                    infeasible: matches!(e, Error::Infeasible { .. }),
                    message: e.to_string(),
                });
                break;
            }
        };
        let next = model.step(&x, &out.applied)?;
        records.push(StepRecord {
            t,
            le_inst: costs.economic(&x, &out.applied),
            x: std::mem::replace(&mut x, next),
            u: out.applied,
            v_delta: out.v_delta,
            j_delta: out.j_delta,
            v_econ: out.v_econ,
            eta: out.eta,
            xi: out.xi,
            zeta: out.zeta,
            status: out.status,
            fallback: out.fallback,
        });
    }
    Ok(SimLog {
        config: config.clone(),
        records,
        final_state: x,
        xs: costs.xs.clone(),
        steady_cost: costs.steady_economic(),
        dt: model.dt,
        v_max: controller.v_max(),
        fallback_count: controller.state().fallback_count,
        abort,
    })
}

/// Cumulative mean of the instantaneous economic cost,
/// `Σ_{k≤t} l_e(x(k),u(k)) / (t+1)`.
pub fn average_cost_series<T: Scalar>(le: &[T]) -> Vec<T> {
    let mut sum = T::zero();
    le.iter()
        .enumerate()
        .map(|(k, &v)| {
            sum += v;
            sum / T::of_usize(k + 1)
        })
        .collect()
}

/// Largest deviation between logged states `x(0), …, x(T)` and a rollout of
/// the logged controls from `x(0)` through `model`.
pub fn replay_deviation<T: Scalar>(
    model: &SystemModel<T>,
    states: &[Vector<T>],
    controls: &[Vector<T>],
) -> Result<T> {
    check_dim("replayed states", controls.len() + 1, states.len())?;
    let replay = model.rollout(&states[0], controls)?;
    Ok(states
        .iter()
        .zip(&replay)
        .map(|(a, b)| (a - b).amax())
        .fold(T::zero(), |m, d| m.max(d)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub controller: ControllerConfig,
    pub steps_requested: usize,
    pub steps_completed: usize,
    pub total_kwh: f64,
    pub final_distance: f64,
    pub final_average_cost: f64,
    pub steady_cost: f64,
    pub v_max: f64,
    pub fallback_count: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort: Option<Abort>,
    pub monitors: Vec<MonitorSummary>,
    /// Every mandatory monitor passed and the run completed.
    pub mandatory_passed: bool,
    pub average_cost_series: Vec<f64>,
}

impl RunSummary {
    pub fn new<T: Scalar>(log: &SimLog<T>, report: &MonitorReport) -> Self {
        let le: Vec<T> = log.records.iter().map(|r| r.le_inst).collect();
        let avg: Vec<f64> = average_cost_series(&le)
            .into_iter()
            .map(T::to_f64_lossy)
            .collect();
        Self {
            label: log.config.controller.label(),
            controller: log.config.controller,
            steps_requested: log.config.steps,
            steps_completed: log.records.len(),
            total_kwh: log.total_kwh().to_f64_lossy(),
            final_distance: log.final_distance().to_f64_lossy(),
            final_average_cost: avg.last().copied().unwrap_or(f64::NAN),
            steady_cost: log.steady_cost.to_f64_lossy(),
            v_max: log.v_max.to_f64_lossy(),
            fallback_count: log.fallback_count,
            seed: log.config.seed,
            abort: log.abort.clone(),
            monitors: report.summaries.clone(),
            mandatory_passed: log.is_complete() && report.mandatory_passed(),
            average_cost_series: avg,
        }
    }

    pub fn monitor(&self, id: MonitorId) -> Option<&MonitorSummary> {
        self.monitors.iter().find(|m| m.id == id)
    }
}

/// Outcome of [`calibrate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub value: f64,
    pub achieved: f64,
    pub target: f64,
    pub evaluations: usize,
}

/// Bisection for `f(κ) = target` on `[lo, hi]` to within `tol` in the output.
/// Fails with [`Error::Calibration`] when `f(lo) − target` and `f(hi) − target`
/// have the same sign.
pub fn calibrate(
    mut f: impl FnMut(f64) -> Result<f64>,
    target: f64,
    (mut lo, mut hi): (f64, f64),
    tol: f64,
    max_evals: usize,
) -> Result<Calibration> {
    if !(lo < hi) || !(tol > 0.0) {
        return Err(Error::usage(
            "calibration needs lo < hi and a positive tolerance",
        ));
    }
    let mut f_lo = f(lo)? - target;
    let mut f_hi = f(hi)? - target;
    let mut evals = 2;
    let done = |v: f64, r: f64, evaluations| Calibration {
        value: v,
        achieved: r + target,
        target,
        evaluations,
    };
    if f_lo.abs() <= tol {
        return Ok(done(lo, f_lo, evals));
    }
    if f_hi.abs() <= tol {
        return Ok(done(hi, f_hi, evals));
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(Error::Calibration(format!(
            "target {target} is not bracketed: f({lo}) = {}, f({hi}) = {}",
            f_lo + target,
            f_hi + target
        )));
    }
    while evals < max_evals {
        let mid = 0.5 * (lo + hi);
        let f_mid = f(mid)? - target;
        evals += 1;
        log::info!("calibration: f({mid:.6}) = {:.4}", f_mid + target);
        if f_mid.abs() <= tol {
            return Ok(done(mid, f_mid, evals));
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
            f_hi = f_mid;
        }
    }
    let (v, r) = if f_lo.abs() < f_hi.abs() {
        (lo, f_lo)
    } else {
        (hi, f_hi)
    };
    Err(Error::Calibration(format!(
        "no value within {tol} after {evals} evaluations (closest {v}: {})",
        r + target
    )))
}
