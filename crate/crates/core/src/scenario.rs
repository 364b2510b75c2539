//! JSON scenario documents and the case-study pipeline built from them:
//! model, steady state, costs, terminal ingredients, `V_max`, runs and
//! `κ̄` calibration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{ControllerConfig, Scheme};
use crate::costs::{CostSuite, EconomicCostParams, PenaltySpec, TrackingWeights};
use crate::dynamics::{
    discretize_rc_with, AffineBilinearModel, Discretization, StateBox, SystemModel,
    TwoZoneHvacParams,
};
use crate::equilibrium::{solve_steady_state, SteadyState};
use crate::error::{Error, Result};
use crate::harness::{
    self, monitor_suite, Calibration, MonitorReport, MonitorToggles, SimConfig, SimLog,
};
use crate::nlp::{compute_v_max, SolverOptions, VMaxBound};
use crate::scalar::{matrix_from_rows, vector_from_f64, Matrix, Vector};
use crate::terminal::{synthesize_terminal, TerminalIngredients, TerminalOptions};

/// Terminal gain reported for the case study.
pub const PAPER_K: [[f64; 2]; 2] = [[0.6947, 0.0059], [0.0061, 0.6818]];

fn scenario_err(path: &str, message: impl Into<String>) -> Error {
    Error::Scenario {
        path: path.into(),
        message: message.into(),
    }
}

fn matrix(path: &str, rows: &[Vec<f64>], n: usize, m: usize) -> Result<Matrix<f64>> {
    let a = matrix_from_rows(rows).ok_or_else(|| scenario_err(path, "ragged matrix"))?;
    if a.nrows() != n || a.ncols() != m {
        return Err(scenario_err(
            path,
            format!("expected {n}×{m}, got {}×{}", a.nrows(), a.ncols()),
        ));
    }
    Ok(a)
}

fn vector(path: &str, v: &[f64], n: usize) -> Result<Vector<f64>> {
    if v.len() != n {
        return Err(scenario_err(
            path,
            format!("expected {n} entries, got {}", v.len()),
        ));
    }
    Ok(vector_from_f64(v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSource {
    /// Published rounded discrete model with the given input offset.
    Printed { offset: f64 },
    /// Discretized from physical parameters.
    Rc {
        #[serde(default)]
        params: TwoZoneHvacParams,
        #[serde(default)]
        discretization: Discretization,
    },
    /// `x⁺ = A x + diag(g_i (o_i − x_i)) u + d`.
    Explicit {
        a: Vec<Vec<f64>>,
        g: Vec<f64>,
        offset: Vec<f64>,
        d: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelBlock {
    pub source: ModelSource,
    pub state_lower: Vec<f64>,
    pub state_upper: Vec<f64>,
    pub flow_cap: f64,
    pub setpoint: Vec<f64>,
    pub dt_seconds: f64,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            source: ModelSource::Printed { offset: 15.0 },
            state_lower: vec![15.0, 15.0],
            state_upper: vec![35.0, 35.0],
            flow_cap: 3.2,
            setpoint: vec![24.0, 25.0],
            dt_seconds: 600.0,
        }
    }
}

impl ModelBlock {
    pub fn build(&self) -> Result<SystemModel<f64>> {
        let abm = match &self.source {
            ModelSource::Printed { offset } => AffineBilinearModel::printed_with_offset(*offset),
            ModelSource::Rc {
                params,
                discretization,
            } => discretize_rc_with(params, *discretization)?,
            ModelSource::Explicit { a, g, offset, d } => {
                let n = a.len();
                AffineBilinearModel::new(
                    matrix("model.a", a, n, n)?,
                    vector("model.g", g, n)?,
                    vector("model.offset", offset, n)?,
                    vector("model.d", d, n)?,
                )?
            }
        };
        let n = abm.zones();
        let bx = StateBox::new(
            vector("model.state_lower", &self.state_lower, n)?,
            vector("model.state_upper", &self.state_upper, n)?,
        )?;
        abm.into_system_with(
            bx,
            self.flow_cap,
            vector("model.setpoint", &self.setpoint, n)?,
            self.dt_seconds,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostBlock {
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub kappa_bar: f64,
    pub eta_c: f64,
    pub eta_h: f64,
    pub th: Vec<f64>,
    pub ts: Vec<f64>,
    pub cp: f64,
    pub delta_coeff: f64,
    pub gamma_coeff: f64,
}

impl Default for CostBlock {
    fn default() -> Self {
        Self {
            q: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            r: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            kappa_bar: 1.0,
            eta_c: 4.0,
            eta_h: 0.9,
            th: vec![32.0, 32.0],
            ts: vec![15.0, 15.0],
            cp: 1.012,
            delta_coeff: 1e-4,
            gamma_coeff: 1e-4,
        }
    }
}

impl CostBlock {
    pub fn economic(&self, n: usize) -> Result<EconomicCostParams<f64>> {
        EconomicCostParams::new(
            self.kappa_bar,
            self.eta_c,
            self.eta_h,
            vector("costs.th", &self.th, n)?,
            vector("costs.ts", &self.ts, n)?,
            self.cp,
        )
    }

    fn suite(&self, n_x: usize, n_u: usize, steady: &SteadyState<f64>) -> Result<CostSuite<f64>> {
        let q = matrix("costs.q", &self.q, n_x, n_x)?;
        let weights = TrackingWeights::new(q.clone(), matrix("costs.r", &self.r, n_u, n_u)?, q)?;
        CostSuite::new(
            weights,
            PenaltySpec::new(self.delta_coeff, self.gamma_coeff)?,
            self.economic(n_x)?,
            steady.xs.clone(),
            steady.us.clone(),
        )
    }
}

/// `"synthesize"` (LQR gain) or an explicit matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GainSpec {
    Keyword(String),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerminalBlock {
    pub gain: GainSpec,
    pub options: TerminalOptions,
}

impl Default for TerminalBlock {
    fn default() -> Self {
        Self {
            gain: GainSpec::Matrix(PAPER_K.iter().map(|r| r.to_vec()).collect()),
            options: TerminalOptions::default(),
        }
    }
}

impl TerminalBlock {
    fn gain(&self, n_u: usize, n_x: usize) -> Result<Option<Matrix<f64>>> {
        match &self.gain {
            GainSpec::Keyword(k) if k == "synthesize" => Ok(None),
            GainSpec::Keyword(k) => Err(scenario_err(
                "terminal.gain",
                format!("unknown keyword {k:?}"),
            )),
            GainSpec::Matrix(rows) => matrix("terminal.gain", rows, n_u, n_x).map(Some),
        }
    }
}

/// One controller of a comparison. `beta` is optional so that its absence
/// can be reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerBlock {
    pub scheme: Scheme,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_max: Option<f64>,
}

fn default_horizon() -> usize {
    5
}
fn default_m() -> usize {
    1
}
fn default_tau() -> f64 {
    0.6
}

impl ControllerBlock {
    pub fn new(scheme: Scheme, m: usize) -> Self {
        Self {
            scheme,
            horizon: default_horizon(),
            m,
            beta: Some(1.0),
            tau: default_tau(),
            v_max: None,
        }
    }

    pub fn config(&self) -> ControllerConfig {
        let beta = self.beta.unwrap_or_else(|| {
            log::info!("controller {:?}: beta not given, using 1", self.scheme);
            1.0
        });
        ControllerConfig {
            scheme: self.scheme,
            horizon: self.horizon,
            m: self.m,
            beta,
            tau: self.tau,
            v_max: self.v_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimBlock {
    pub x0: Vec<f64>,
    pub steps: usize,
    pub seed: u64,
}

impl Default for SimBlock {
    fn default() -> Self {
        Self {
            x0: vec![31.0, 30.0],
            steps: 144,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VMaxBlock {
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for VMaxBlock {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            seed: 0,
        }
    }
}

/// A complete experiment. Every block defaults to the published case study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub model: ModelBlock,
    pub costs: CostBlock,
    pub terminal: TerminalBlock,
    pub controllers: Vec<ControllerBlock>,
    pub sim: SimBlock,
    pub solver: SolverOptions,
    pub monitors: MonitorToggles,
    pub v_max: VMaxBlock,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            model: ModelBlock::default(),
            costs: CostBlock::default(),
            terminal: TerminalBlock::default(),
            controllers: vec![
                ControllerBlock::new(Scheme::Tracking, 1),
                ControllerBlock::new(Scheme::Alg1, 1),
                ControllerBlock::new(Scheme::Alg2, 4),
                ControllerBlock::new(Scheme::Alg2, 8),
            ],
            sim: SimBlock::default(),
            solver: SolverOptions::default(),
            monitors: MonitorToggles::default(),
            v_max: VMaxBlock::default(),
            output_dir: None,
        }
    }
}

impl Scenario {
    /// Parses a scenario; errors carry the JSON path and line/column.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let s: Scenario = serde_path_to_error::deserialize(de)
            .map_err(|e| scenario_err(&e.path().to_string(), e.inner().to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sim.steps == 0 {
            return Err(scenario_err("sim.steps", "must be at least 1"));
        }
        PenaltySpec::new(self.costs.delta_coeff, self.costs.gamma_coeff)
            .map_err(|e| scenario_err("costs.delta_coeff", e.to_string()))?;
        if !(self.solver.feas_tol > 0.0) {
            return Err(scenario_err("solver.feas_tol", "must be positive"));
        }
        for (i, c) in self.controllers.iter().enumerate() {
            c.config()
                .validate()
                .map_err(|e| scenario_err(&format!("controllers[{i}]"), e.to_string()))?;
        }
        Ok(())
    }

    pub fn sim_config(&self, controller: ControllerConfig) -> SimConfig {
        SimConfig {
            x0: self.sim.x0.clone(),
            steps: self.sim.steps,
            controller,
            solver: self.solver,
            monitors: self.monitors,
            seed: self.sim.seed,
        }
    }
}

/// Everything a simulation needs, derived from a [`Scenario`].
#[derive(Debug, Clone)]
pub struct CaseStudy {
    pub model: SystemModel<f64>,
    pub steady: SteadyState<f64>,
    pub costs: CostSuite<f64>,
    pub terminal: TerminalIngredients<f64>,
    pub v_max: VMaxBound<f64>,
    pub horizon: usize,
}

impl CaseStudy {
    /// Builds model, steady state, costs (with `P` as terminal weight),
    /// verified terminal ingredients and the `V_max` bound. All controllers of
    /// the scenario must share one horizon.
    pub fn build(scenario: &Scenario) -> Result<Self> {
        let horizon = match scenario.controllers.first() {
            Some(c) => c.horizon,
            None => default_horizon(),
        };
        if scenario.controllers.iter().any(|c| c.horizon != horizon) {
            return Err(scenario_err(
                "controllers",
                "all controllers must use the same horizon",
            ));
        }
        let model = scenario.model.build()?;
        let econ = scenario.costs.economic(model.n_x())?;
        let steady = solve_steady_state(&model, &econ)?;
        let mut costs = scenario.costs.suite(model.n_x(), model.n_u(), &steady)?;
        let gain = scenario.terminal.gain(model.n_u(), model.n_x())?;
        let mut topts = scenario.terminal.options;
        topts.seed = topts.seed.wrapping_add(scenario.sim.seed);
        let terminal = synthesize_terminal(&model, &costs, gain, horizon, &topts)?;
        costs.weights = costs.weights.with_terminal(terminal.p_matrix.clone())?;
        let v_max = compute_v_max(
            &model,
            &costs,
            &terminal,
            horizon,
            scenario.v_max.n_samples,
            scenario.v_max.seed.wrapping_add(scenario.sim.seed),
        )?;
        Ok(Self {
            model,
            steady,
            costs,
            terminal,
            v_max,
            horizon,
        })
    }

    /// Same case with a different fan-power coefficient. Only the economic
    /// cost depends on `κ̄`.
    pub fn with_kappa(&self, kappa_bar: f64) -> Self {
        let mut c = self.clone();
        c.costs.economic = c.costs.economic.clone().with_kappa(kappa_bar);
        c.steady.cost = c.costs.steady_economic();
        c
    }

    pub fn simulate(&self, config: &SimConfig) -> Result<SimLog<f64>> {
        harness::simulate(
            &self.model,
            &self.costs,
            &self.terminal,
            self.v_max.bound,
            config,
        )
    }
}

/// Completed (possibly aborted) run with its monitor report.
#[derive(Debug, Clone)]
pub struct Run {
    pub log: SimLog<f64>,
    pub report: MonitorReport,
}

/// Runs every controller of `scenario` on `case`, at most `jobs` at a time.
/// Results are in scenario order.
pub fn run_all(case: &CaseStudy, scenario: &Scenario, jobs: usize) -> Result<Vec<Result<Run>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    Ok(pool.install(|| {
        scenario
            .controllers
            .par_iter()
            .map(|c| {
                let log = case.simulate(&scenario.sim_config(c.config()))?;
                let report = monitor_suite(&log);
                Ok(Run { log, report })
            })
            .collect()
    }))
}

/// Lower and upper end of the `κ̄` search interval.
pub const KAPPA_BRACKET: (f64, f64) = (0.0, 10.0);
/// Energy tolerance of the calibration, kWh.
pub const KAPPA_TOL_KWH: f64 = 0.5;

/// Bisection on `κ̄` so that the 24 h energy of the first `alg1` controller
/// matches `target_kwh`.
pub fn calibrate_kappa(
    case: &CaseStudy,
    scenario: &Scenario,
    target_kwh: f64,
) -> Result<Calibration> {
    let block = scenario
        .controllers
        .iter()
        .find(|c| c.scheme == Scheme::Alg1)
        .ok_or_else(|| scenario_err("controllers", "calibration needs an alg1 controller"))?;
    let config = scenario.sim_config(block.config());
    harness::calibrate(
        |kappa| {
            let log = case.with_kappa(kappa).simulate(&config)?;
            if let Some(a) = &log.abort {
                return Err(Error::Calibration(format!(
                    "alg1 run aborted at κ̄ = {kappa}: {}",
                    a.message
                )));
            }
            Ok(log.total_kwh())
        },
        target_kwh,
        KAPPA_BRACKET,
        KAPPA_TOL_KWH,
        60,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_paper_setup() {
        let s = Scenario::from_json("{}").unwrap();
        assert_eq!(s, Scenario::default());
        assert_eq!(s.sim.x0, vec![31.0, 30.0]);
        assert_eq!(s.controllers.len(), 4);
        assert_eq!(s.controllers[3].m, 8);
    }

    #[test]
    fn round_trip_is_identity() {
        let mut s = Scenario::default();
        s.controllers[1].beta = None;
        s.terminal.gain = GainSpec::Keyword("synthesize".into());
        s.model.source = ModelSource::Rc {
            params: TwoZoneHvacParams::default(),
            discretization: Discretization::ZeroOrderHold,
        };
        let back = Scenario::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn errors_name_the_field() {
        let err = Scenario::from_json(r#"{"sim": {"steps": "many"}}"#).unwrap_err();
        match err {
            Error::Scenario { path, message } => {
                assert_eq!(path, "sim.steps");
                assert!(message.contains("line 1"));
            }
            e => panic!("unexpected {e:?}"),
        }
        let err = Scenario::from_json(r#"{"costs": {"delta_coeff": 0.0}}"#).unwrap_err();
        assert!(matches!(err, Error::Scenario { ref path, .. } if path == "costs.delta_coeff"));
        assert!(Scenario::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn missing_beta_defaults_to_one() {
        let s = Scenario::from_json(r#"{"controllers": [{"scheme": "alg1"}]}"#).unwrap();
        assert_eq!(s.controllers[0].beta, None);
        assert_eq!(s.controllers[0].config().beta, 1.0);
        assert_eq!(s.controllers[0].horizon, 5);
    }

    #[test]
    fn explicit_model_matches_printed() {
        let s = Scenario::from_json(
            r#"{"model": {"source": {"kind": "explicit", "a": [[0.994, 0.0047], [0.0047, 0.994]],
                "g": [0.0663, 0.0663], "offset": [15, 15], "d": [0.3038, 0.3038]}}}"#,
        )
        .unwrap();
        let m = s.model.build().unwrap();
        let p = ModelBlock::default().build().unwrap();
        let x = vector_from_f64(&[27.0, 26.0]);
        let u = vector_from_f64(&[0.7, 0.3]);
        assert_eq!(m.step(&x, &u).unwrap(), p.step(&x, &u).unwrap());
        let bad = r#"{"model": {"source": {"kind": "explicit", "a": [[1.0]], "g": [1, 1], "offset": [15], "d": [0]}}}"#;
        assert!(Scenario::from_json(bad).unwrap().model.build().is_err());
    }
}
