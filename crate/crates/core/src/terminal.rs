//! Terminal ingredients: the local law `κ_f(x) = K(x − x_s) + u_s`, the terminal
//! weight `P` and the level `α` of `X_f = {x : ‖x − x_s‖²_P ≤ α}`.
//!
//! `P` comes from a Lyapunov equation on the closed-loop linearization with the
//! right-hand side inflated by `1 + ε`; `α` is bisected against sampled checks of
//! admissibility, invariance and the terminal decrease condition
//! `l_f(f(x,κ_f)) − l_f(x) ≤ −l(x,κ_f) − (N−1)δ(x,κ_f) − γ(x)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::CostSuite;
use crate::dynamics::SystemModel;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{
    eigenvalue_moduli, is_symmetric_positive_definite, lqr_gain, solve_discrete_lyapunov,
    spectral_radius,
};
use crate::sampling::{unit_ball_samples, EllipsoidMap};
use crate::scalar::{
    matrix_from_rows, matrix_to_rows, vector_from_f64, vector_to_f64, Matrix, Scalar, Vector,
};

/// Slack allowed on every sampled check; the steady state itself meets the
/// decrease condition with equality.
pub const VERIFY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalIngredients<T: Scalar> {
    pub k_gain: Matrix<T>,
    pub p_matrix: Matrix<T>,
    pub alpha: T,
    pub xs: Vector<T>,
    pub us: Vector<T>,
    pub verified: Option<TerminalVerdict>,
}

impl<T: Scalar> TerminalIngredients<T> {
    /// `κ_f(x) = K(x − x_s) + u_s`.
    pub fn kappa_f(&self, x: &Vector<T>) -> Vector<T> {
        &self.k_gain * (x - &self.xs) + &self.us
    }

    /// `l_f(x) = ‖x − x_s‖²_P`.
    pub fn level(&self, x: &Vector<T>) -> T {
        let d = x - &self.xs;
        (d.transpose() * &self.p_matrix * &d)[(0, 0)]
    }

    pub fn level_gradient(&self, x: &Vector<T>) -> Vector<T> {
        &self.p_matrix * (x - &self.xs) * T::lit(2.0)
    }

    pub fn contains(&self, x: &Vector<T>, tol: T) -> bool {
        self.level(x) <= self.alpha + tol
    }

    pub fn to_document(&self) -> TerminalDocument {
        TerminalDocument {
            k_gain: matrix_to_rows(&self.k_gain),
            p_matrix: matrix_to_rows(&self.p_matrix),
            alpha: self.alpha.to_f64_lossy(),
            xs: vector_to_f64(&self.xs),
            us: vector_to_f64(&self.us),
            verified: self.verified.clone(),
        }
    }

    pub fn from_document(doc: &TerminalDocument) -> Result<Self> {
        let ragged = |what: &str| Error::invalid(format!("{what} is not a rectangular matrix"));
        let k_gain: Matrix<T> = matrix_from_rows(&doc.k_gain).ok_or_else(|| ragged("k_gain"))?;
        let p_matrix: Matrix<T> =
            matrix_from_rows(&doc.p_matrix).ok_or_else(|| ragged("p_matrix"))?;
        let xs = vector_from_f64(&doc.xs);
        let us = vector_from_f64(&doc.us);
        check_dim("k_gain rows", us.len(), k_gain.nrows())?;
        check_dim("k_gain columns", xs.len(), k_gain.ncols())?;
        if !is_symmetric_positive_definite(&p_matrix) {
            return Err(Error::invalid(
                "p_matrix must be symmetric positive definite",
            ));
        }
        check_dim("p_matrix", xs.len(), p_matrix.nrows())?;
        if !(doc.alpha > 0.0) {
            return Err(Error::invalid("alpha must be positive"));
        }
        Ok(Self {
            k_gain,
            p_matrix,
            alpha: T::lit(doc.alpha),
            xs,
            us,
            verified: doc.verified.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(json)?)
    }
}

/// JSON form of [`TerminalIngredients`]; matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalDocument {
    pub k_gain: Vec<Vec<f64>>,
    pub p_matrix: Vec<Vec<f64>>,
    pub alpha: f64,
    pub xs: Vec<f64>,
    pub us: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verified: Option<TerminalVerdict>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalCheck {
    /// `x ∈ X` and `κ_f(x) ∈ U`.
    Admissibility,
    /// `f(x, κ_f(x)) ∈ X_f`.
    Invariance,
    /// The terminal decrease inequality.
    Decrease,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub check: TerminalCheck,
    pub x: Vec<f64>,
    pub margin: f64,
}

/// Outcome of [`verify_terminal`]: minimum margin of each check over the samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalVerdict {
    pub n_samples: usize,
    pub seed: u64,
    pub admissibility_margin: f64,
    pub invariance_margin: f64,
    pub decrease_margin: f64,
    pub passed: bool,
    /// Sample with the most negative margin (relative to its check) when a check fails.
    pub worst: Option<Counterexample>,
}

impl TerminalVerdict {
    pub fn into_result(self) -> Result<Self> {
        if self.passed {
            Ok(self)
        } else {
            let w = self
                .worst
                .as_ref()
                .expect("failed verdict carries a counterexample");
            Err(Error::Verification(format!(
                "{:?} check violated at x = {:?} (margin {:.3e})",
                w.check, w.x, w.margin
            )))
        }
    }
}

/// Margins `[admissibility, invariance, decrease]` at one point; each is
/// nonnegative when its check holds.
pub fn terminal_margins<T: Scalar>(
    model: &SystemModel<T>,
    costs: &CostSuite<T>,
    ingredients: &TerminalIngredients<T>,
    n_horizon: usize,
    x: &Vector<T>,
) -> [T; 3] {
    let u = ingredients.kappa_f(x);
    let (g, h) = model.input_set.as_inequalities();
    let input_slack = (h - g * &u).min();
    let sb = &model.state_box;
    let state_slack = (x - &sb.lower).min().min((&sb.upper - x).min());
    let next = model.dynamics().eval(x, &u);
    let lf_next = ingredients.level(&next);
    let invariance = ingredients.alpha - lf_next;
    let rhs = costs.stage(x, &u)
        + T::of_usize(n_horizon.saturating_sub(1)) * costs.delta(x, &u)
        + costs.gamma(x);
    let decrease = -(lf_next - ingredients.level(x) + rhs);
    [input_slack.min(state_slack), invariance, decrease]
}

/// Sampling options for synthesis and verification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerminalOptions {
    /// Inflation `ε` of the Lyapunov right-hand side.
    pub epsilon: f64,
    /// Samples used by the final verification.
    pub n_samples: usize,
    /// Samples per bisection step.
    pub bisection_samples: usize,
    pub bisection_steps: usize,
    pub seed: u64,
}

impl Default for TerminalOptions {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            n_samples: 10_000,
            bisection_samples: 2_000,
            bisection_steps: 40,
            seed: 0,
        }
    }
}

fn sample_margins<T: Scalar>(
    model: &SystemModel<T>,
    costs: &CostSuite<T>,
    ingredients: &TerminalIngredients<T>,
    n_horizon: usize,
    samples: &[Vec<f64>],
) -> Result<Vec<(Vector<T>, [T; 3])>> {
    let map = EllipsoidMap::new(ingredients.xs.clone(), &ingredients.p_matrix)
        .ok_or_else(|| Error::Synthesis("P is not positive definite".into()))?;
    Ok(samples
        .par_iter()
        .map(|w| {
            let x = map.point(w, ingredients.alpha);
            let m = terminal_margins(model, costs, ingredients, n_horizon, &x);
            (x, m)
        })
        .collect())
}

fn summarize<T: Scalar>(
    margins: &[(Vector<T>, [T; 3])],
    n_samples: usize,
    seed: u64,
) -> TerminalVerdict {
    let tol = T::lit(VERIFY_TOL);
    let mut mins = [T::infinity(); 3];
    let mut worst: Option<(usize, usize, T)> = None;
    for (i, (_, m)) in margins.iter().enumerate() {
        for c in 0..3 {
            mins[c] = mins[c].min(m[c]);
            if m[c] < -tol && worst.is_none_or(|(_, _, w)| m[c] < w) {
                worst = Some((i, c, m[c]));
            }
        }
    }
    let checks = [
        TerminalCheck::Admissibility,
        TerminalCheck::Invariance,
        TerminalCheck::Decrease,
    ];
    TerminalVerdict {
        n_samples,
        seed,
        admissibility_margin: mins[0].to_f64_lossy(),
        invariance_margin: mins[1].to_f64_lossy(),
        decrease_margin: mins[2].to_f64_lossy(),
        passed: worst.is_none(),
        worst: worst.map(|(i, c, m)| Counterexample {
            check: checks[c],
            x: vector_to_f64(&margins[i].0),
            margin: m.to_f64_lossy(),
        }),
    }
}

/// Checks admissibility, invariance and the decrease condition on `n_samples`
/// points of `X_f`: half on the boundary, half in the interior. Samples are drawn
/// from `seed` before being spread over worker threads, so the verdict does not
/// depend on the thread count.
pub fn verify_terminal<T: Scalar>(
    model: &SystemModel<T>,
    costs: &CostSuite<T>,
    ingredients: &TerminalIngredients<T>,
    n_horizon: usize,
    n_samples: usize,
    seed: u64,
) -> Result<TerminalVerdict> {
    if n_samples == 0 {
        return Err(Error::usage("verification needs at least one sample"));
    }
    let boundary = n_samples / 2;
    let samples = unit_ball_samples(seed, model.n_x(), boundary, n_samples - boundary);
    let margins = sample_margins(model, costs, ingredients, n_horizon, &samples)?;
    Ok(summarize(&margins, n_samples, seed))
}

/// Largest `α` for which the ellipsoid stays inside every linear constraint:
/// `cᵀ(x − x_s) ≤ b` holds on `X_f` iff `α ≤ b² / (cᵀP⁻¹c)`.
fn linear_alpha_bound<T: Scalar>(
    model: &SystemModel<T>,
    k: &Matrix<T>,
    p_inv: &Matrix<T>,
    xs: &Vector<T>,
    us: &Vector<T>,
) -> Result<T> {
    let n = model.n_x();
    let mut rows: Vec<(Vector<T>, T)> = Vec::new();
    for i in 0..n {
        let mut e = Vector::zeros(n);
        e[i] = T::one();
        rows.push((e.clone(), model.state_box.upper[i] - xs[i]));
        rows.push((-e, xs[i] - model.state_box.lower[i]));
    }
    let (g, h) = model.input_set.as_inequalities();
    for r in 0..g.nrows() {
        let a = g.row(r).transpose();
        rows.push((k.transpose() * &a, h[r] - a.dot(us)));
    }
    let mut alpha = T::infinity();
    for (c, b) in rows {
        let spread = c.dot(&(p_inv * &c));
        if spread <= T::zero() {
            if b < T::zero() {
                return Err(Error::Synthesis(
                    "steady state violates a constant constraint".into(),
                ));
            }
            continue;
        }
        if b <= T::zero() {
            return Err(Error::Synthesis(
                "steady state lies on the boundary of X or U; no terminal set with α > 0 exists"
                    .into(),
            ));
        }
        alpha = alpha.min(b * b / spread);
    }
    Ok(alpha)
}

/// Synthesizes `(K, P, α)` around `(costs.xs, costs.us)`.
///
/// `k_gain = None` uses the LQR gain of the linearization with the tracking weights.
pub fn synthesize_terminal<T: Scalar>(
    model: &SystemModel<T>,
    costs: &CostSuite<T>,
    k_gain: Option<Matrix<T>>,
    n_horizon: usize,
    opts: &TerminalOptions,
) -> Result<TerminalIngredients<T>> {
    if n_horizon == 0 {
        return Err(Error::usage("horizon must be at least 1"));
    }
    let (xs, us) = (costs.xs.clone(), costs.us.clone());
    let (a, b) = model.jacobians(&xs, &us)?;
    let q = &costs.weights.q;
    let r = &costs.weights.r;
    let k = match k_gain {
        Some(k) => {
            check_dim("K rows", model.n_u(), k.nrows())?;
            check_dim("K columns", model.n_x(), k.ncols())?;
            k
        }
        None => lqr_gain(&a, &b, q, r)?,
    };
    let a_cl = &a + &b * &k;
    let rho = spectral_radius(&a_cl);
    if !(rho < T::one()) {
        return Err(Error::Synthesis(format!(
            "closed-loop linearization is not Schur stable: spectral radius {rho}, eigenvalue moduli {:?}",
            eigenvalue_moduli(&a_cl)
        )));
    }
    let n = model.n_x();
    let ident = Matrix::<T>::identity(n, n);
    let horizon_weight = T::of_usize(n_horizon - 1) * costs.penalties.delta_coeff;
    let w = q
        + k.transpose() * r * &k
        + (&ident + k.transpose() * &k) * horizon_weight
        + &ident * costs.penalties.gamma_coeff;
    let w = w * (T::one() + T::lit(opts.epsilon));
    let p = solve_discrete_lyapunov(&a_cl, &w)?;
    if !is_symmetric_positive_definite(&p) {
        return Err(Error::Synthesis(
            "Lyapunov solution is not positive definite".into(),
        ));
    }
    let p_inv = p
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Synthesis("P is singular".into()))?;
    let alpha_max = linear_alpha_bound(model, &k, &p_inv, &xs, &us)?;

    let mut ingredients = TerminalIngredients {
        k_gain: k,
        p_matrix: p,
        alpha: alpha_max,
        xs,
        us,
        verified: None,
    };
    let half = opts.bisection_samples / 2;
    let bisection_set = unit_ball_samples(
        opts.seed.wrapping_add(1),
        n,
        half,
        opts.bisection_samples - half,
    );
    let mut passes = |alpha: T| -> Result<TerminalVerdict> {
        ingredients.alpha = alpha;
        let m = sample_margins(model, costs, &ingredients, n_horizon, &bisection_set)?;
        Ok(summarize(
            &m,
            bisection_set.len(),
            opts.seed.wrapping_add(1),
        ))
    };
    let mut alpha = alpha_max;
    let first = passes(alpha_max)?;
    if !first.passed {
        let (mut lo, mut hi) = (T::zero(), alpha_max);
        let mut last_fail = first;
        for _ in 0..opts.bisection_steps {
            let mid = (lo + hi) * T::lit(0.5);
            let v = passes(mid)?;
            if v.passed {
                lo = mid;
            } else {
                hi = mid;
                last_fail = v;
            }
        }
        if !(lo > T::zero()) {
            return Err(Error::Synthesis(format!(
                "no positive terminal level passes the sampled checks; worst {:?}",
                last_fail.worst
            )));
        }
        alpha = lo;
    }
    ingredients.alpha = alpha;
    for _ in 0..20 {
        let verdict = verify_terminal(
            model,
            costs,
            &ingredients,
            n_horizon,
            opts.n_samples,
            opts.seed,
        )?;
        if verdict.passed {
            ingredients.verified = Some(verdict);
            return Ok(ingredients);
        }
        log::debug!(
            "terminal level {} failed verification, shrinking",
            ingredients.alpha
        );
        ingredients.alpha *= T::lit(0.9);
    }
    let verdict = verify_terminal(
        model,
        costs,
        &ingredients,
        n_horizon,
        opts.n_samples,
        opts.seed,
    )?;
    Err(Error::Synthesis(format!(
        "terminal level could not be verified; worst {:?}",
        verdict.worst
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::{EconomicCostParams, PenaltySpec, TrackingWeights};
    use crate::dynamics::{AffineBilinearModel, InputSet, LinearDynamics, StateBox};
    use crate::equilibrium::solve_steady_state;
    use std::sync::Arc;

    pub(crate) fn paper_k() -> Matrix<f64> {
        Matrix::from_row_slice(2, 2, &[0.6947, 0.0059, 0.0061, 0.6818])
    }

    fn case() -> (SystemModel<f64>, CostSuite<f64>) {
        let model = AffineBilinearModel::<f64>::printed()
            .into_system(None)
            .unwrap();
        let econ = EconomicCostParams::hvac_default();
        let s = solve_steady_state(&model, &econ).unwrap();
        let costs = CostSuite::new(
            TrackingWeights::identity(2, 2),
            PenaltySpec::default(),
            econ,
            s.xs,
            s.us,
        )
        .unwrap();
        (model, costs)
    }

    fn quick() -> TerminalOptions {
        TerminalOptions {
            n_samples: 2_000,
            bisection_samples: 500,
            ..Default::default()
        }
    }

    #[test]
    fn scalar_lyapunov_case() {
        let dynamics = LinearDynamics::new(
            Matrix::from_element(1, 1, 0.5),
            Matrix::from_element(1, 1, 1.0),
            Vector::zeros(1),
        )
        .unwrap();
        let bounds = |v: f64| Vector::from_element(1, v);
        let model = SystemModel::new(
            Arc::new(dynamics),
            StateBox::new(bounds(-10.0), bounds(10.0)).unwrap(),
            InputSet::new(
                Matrix::zeros(0, 1),
                Vector::zeros(0),
                bounds(-1.0),
                bounds(1.0),
            )
            .unwrap(),
            vec![bounds(0.0)],
            1.0,
        )
        .unwrap();
        let econ = EconomicCostParams::new(0.0, 1.0, 1.0, bounds(0.0), bounds(0.0), 1.0).unwrap();
        let costs = CostSuite::new(
            TrackingWeights::identity(1, 1),
            PenaltySpec::new_unchecked(0.0, 0.0),
            econ,
            bounds(0.0),
            bounds(0.0),
        )
        .unwrap();
        let t =
            synthesize_terminal(&model, &costs, Some(Matrix::zeros(1, 1)), 7, &quick()).unwrap();
        assert!((t.p_matrix[(0, 0)] - 1.1 / 0.75).abs() < 1e-12);
        let exact = synthesize_terminal(
            &model,
            &costs,
            Some(Matrix::zeros(1, 1)),
            7,
            &TerminalOptions {
                epsilon: 0.0,
                ..quick()
            },
        )
        .unwrap();
        assert!((exact.p_matrix[(0, 0)] - 1.0 / 0.75).abs() < 1e-12);
        // Equality of the decrease condition for the linear model at ε = 0.
        let m = terminal_margins(&model, &costs, &exact, 7, &bounds(0.3));
        assert!(m[2].abs() < 1e-12);
    }

    #[test]
    fn paper_gain_synthesizes_and_verifies() {
        let (model, costs) = case();
        let t = synthesize_terminal(&model, &costs, Some(paper_k()), 5, &quick()).unwrap();
        let (a, b) = model.jacobians(&costs.xs, &costs.us).unwrap();
        assert!(spectral_radius(&(a + b * &t.k_gain)) < 1.0);
        assert!(t.alpha > 0.0);
        assert!(t.verified.as_ref().unwrap().passed);
        assert_eq!(t.kappa_f(&t.xs), t.us);
    }

    #[test]
    fn steady_state_margins() {
        let (model, costs) = case();
        let t = synthesize_terminal(&model, &costs, Some(paper_k()), 5, &quick()).unwrap();
        let m = terminal_margins(&model, &costs, &t, 5, &t.xs);
        assert!(m[0] > 0.0 && m[1] > 0.0);
        assert!(m[2].abs() <= 1e-12);
    }

    #[test]
    fn inflated_level_breaks_admissibility() {
        let (model, costs) = case();
        let mut t = synthesize_terminal(&model, &costs, Some(paper_k()), 5, &quick()).unwrap();
        t.alpha *= 100.0;
        let v = verify_terminal(&model, &costs, &t, 5, 2_000, 3).unwrap();
        assert!(!v.passed);
        assert!(v.admissibility_margin < 0.0);
        assert!(v.into_result().is_err());
    }

    #[test]
    fn unstable_gain_is_rejected() {
        let (model, costs) = case();
        let bad = Matrix::from_row_slice(2, 2, &[-20.0, 0.0, 0.0, -20.0]);
        let err = synthesize_terminal(&model, &costs, Some(bad), 5, &quick()).unwrap_err();
        assert!(matches!(err, Error::Synthesis(_)));
    }

    #[test]
    fn lqr_default_gain_works() {
        let (model, costs) = case();
        let t = synthesize_terminal(&model, &costs, None, 5, &quick()).unwrap();
        assert!(t.verified.unwrap().passed);
    }

    #[test]
    fn json_round_trip() {
        let (model, costs) = case();
        let t = synthesize_terminal(&model, &costs, Some(paper_k()), 5, &quick()).unwrap();
        let back = TerminalIngredients::<f64>::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
        let doc: serde_json::Value = serde_json::from_str(&t.to_json().unwrap()).unwrap();
        assert_eq!(doc["k_gain"][0][1], 0.0059);
    }

    #[test]
    fn verification_is_independent_of_thread_count() {
        let (model, costs) = case();
        let t = synthesize_terminal(&model, &costs, Some(paper_k()), 5, &quick()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let single = pool.install(|| verify_terminal(&model, &costs, &t, 5, 3_000, 11).unwrap());
        let many = verify_terminal(&model, &costs, &t, 5, 3_000, 11).unwrap();
        assert_eq!(single, many);
    }
}
