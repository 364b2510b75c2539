//! Stage and trajectory costs: electrical power of the air-handling unit, the
//! quadratic tracking costs around the steady state, the δ/γ penalties, and the
//! value functions built from them.

use crate::dynamics::SystemModel;
use crate::error::{check_dim, Error, Result};
use crate::linalg::is_symmetric_positive_definite;
use crate::scalar::{Matrix, Scalar, Vector};

/// `Q`, `R` (stage) and `P` (terminal) weights of the tracking costs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingWeights<T: Scalar> {
    pub q: Matrix<T>,
    pub r: Matrix<T>,
    pub p: Matrix<T>,
}

impl<T: Scalar> TrackingWeights<T> {
    pub fn new(q: Matrix<T>, r: Matrix<T>, p: Matrix<T>) -> Result<Self> {
        for (name, m) in [("Q", &q), ("R", &r), ("P", &p)] {
            if !is_symmetric_positive_definite(m) {
                return Err(Error::invalid(format!(
                    "{name} must be symmetric positive definite"
                )));
            }
        }
        check_dim("P rows", q.nrows(), p.nrows())?;
        Ok(Self { q, r, p })
    }

    /// `Q = I`, `R = I`, `P = I`.
    pub fn identity(n_x: usize, n_u: usize) -> Self {
        Self {
            q: Matrix::identity(n_x, n_x),
            r: Matrix::identity(n_u, n_u),
            p: Matrix::identity(n_x, n_x),
        }
    }

    pub fn with_terminal(mut self, p: Matrix<T>) -> Result<Self> {
        if !is_symmetric_positive_definite(&p) {
            return Err(Error::invalid("P must be symmetric positive definite"));
        }
        check_dim("P rows", self.q.nrows(), p.nrows())?;
        self.p = p;
        Ok(self)
    }
}

/// Parameters of the air-handling power model
/// `κ̄(Σu)³ + (1/η_c) Σ u_i c_p |T^s_i − x_i| + (1/η_h) Σ u_i c_p |T^h_i − x_i|`.
#[derive(Debug, Clone, PartialEq)]
pub struct EconomicCostParams<T: Scalar> {
    /// Fan-power coefficient.
    pub kappa_bar: T,
    pub eta_c: T,
    pub eta_h: T,
    /// Heating-coil set-points per zone, °C.
    pub th: Vector<T>,
    /// Supply-air temperatures per zone, °C.
    pub ts: Vector<T>,
    pub cp: T,
}

impl<T: Scalar> EconomicCostParams<T> {
    pub fn new(
        kappa_bar: T,
        eta_c: T,
        eta_h: T,
        th: Vector<T>,
        ts: Vector<T>,
        cp: T,
    ) -> Result<Self> {
        if !(eta_c > T::zero() && eta_h > T::zero()) {
            return Err(Error::invalid(
                "coil efficiencies must be strictly positive",
            ));
        }
        if !(kappa_bar >= T::zero()) {
            return Err(Error::invalid("fan-power coefficient must be nonnegative"));
        }
        check_dim("heating set-points", ts.len(), th.len())?;
        Ok(Self {
            kappa_bar,
            eta_c,
            eta_h,
            th,
            ts,
            cp,
        })
    }

    /// Case-study values: `T^h = 32 °C`, `η_c = 4`, `η_h = 0.9`, `T^s = 15 °C`,
    /// `c_p = 1.012`. `κ̄` is not published and defaults to 1.
    pub fn hvac_default() -> Self {
        Self {
            kappa_bar: T::one(),
            eta_c: T::lit(4.0),
            eta_h: T::lit(0.9),
            th: Vector::from_element(2, T::lit(32.0)),
            ts: Vector::from_element(2, T::lit(15.0)),
            cp: T::lit(1.012),
        }
    }

    pub fn with_kappa(mut self, kappa_bar: T) -> Self {
        self.kappa_bar = kappa_bar;
        self
    }

    /// True when `[T^s_i, T^h_i]` contains the whole interval `[lower_i, upper_i]`,
    /// i.e. the absolute values never change sign on that box.
    pub fn sign_resolved_on(&self, lower: &Vector<T>, upper: &Vector<T>) -> bool {
        (0..self.ts.len()).all(|i| lower[i] >= self.ts[i] && upper[i] <= self.th[i])
    }
}

/// Weights of the positive-definite penalties
/// `δ(x,u) = c_δ(‖x−x_s‖² + ‖u−u_s‖²)` and `γ(x) = c_γ‖x−x_s‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltySpec<T: Scalar> {
    pub delta_coeff: T,
    pub gamma_coeff: T,
}

impl<T: Scalar> PenaltySpec<T> {
    pub fn new(delta_coeff: T, gamma_coeff: T) -> Result<Self> {
        if !(delta_coeff > T::zero() && gamma_coeff > T::zero()) {
            return Err(Error::invalid(
                "penalty coefficients must be strictly positive (δ and γ have to be positive definite)",
            ));
        }
        Ok(Self {
            delta_coeff,
            gamma_coeff,
        })
    }

    /// Skips the positivity check. Only meaningful for analysing degenerate
    /// terminal conditions; the stability guarantees need positive coefficients.
    pub fn new_unchecked(delta_coeff: T, gamma_coeff: T) -> Self {
        Self {
            delta_coeff,
            gamma_coeff,
        }
    }
}

impl<T: Scalar> Default for PenaltySpec<T> {
    fn default() -> Self {
        Self {
            delta_coeff: T::lit(1e-4),
            gamma_coeff: T::lit(1e-4),
        }
    }
}

/// Electrical power in kW. Evaluated with the exact absolute values.
pub fn econ_stage_cost<T: Scalar>(
    params: &EconomicCostParams<T>,
    x: &Vector<T>,
    u: &Vector<T>,
) -> T {
    let total = u.sum();
    let mut cost = params.kappa_bar * total * total * total;
    for i in 0..u.len() {
        cost += u[i] * params.cp * (params.ts[i] - x[i]).abs() / params.eta_c;
        cost += u[i] * params.cp * (params.th[i] - x[i]).abs() / params.eta_h;
    }
    cost
}

/// Gradient of [`econ_stage_cost`] with respect to `(x, u)`. At the kinks
/// `x_i = T^s_i` or `x_i = T^h_i` the one-sided derivative for `x_i` above the
/// kink is returned.
pub fn econ_stage_gradient<T: Scalar>(
    params: &EconomicCostParams<T>,
    x: &Vector<T>,
    u: &Vector<T>,
) -> (Vector<T>, Vector<T>) {
    let n = u.len();
    let total = u.sum();
    let fan = T::lit(3.0) * params.kappa_bar * total * total;
    let mut gx = Vector::zeros(x.len());
    let mut gu = Vector::from_element(n, fan);
    let sign = |v: T| if v >= T::zero() { T::one() } else { -T::one() };
    for i in 0..n {
        let cool = params.ts[i] - x[i];
        let heat = params.th[i] - x[i];
        gu[i] += params.cp * cool.abs() / params.eta_c + params.cp * heat.abs() / params.eta_h;
        // d|a − x|/dx = −sign(a − x), with sign(0) taken as −1 (x just above a).
        let cool_sign = if cool == T::zero() {
            -T::one()
        } else {
            sign(cool)
        };
        let heat_sign = if heat == T::zero() {
            -T::one()
        } else {
            sign(heat)
        };
        gx[i] = -u[i] * params.cp * (cool_sign / params.eta_c + heat_sign / params.eta_h);
    }
    (gx, gu)
}

fn quad<T: Scalar>(m: &Matrix<T>, v: &Vector<T>) -> T {
    (v.transpose() * m * v)[(0, 0)]
}

/// `(l(x,u), l_f(x)) = (‖x−x_s‖²_Q + ‖u−u_s‖²_R, ‖x−x_s‖²_P)`.
pub fn tracking_costs<T: Scalar>(
    weights: &TrackingWeights<T>,
    xs: &Vector<T>,
    us: &Vector<T>,
    x: &Vector<T>,
    u: &Vector<T>,
) -> (T, T) {
    let dx = x - xs;
    let du = u - us;
    (
        quad(&weights.q, &dx) + quad(&weights.r, &du),
        quad(&weights.p, &dx),
    )
}

/// All cost ingredients around a fixed steady state `(x_s, u_s)`.
#[derive(Debug, Clone)]
pub struct CostSuite<T: Scalar> {
    pub weights: TrackingWeights<T>,
    pub penalties: PenaltySpec<T>,
    pub economic: EconomicCostParams<T>,
    pub xs: Vector<T>,
    pub us: Vector<T>,
}

impl<T: Scalar> CostSuite<T> {
    pub fn new(
        weights: TrackingWeights<T>,
        penalties: PenaltySpec<T>,
        economic: EconomicCostParams<T>,
        xs: Vector<T>,
        us: Vector<T>,
    ) -> Result<Self> {
        check_dim("Q vs steady state", weights.q.nrows(), xs.len())?;
        check_dim("R vs steady input", weights.r.nrows(), us.len())?;
        check_dim("economic cost zones", economic.ts.len(), us.len())?;
        Ok(Self {
            weights,
            penalties,
            economic,
            xs,
            us,
        })
    }

    pub fn stage(&self, x: &Vector<T>, u: &Vector<T>) -> T {
        quad(&self.weights.q, &(x - &self.xs)) + quad(&self.weights.r, &(u - &self.us))
    }

    pub fn stage_gradient(&self, x: &Vector<T>, u: &Vector<T>) -> (Vector<T>, Vector<T>) {
        let two = T::lit(2.0);
        (
            &self.weights.q * (x - &self.xs) * two,
            &self.weights.r * (u - &self.us) * two,
        )
    }

    pub fn terminal(&self, x: &Vector<T>) -> T {
        quad(&self.weights.p, &(x - &self.xs))
    }

    pub fn terminal_gradient(&self, x: &Vector<T>) -> Vector<T> {
        &self.weights.p * (x - &self.xs) * T::lit(2.0)
    }

    pub fn delta(&self, x: &Vector<T>, u: &Vector<T>) -> T {
        self.penalties.delta_coeff * ((x - &self.xs).norm_squared() + (u - &self.us).norm_squared())
    }

    pub fn delta_gradient(&self, x: &Vector<T>, u: &Vector<T>) -> (Vector<T>, Vector<T>) {
        let c = self.penalties.delta_coeff * T::lit(2.0);
        ((x - &self.xs) * c, (u - &self.us) * c)
    }

    pub fn gamma(&self, x: &Vector<T>) -> T {
        self.penalties.gamma_coeff * (x - &self.xs).norm_squared()
    }

    pub fn gamma_gradient(&self, x: &Vector<T>) -> Vector<T> {
        (x - &self.xs) * (self.penalties.gamma_coeff * T::lit(2.0))
    }

    pub fn economic(&self, x: &Vector<T>, u: &Vector<T>) -> T {
        econ_stage_cost(&self.economic, x, u)
    }

    /// `l_e(x_s, u_s)`, the average-cost benchmark.
    pub fn steady_economic(&self) -> T {
        self.economic(&self.xs, &self.us)
    }

    /// `V^δ` on a precomputed trajectory (`states.len() == controls.len() + 1`).
    pub fn v_delta_on(&self, states: &[Vector<T>], controls: &[Vector<T>]) -> T {
        let n = controls.len();
        let mut value = self.terminal(&states[n]);
        for k in 0..n {
            value += self.stage(&states[k], &controls[k])
                + T::of_usize(k) * self.delta(&states[k], &controls[k]);
        }
        value
    }

    /// `J^δ` on a precomputed trajectory.
    pub fn j_delta_on(&self, states: &[Vector<T>], controls: &[Vector<T>]) -> T {
        let n = controls.len();
        let mut value = self.stage(&states[0], &controls[0]) + self.gamma(&states[n]);
        for k in 1..n {
            value += self.delta(&states[k], &controls[k]);
        }
        value
    }

    /// Tracking MPC objective `Σ l + l_f`.
    pub fn tracking_value_on(&self, states: &[Vector<T>], controls: &[Vector<T>]) -> T {
        let n = controls.len();
        (0..n).fold(self.terminal(&states[n]), |acc, k| {
            acc + self.stage(&states[k], &controls[k])
        })
    }

    /// `V_e = Σ_{k<N} l_e(x_k, u_k)`.
    pub fn v_econ_on(&self, states: &[Vector<T>], controls: &[Vector<T>]) -> T {
        controls
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (k, u)| acc + self.economic(&states[k], u))
    }
}

/// `V^δ(x0, u) = Σ_{k<N} (l(x_k,u_k) + k δ(x_k,u_k)) + l_f(x_N)`.
pub fn v_delta<T: Scalar>(
    model: &SystemModel<T>,
    costs: &CostSuite<T>,
    controls: &[Vector<T>],
    x0: &Vector<T>,
) -> Result<T> {
    let states = model.rollout(x0, controls)?;
    Ok(costs.v_delta_on(&states, controls))
}

/// `J^δ(x0, u) = l(x_0,u_0) + Σ_{1≤k<N} δ(x_k,u_k) + γ(x_N)`.
pub fn j_delta<T: Scalar>(
    model: &SystemModel<T>,
    costs: &CostSuite<T>,
    controls: &[Vector<T>],
    x0: &Vector<T>,
) -> Result<T> {
    let states = model.rollout(x0, controls)?;
    Ok(costs.j_delta_on(&states, controls))
}

/// `V_e(x0, u) = Σ_{k<N} l_e(x_k, u_k)`.
pub fn v_econ<T: Scalar>(
    model: &SystemModel<T>,
    costs: &CostSuite<T>,
    controls: &[Vector<T>],
    x0: &Vector<T>,
) -> Result<T> {
    let states = model.rollout(x0, controls)?;
    Ok(costs.v_econ_on(&states, controls))
}

/// Energy in kWh of a power series (kW) sampled every `dt_seconds`.
pub fn energy_kwh<T: Scalar>(power: &[T], dt_seconds: T) -> Result<T> {
    if !(dt_seconds > T::zero()) {
        return Err(Error::usage("sampling period must be positive"));
    }
    let scale = dt_seconds / T::lit(3600.0);
    Ok(power.iter().fold(T::zero(), |acc, &p| acc + p * scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::AffineBilinearModel;
    use crate::scalar::vector_from_f64;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector<f64> {
        vector_from_f64(x)
    }

    fn suite(kappa: f64) -> CostSuite<f64> {
        CostSuite::new(
            TrackingWeights::identity(2, 2),
            PenaltySpec::default(),
            EconomicCostParams::hvac_default().with_kappa(kappa),
            v(&[24.0, 25.0]),
            v(&[0.4646, 0.4020]),
        )
        .unwrap()
    }

    #[test]
    fn zero_flow_costs_nothing() {
        let p = EconomicCostParams::<f64>::hvac_default();
        assert_eq!(econ_stage_cost(&p, &v(&[27.0, 22.0]), &v(&[0.0, 0.0])), 0.0);
    }

    #[test]
    fn steady_power_term_by_term() {
        // Spreadsheet-style recomputation, one term per line.
        let (u1, u2) = (0.4646_f64, 0.4020_f64);
        let cooling = (u1 * 1.012 * 9.0 + u2 * 1.012 * 10.0) / 4.0;
        let heating = (u1 * 1.012 * 8.0 + u2 * 1.012 * 7.0) / 0.9;
        let fan_per_kappa = (u1 + u2).powi(3);
        assert_abs_diff_eq!(cooling + heating, 9.419, epsilon = 1e-3);
        assert_abs_diff_eq!(fan_per_kappa, 0.651, epsilon = 5e-4);
        for kappa in [0.0, 1.0, 2.5] {
            let cost = suite(kappa).steady_economic();
            assert_relative_eq!(
                cost,
                cooling + heating + kappa * fan_per_kappa,
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn doubling_kappa_adds_fan_term() {
        let p = EconomicCostParams::<f64>::hvac_default().with_kappa(0.7);
        let x = v(&[26.0, 24.0]);
        let u = v(&[0.9, 0.3]);
        let base = econ_stage_cost(&p, &x, &u);
        let doubled = econ_stage_cost(&p.clone().with_kappa(1.4), &x, &u);
        assert_relative_eq!(doubled - base, 0.7 * 1.2f64.powi(3), max_relative = 1e-12);
    }

    #[test]
    fn tracking_costs_arithmetic() {
        let w = TrackingWeights::identity(2, 2);
        let xs = v(&[24.0, 25.0]);
        let us = v(&[0.5, 0.4]);
        assert_eq!(tracking_costs(&w, &xs, &us, &xs, &us), (0.0, 0.0));
        let (l, _) = tracking_costs(&w, &xs, &us, &v(&[25.0, 25.0]), &v(&[0.5, 2.4]));
        assert_abs_diff_eq!(l, 5.0, epsilon = 1e-12);
        let w = w.with_terminal(Matrix::identity(2, 2) * 2.0).unwrap();
        let (_, lf) = tracking_costs(&w, &xs, &us, &v(&[25.0, 26.0]), &us);
        assert_abs_diff_eq!(lf, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn weights_must_be_positive_definite() {
        let bad = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(TrackingWeights::new(bad, Matrix::identity(2, 2), Matrix::identity(2, 2)).is_err());
        assert!(PenaltySpec::new(0.0, 1e-4).is_err());
        assert!(PenaltySpec::new(1e-4, -1.0).is_err());
    }

    #[test]
    fn steady_trajectory_has_zero_tracking_values() {
        let model = AffineBilinearModel::<f64>::printed()
            .into_system(None)
            .unwrap();
        let mut costs = suite(1.0);
        // Use the exact fixed point of the rounded model.
        let g = AffineBilinearModel::<f64>::printed();
        let xs = costs.xs.clone();
        let rhs = &xs - &g.a_matrix * &xs - &g.d_vector;
        let us = Vector::from_iterator(
            2,
            (0..2).map(|i| rhs[i] / (g.g_coeff[i] * (g.g_offset[i] - xs[i]))),
        );
        costs.us = us.clone();
        let seq = vec![us.clone(); 5];
        assert_abs_diff_eq!(
            v_delta(&model, &costs, &seq, &xs).unwrap(),
            0.0,
            epsilon = 1e-20
        );
        assert_abs_diff_eq!(
            j_delta(&model, &costs, &seq, &xs).unwrap(),
            0.0,
            epsilon = 1e-20
        );
        let ve = v_econ(&model, &costs, &seq, &xs).unwrap();
        assert_relative_eq!(ve, 5.0 * costs.economic(&xs, &us), max_relative = 1e-12);
    }

    #[test]
    fn horizon_one_has_no_delta_terms() {
        let model = AffineBilinearModel::<f64>::printed()
            .into_system(None)
            .unwrap();
        let costs = suite(1.0);
        let x0 = v(&[27.0, 26.0]);
        let u = v(&[1.0, 0.5]);
        let x1 = model.step(&x0, &u).unwrap();
        let vd = v_delta(&model, &costs, std::slice::from_ref(&u), &x0).unwrap();
        assert_relative_eq!(
            vd,
            costs.stage(&x0, &u) + costs.terminal(&x1),
            max_relative = 1e-14
        );
        let jd = j_delta(&model, &costs, std::slice::from_ref(&u), &x0).unwrap();
        assert_relative_eq!(
            jd,
            costs.stage(&x0, &u) + costs.gamma(&x1),
            max_relative = 1e-14
        );
    }

    #[test]
    fn zero_flow_sequence_has_zero_economic_value() {
        let model = AffineBilinearModel::<f64>::printed()
            .into_system(None)
            .unwrap();
        let seq = vec![v(&[0.0, 0.0]); 4];
        assert_eq!(
            v_econ(&model, &suite(1.0), &seq, &v(&[30.0, 28.0])).unwrap(),
            0.0
        );
    }

    #[test]
    fn energy_arithmetic() {
        assert_abs_diff_eq!(
            energy_kwh(&[6.0; 144], 600.0).unwrap(),
            144.0,
            epsilon = 1e-10
        );
        assert_eq!(energy_kwh::<f64>(&[], 600.0).unwrap(), 0.0);
        assert!(energy_kwh(&[1.0], 0.0).is_err());
    }

    #[test]
    fn sign_resolution_check() {
        let p = EconomicCostParams::<f64>::hvac_default();
        assert!(p.sign_resolved_on(&v(&[15.0, 15.0]), &v(&[32.0, 32.0])));
        assert!(!p.sign_resolved_on(&v(&[15.0, 15.0]), &v(&[35.0, 35.0])));
    }

    proptest! {
        #[test]
        fn economic_cost_monotone_in_flow_inside_operating_band(
            x1 in 15.0f64..32.0, x2 in 15.0f64..32.0,
            u1 in 0.0f64..1.6, u2 in 0.0f64..1.6, bump in 0.0f64..1.0, zone in 0usize..2,
        ) {
            let p = EconomicCostParams::<f64>::hvac_default();
            let x = v(&[x1, x2]);
            let u = v(&[u1, u2]);
            let mut up = u.clone();
            up[zone] += bump;
            prop_assert!(econ_stage_cost(&p, &x, &up) >= econ_stage_cost(&p, &x, &u));
            prop_assert!(econ_stage_cost(&p, &x, &u) >= 0.0);
        }

        #[test]
        fn economic_gradient_matches_differences_away_from_kinks(
            x1 in 16.0f64..31.0, x2 in 16.0f64..31.0, u1 in 0.1f64..1.5, u2 in 0.1f64..1.5,
        ) {
            let p = EconomicCostParams::<f64>::hvac_default().with_kappa(0.8);
            let x = v(&[x1, x2]);
            let u = v(&[u1, u2]);
            let (gx, gu) = econ_stage_gradient(&p, &x, &u);
            let h = 1e-6;
            for i in 0..2 {
                let mut xp = x.clone(); xp[i] += h;
                let mut xm = x.clone(); xm[i] -= h;
                let fd = (econ_stage_cost(&p, &xp, &u) - econ_stage_cost(&p, &xm, &u)) / (2.0 * h);
                prop_assert!((fd - gx[i]).abs() <= 1e-6 * (1.0 + gx[i].abs()));
                let mut upl = u.clone(); upl[i] += h;
                let mut umi = u.clone(); umi[i] -= h;
                let fd = (econ_stage_cost(&p, &x, &upl) - econ_stage_cost(&p, &x, &umi)) / (2.0 * h);
                prop_assert!((fd - gu[i]).abs() <= 1e-6 * (1.0 + gu[i].abs()));
            }
        }
    }
}
