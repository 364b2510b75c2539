//! Discrete-time plant models `x⁺ = f(x, u)` with box state constraints and
//! polyhedral input constraints.

mod hvac;

use std::fmt::Debug;
use std::sync::Arc;

pub use hvac::{
    discretize_rc, discretize_rc_with, AffineBilinearModel, Discretization, TwoZoneHvacParams,
    PRINTED_G_OFFSET,
};

use crate::error::{check_dim, Error, Result};
use crate::nlp::qp::{DenseQp, QpStatus};
use crate::scalar::{Matrix, Scalar, Vector};

/// The map `f` together with its Jacobians.
pub trait Dynamics<T: Scalar>: Debug + Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// Evaluates `f(x, u)`. Dimensions have been checked by the caller.
    fn eval(&self, x: &Vector<T>, u: &Vector<T>) -> Vector<T>;

    /// `(∂f/∂x, ∂f/∂u)` at `(x, u)`. The default uses central differences.
    fn jacobians(&self, x: &Vector<T>, u: &Vector<T>) -> (Matrix<T>, Matrix<T>) {
        finite_difference_jacobians(self, x, u)
    }
}

pub(crate) fn finite_difference_jacobians<T: Scalar, D: Dynamics<T> + ?Sized>(
    dynamics: &D,
    x: &Vector<T>,
    u: &Vector<T>,
) -> (Matrix<T>, Matrix<T>) {
    let nx = x.len();
    let nu = u.len();
    let cube_root_eps = T::epsilon().powf(T::lit(1.0 / 3.0));
    let mut jx = Matrix::zeros(nx, nx);
    let mut ju = Matrix::zeros(nx, nu);
    for j in 0..nx {
        let h = cube_root_eps * x[j].abs().max(T::one());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (dynamics.eval(&xp, u) - dynamics.eval(&xm, u)) / (h + h);
        jx.set_column(j, &col);
    }
    for j in 0..nu {
        let h = cube_root_eps * u[j].abs().max(T::one());
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += h;
        um[j] -= h;
        let col = (dynamics.eval(x, &up) - dynamics.eval(x, &um)) / (h + h);
        ju.set_column(j, &col);
    }
    (jx, ju)
}

/// `x⁺ = A x + B u + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics<T: Scalar> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
    pub c: Vector<T>,
}

impl<T: Scalar> LinearDynamics<T> {
    pub fn new(a: Matrix<T>, b: Matrix<T>, c: Vector<T>) -> Result<Self> {
        let n = a.nrows();
        check_dim("LinearDynamics A columns", n, a.ncols())?;
        check_dim("LinearDynamics B rows", n, b.nrows())?;
        check_dim("LinearDynamics offset", n, c.len())?;
        Ok(Self { a, b, c })
    }
}

impl<T: Scalar> Dynamics<T> for LinearDynamics<T> {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn eval(&self, x: &Vector<T>, u: &Vector<T>) -> Vector<T> {
        &self.a * x + &self.b * u + &self.c
    }
    fn jacobians(&self, _x: &Vector<T>, _u: &Vector<T>) -> (Matrix<T>, Matrix<T>) {
        (self.a.clone(), self.b.clone())
    }
}

type StepFn<T> = dyn Fn(&Vector<T>, &Vector<T>) -> Vector<T> + Send + Sync;

/// Arbitrary step map given as a closure; Jacobians by central differences.
#[derive(Clone)]
pub struct FnDynamics<T: Scalar> {
    n_x: usize,
    n_u: usize,
    map: Arc<StepFn<T>>,
}

impl<T: Scalar> FnDynamics<T> {
    pub fn new(
        n_x: usize,
        n_u: usize,
        map: impl Fn(&Vector<T>, &Vector<T>) -> Vector<T> + Send + Sync + 'static,
    ) -> Self {
        Self {
            n_x,
            n_u,
            map: Arc::new(map),
        }
    }
}

impl<T: Scalar> Debug for FnDynamics<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnDynamics")
            .field("n_x", &self.n_x)
            .field("n_u", &self.n_u)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> Dynamics<T> for FnDynamics<T> {
    fn state_dim(&self) -> usize {
        self.n_x
    }
    fn input_dim(&self) -> usize {
        self.n_u
    }
    fn eval(&self, x: &Vector<T>, u: &Vector<T>) -> Vector<T> {
        (self.map)(x, u)
    }
}

/// Per-coordinate bounds defining the hard state set `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBox<T: Scalar> {
    pub lower: Vector<T>,
    pub upper: Vector<T>,
}

impl<T: Scalar> StateBox<T> {
    pub fn new(lower: Vector<T>, upper: Vector<T>) -> Result<Self> {
        check_dim("state box", lower.len(), upper.len())?;
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] < upper[i])) {
            return Err(Error::invalid(format!(
                "state box coordinate {i}: lower {} must be below upper {}",
                lower[i], upper[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &Vector<T>, tol: T) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(&v, (&lo, &hi))| v >= lo - tol && v <= hi + tol)
    }
}

/// `U = {u : A u ≤ b, lower ≤ u ≤ upper}`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSet<T: Scalar> {
    pub rows: Matrix<T>,
    pub rhs: Vector<T>,
    pub lower: Vector<T>,
    pub upper: Vector<T>,
}

impl<T: Scalar> InputSet<T> {
    /// Validates shapes and checks that the set is nonempty by solving a small
    /// feasibility QP.
    pub fn new(
        rows: Matrix<T>,
        rhs: Vector<T>,
        lower: Vector<T>,
        upper: Vector<T>,
    ) -> Result<Self> {
        let n_u = lower.len();
        check_dim("input bounds", n_u, upper.len())?;
        check_dim("input rows", n_u, rows.ncols())?;
        check_dim("input rhs", rows.nrows(), rhs.len())?;
        if let Some(i) = (0..n_u).find(|&i| lower[i] > upper[i]) {
            return Err(Error::invalid(format!(
                "input bound {i}: lower exceeds upper"
            )));
        }
        let set = Self {
            rows,
            rhs,
            lower,
            upper,
        };
        if set.feasible_point().is_none() {
            return Err(Error::invalid("input set is empty"));
        }
        Ok(set)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    /// Minimum-norm point of `U`, or `None` when the set is empty.
    pub fn feasible_point(&self) -> Option<Vector<T>> {
        let n = self.dim();
        let (ineq, ineq_rhs) = self.as_inequalities();
        let qp = DenseQp {
            hessian: Matrix::identity(n, n),
            gradient: Vector::zeros(n),
            eq: Matrix::zeros(0, n),
            eq_rhs: Vector::zeros(0),
            ineq,
            ineq_rhs,
        };
        let sol = qp.solve();
        (sol.status == QpStatus::Optimal).then_some(sol.x)
    }

    /// All constraints of `U` stacked as `G u ≤ h` (linear rows, then lower and
    /// upper bounds).
    pub fn as_inequalities(&self) -> (Matrix<T>, Vector<T>) {
        let n = self.dim();
        let r = self.n_rows();
        let mut g = Matrix::zeros(r + 2 * n, n);
        let mut h = Vector::zeros(r + 2 * n);
        g.view_mut((0, 0), (r, n)).copy_from(&self.rows);
        h.rows_mut(0, r).copy_from(&self.rhs);
        for i in 0..n {
            g[(r + i, i)] = -T::one();
            h[r + i] = -self.lower[i];
            g[(r + n + i, i)] = T::one();
            h[r + n + i] = self.upper[i];
        }
        (g, h)
    }

    pub fn contains(&self, u: &Vector<T>, tol: T) -> bool {
        let (g, h) = self.as_inequalities();
        (g * u - h).iter().all(|&s| s <= tol)
    }

    /// Euclidean projection onto `U`. Falls back to [`InputSet::clip`] if the
    /// projection QP fails.
    pub fn project(&self, u: &Vector<T>) -> Vector<T> {
        if self.contains(u, T::zero()) {
            return u.clone();
        }
        let n = self.dim();
        let (ineq, ineq_rhs) = self.as_inequalities();
        let qp = DenseQp {
            hessian: Matrix::identity(n, n),
            gradient: -u,
            eq: Matrix::zeros(0, n),
            eq_rhs: Vector::zeros(0),
            ineq,
            ineq_rhs,
        };
        let sol = qp.solve();
        if sol.status == QpStatus::Optimal {
            sol.x
        } else {
            self.clip(u)
        }
    }

    /// Projects each coordinate into the bounds (linear rows are not enforced).
    pub fn clip(&self, u: &Vector<T>) -> Vector<T> {
        Vector::from_iterator(
            u.len(),
            u.iter()
                .enumerate()
                .map(|(i, &v)| v.max(self.lower[i]).min(self.upper[i])),
        )
    }
}

/// Which inequality a slack value refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintRow {
    StateLower(usize),
    StateUpper(usize),
    InputRow(usize),
    InputLower(usize),
    InputUpper(usize),
}

/// Membership verdict for `(x, u) ∈ X × U` with the signed slack of every row
/// (positive = strictly inside).
#[derive(Debug, Clone)]
pub struct Admissibility<T: Scalar> {
    pub slacks: Vec<(ConstraintRow, T)>,
    pub tolerance: T,
}

impl<T: Scalar> Admissibility<T> {
    pub fn is_admissible(&self) -> bool {
        self.violated().next().is_none()
    }

    pub fn state_ok(&self) -> bool {
        !self.violated().any(|(row, _)| {
            matches!(
                row,
                ConstraintRow::StateLower(_) | ConstraintRow::StateUpper(_)
            )
        })
    }

    pub fn input_ok(&self) -> bool {
        !self.violated().any(|(row, _)| {
            !matches!(
                row,
                ConstraintRow::StateLower(_) | ConstraintRow::StateUpper(_)
            )
        })
    }

    pub fn violated(&self) -> impl Iterator<Item = (ConstraintRow, T)> + '_ {
        self.slacks
            .iter()
            .copied()
            .filter(move |&(_, s)| s < -self.tolerance)
    }

    pub fn slack(&self, row: ConstraintRow) -> Option<T> {
        self.slacks.iter().find(|(r, _)| *r == row).map(|&(_, s)| s)
    }
}

pub const DEFAULT_ADMISSIBILITY_TOL: f64 = 1e-8;

/// Plant model with its constraint sets.
#[derive(Debug, Clone)]
pub struct SystemModel<T: Scalar> {
    dynamics: Arc<dyn Dynamics<T>>,
    pub state_box: StateBox<T>,
    pub input_set: InputSet<T>,
    /// `X_∞`: the points the closed loop has to reach asymptotically.
    pub asymptotic_set: Vec<Vector<T>>,
    /// Sampling period in seconds.
    pub dt: T,
}

impl<T: Scalar> SystemModel<T> {
    pub fn new(
        dynamics: Arc<dyn Dynamics<T>>,
        state_box: StateBox<T>,
        input_set: InputSet<T>,
        asymptotic_set: Vec<Vector<T>>,
        dt: T,
    ) -> Result<Self> {
        let n_x = dynamics.state_dim();
        let n_u = dynamics.input_dim();
        if n_x == 0 || n_u == 0 {
            return Err(Error::invalid(
                "state and input dimensions must be at least 1",
            ));
        }
        check_dim("state box", n_x, state_box.dim())?;
        check_dim("input set", n_u, input_set.dim())?;
        if !(dt > T::zero()) {
            return Err(Error::invalid("sampling period must be positive"));
        }
        for (i, p) in asymptotic_set.iter().enumerate() {
            check_dim("asymptotic set point", n_x, p.len())?;
            if !state_box.contains(p, T::zero()) {
                return Err(Error::invalid(format!(
                    "asymptotic set point {i} lies outside the state box"
                )));
            }
        }
        Ok(Self {
            dynamics,
            state_box,
            input_set,
            asymptotic_set,
            dt,
        })
    }

    pub fn n_x(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn n_u(&self) -> usize {
        self.dynamics.input_dim()
    }

    pub fn dynamics(&self) -> &dyn Dynamics<T> {
        self.dynamics.as_ref()
    }

    fn check_pair(&self, x: &Vector<T>, u: &Vector<T>) -> Result<()> {
        check_dim("state", self.n_x(), x.len())?;
        check_dim("control", self.n_u(), u.len())
    }

    /// `f(x, u)`. No constraint checking.
    pub fn step(&self, x: &Vector<T>, u: &Vector<T>) -> Result<Vector<T>> {
        self.check_pair(x, u)?;
        Ok(self.dynamics.eval(x, u))
    }

    pub fn jacobians(&self, x: &Vector<T>, u: &Vector<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        self.check_pair(x, u)?;
        Ok(self.dynamics.jacobians(x, u))
    }

    /// `(x_0, …, x_N)` with `x_0 = x0` and `x_{k+1} = f(x_k, u_k)`.
    pub fn rollout(&self, x0: &Vector<T>, controls: &[Vector<T>]) -> Result<Vec<Vector<T>>> {
        if controls.is_empty() {
            return Err(Error::usage("rollout needs at least one control"));
        }
        check_dim("initial state", self.n_x(), x0.len())?;
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(x0.clone());
        for u in controls {
            check_dim("control", self.n_u(), u.len())?;
            let next = self.dynamics.eval(states.last().expect("nonempty"), u);
            states.push(next);
        }
        Ok(states)
    }

    pub fn is_admissible(&self, x: &Vector<T>, u: &Vector<T>) -> Result<Admissibility<T>> {
        self.is_admissible_with_tol(x, u, T::lit(DEFAULT_ADMISSIBILITY_TOL))
    }

    pub fn is_admissible_with_tol(
        &self,
        x: &Vector<T>,
        u: &Vector<T>,
        tolerance: T,
    ) -> Result<Admissibility<T>> {
        self.check_pair(x, u)?;
        let mut slacks = Vec::new();
        for i in 0..self.n_x() {
            slacks.push((ConstraintRow::StateLower(i), x[i] - self.state_box.lower[i]));
            slacks.push((ConstraintRow::StateUpper(i), self.state_box.upper[i] - x[i]));
        }
        let set = &self.input_set;
        let row_values = &set.rows * u;
        for r in 0..set.n_rows() {
            slacks.push((ConstraintRow::InputRow(r), set.rhs[r] - row_values[r]));
        }
        for i in 0..self.n_u() {
            slacks.push((ConstraintRow::InputLower(i), u[i] - set.lower[i]));
            slacks.push((ConstraintRow::InputUpper(i), set.upper[i] - u[i]));
        }
        Ok(Admissibility { slacks, tolerance })
    }
}

/// Stacks a control sequence into the single-shooting decision vector.
pub fn stack_controls<T: Scalar>(controls: &[Vector<T>]) -> Vector<T> {
    let n: usize = controls.iter().map(|u| u.len()).sum();
    Vector::from_iterator(n, controls.iter().flat_map(|u| u.iter().copied()))
}

pub fn unstack_controls<T: Scalar>(z: &Vector<T>, n_u: usize) -> Vec<Vector<T>> {
    z.as_slice()
        .chunks(n_u)
        .map(Vector::from_column_slice)
        .collect()
}
