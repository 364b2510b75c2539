//! Nonlinear programming: a dense QP solver, an SQP method on top of it, and the
//! finite-horizon problems the controllers solve online.

pub mod horizon;
pub mod qp;
pub mod sqp;
pub mod vmax;

pub use horizon::{
    build_horizon_problem, warm_start_shift, HorizonKind, HorizonProblem, LyapunovLevels,
    TrajectoryValues,
};
pub use sqp::{
    solve, DiffMode, NlpEvaluation, NlpProblem, NlpResult, NlpSpec, NlpStatus, SolverOptions,
};
pub use vmax::{box_quadratic_max, compute_v_max, sample_feasible_rollout, VMaxBound};
