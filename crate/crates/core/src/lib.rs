//! Economic model predictive control with (non-monotonic) Lyapunov constraints.
//!
//! The numerical core is generic over the scalar type ([`Scalar`], implemented for
//! `f32` and `f64`); the aliases at the crate root fix it to `f64`, which is what
//! the simulator and the command-line front end use.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // negated comparisons reject NaN

pub mod controller;
pub mod costs;
pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod nlp;
pub mod sampling;
pub mod scalar;
pub mod scenario;
pub mod terminal;

pub use error::{Error, Result};
pub use scalar::{Matrix, Scalar, Vector};

pub type HvacModel = dynamics::AffineBilinearModel<f64>;
pub type System = dynamics::SystemModel<f64>;
pub type Costs = costs::CostSuite<f64>;
