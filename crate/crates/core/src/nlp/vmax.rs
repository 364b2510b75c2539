//! Certified upper bound on `V^δ` over the feasible set of the horizon problems.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::costs::CostSuite;
use crate::dynamics::SystemModel;
use crate::error::{Error, Result};
use crate::sampling::uniform_in_box;
use crate::scalar::{Matrix, Scalar, Vector};
use crate::terminal::TerminalIngredients;

/// Dimension up to which box maxima are found by vertex enumeration.
const MAX_ENUMERATED_DIM: usize = 20;

/// `max (v − c)ᵀ M (v − c)` over the box `[lower, upper]` for positive
/// semidefinite `M`. A convex function attains its maximum at a vertex; above
/// [`MAX_ENUMERATED_DIM`] coordinates an interval bound is returned instead.
pub fn box_quadratic_max<T: Scalar>(
    m: &Matrix<T>,
    center: &Vector<T>,
    lower: &Vector<T>,
    upper: &Vector<T>,
) -> T {
    let n = center.len();
    if n > MAX_ENUMERATED_DIM {
        let reach = Vector::from_iterator(
            n,
            (0..n).map(|i| {
                (lower[i] - center[i])
                    .abs()
                    .max((upper[i] - center[i]).abs())
            }),
        );
        let mut bound = T::zero();
        for i in 0..n {
            for j in 0..n {
                bound += m[(i, j)].abs() * reach[i] * reach[j];
            }
        }
        return bound;
    }
    let mut best = T::zero();
    let mut v = Vector::zeros(n);
    for mask in 0u64..(1u64 << n) {
        for i in 0..n {
            v[i] = if mask >> i & 1 == 1 {
                upper[i]
            } else {
                lower[i]
            } - center[i];
        }
        best = best.max((v.transpose() * m * &v)[(0, 0)]);
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct VMaxBound<T: Scalar> {
    /// `Σ_k (max l + k max δ) + min(α, max_X l_f)`.
    pub bound: T,
    pub stage_max: T,
    pub delta_max: T,
    pub terminal_max: T,
    /// Largest sampled `V^δ` of a feasible rollout.
    pub sampled_max: T,
    /// Number of sampled rollouts that satisfied every constraint.
    pub n_feasible: usize,
}

/// Upper bound on `V^δ(x, u)` over `x ∈ X`, `u` feasible for the horizon problem
/// (states in `X`, inputs in `U`, `x_N ∈ X_f`).
///
/// The term-wise bound is checked against `n_samples` feasible random rollouts
/// drawn from `seed` (half uniform inputs, half the terminal law plus noise);
/// a sample above the bound is an internal error.
pub fn compute_v_max<T: Scalar>(
    model: &SystemModel<T>,
    costs: &CostSuite<T>,
    terminal: &TerminalIngredients<T>,
    horizon: usize,
    n_samples: usize,
    seed: u64,
) -> Result<VMaxBound<T>> {
    if horizon == 0 {
        return Err(Error::usage("horizon must be at least 1"));
    }
    let sb = &model.state_box;
    let set = &model.input_set;
    let n_x = model.n_x();
    let n_u = model.n_u();
    let stage_max = box_quadratic_max(&costs.weights.q, &costs.xs, &sb.lower, &sb.upper)
        + box_quadratic_max(&costs.weights.r, &costs.us, &set.lower, &set.upper);
    let delta_max = costs.penalties.delta_coeff
        * (box_quadratic_max(&Matrix::identity(n_x, n_x), &costs.xs, &sb.lower, &sb.upper)
            + box_quadratic_max(
                &Matrix::identity(n_u, n_u),
                &costs.us,
                &set.lower,
                &set.upper,
            ));
    let terminal_max = terminal.alpha.min(box_quadratic_max(
        &terminal.p_matrix,
        &terminal.xs,
        &sb.lower,
        &sb.upper,
    ));
    let mut bound = terminal_max;
    for k in 0..horizon {
        bound += stage_max + T::of_usize(k) * delta_max;
    }

    let batch = n_samples.max(1);
    let mut feasible: Vec<T> = Vec::with_capacity(n_samples);
    let mut stream = 0u64;
    // Most random rollouts miss the terminal set; give up after 50 batches.
    for _ in 0..50 {
        if feasible.len() >= n_samples {
            break;
        }
        let found: Vec<Option<T>> = (stream..stream + batch as u64)
            .into_par_iter()
            .map(|i| sample_rollout(model, costs, terminal, horizon, seed, i))
            .collect();
        stream += batch as u64;
        feasible.extend(found.into_iter().flatten());
    }
    feasible.truncate(n_samples);
    let sampled_max = feasible.iter().fold(T::zero(), |a, &v| a.max(v));
    if sampled_max > bound {
        return Err(Error::Internal(format!(
            "sampled V^δ {sampled_max} exceeds the V_max bound {bound}"
        )));
    }
    Ok(VMaxBound {
        bound,
        stage_max,
        delta_max,
        terminal_max,
        sampled_max,
        n_feasible: feasible.len(),
    })
}

fn sample_rollout<T: Scalar>(
    model: &SystemModel<T>,
    costs: &CostSuite<T>,
    terminal: &TerminalIngredients<T>,
    horizon: usize,
    seed: u64,
    stream: u64,
) -> Option<T> {
    let (states, controls) = sample_feasible_rollout(model, terminal, horizon, seed, stream)?;
    Some(costs.v_delta_on(&states, &controls))
}

/// `(states, controls)` of one rollout.
pub type Rollout<T> = (Vec<Vector<T>>, Vec<Vector<T>>);

/// One random rollout from stream `stream` of `seed`: `x_0` uniform in `X`,
/// inputs uniform in `U` (even streams) or the terminal law plus noise (odd
/// streams). Returns `(states, controls)` when `x_0, …, x_{N−1} ∈ X` and
/// `x_N ∈ X_f`, `None` otherwise.
pub fn sample_feasible_rollout<T: Scalar>(
    model: &SystemModel<T>,
    terminal: &TerminalIngredients<T>,
    horizon: usize,
    seed: u64,
    stream: u64,
) -> Option<Rollout<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let sb = &model.state_box;
    let set = &model.input_set;
    let steer = stream % 2 == 1;
    let mut x = uniform_in_box(&mut rng, &sb.lower, &sb.upper);
    let mut states = vec![x.clone()];
    let mut controls = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let u = if steer {
            let noise = Vector::from_fn(model.n_u(), |_, _| T::lit(rng.random_range(-0.3..0.3)));
            set.project(&(terminal.kappa_f(&x) + noise))
        } else {
            set.project(&uniform_in_box(&mut rng, &set.lower, &set.upper))
        };
        x = model.dynamics().eval(&x, &u);
        controls.push(u);
        states.push(x.clone());
    }
    let inside = states[..horizon].iter().all(|s| sb.contains(s, T::zero()));
    (inside && terminal.contains(&states[horizon], T::zero())).then_some((states, controls))
}
