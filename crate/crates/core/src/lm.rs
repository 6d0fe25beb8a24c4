//! Levenberg–Marquardt driver with Huber IRLS weighting.
//!
//! Problems re-linearize (and may re-associate) at every accepted iterate;
//! candidate steps are scored with the data association frozen at the last
//! linearization so accept/reject compares like with like.

use nalgebra::{SMatrix, SVector};

use crate::error::Result;

/// Huber loss `ρ(r)` with threshold `delta` (`None` is plain least squares).
pub fn huber_cost(r: f64, delta: Option<f64>) -> f64 {
    match delta {
        Some(d) if r.abs() > d => d * (r.abs() - 0.5 * d),
        _ => 0.5 * r * r,
    }
}

/// IRLS weight `ρ'(r)/r`.
pub fn huber_weight(r: f64, delta: Option<f64>) -> f64 {
    match delta {
        Some(d) if r.abs() > d => d / r.abs(),
        _ => 1.0,
    }
}

/// Gauss–Newton normal equations `H δ = −g` summed over residual rows.
#[derive(Clone, Debug)]
pub struct NormalEquations<const N: usize> {
    pub hessian: SMatrix<f64, N, N>,
    pub gradient: SVector<f64, N>,
    pub cost: f64,
    pub rows: usize,
}

impl<const N: usize> Default for NormalEquations<N> {
    fn default() -> Self {
        Self {
            hessian: SMatrix::zeros(),
            gradient: SVector::zeros(),
            cost: 0.0,
            rows: 0,
        }
    }
}

impl<const N: usize> NormalEquations<N> {
    /// Adds a row with metric residual `r`, Jacobian `j`, whitening scale
    /// `scale = 1/σ` and Huber threshold `delta` on the metric residual.
    pub fn add(&mut self, r: f64, j: &SVector<f64, N>, scale: f64, delta: Option<f64>) {
        let s2 = scale * scale;
        let w = huber_weight(r, delta) * s2;
        self.hessian.ger(w, j, j, 1.0);
        self.gradient.axpy(w * r, j, 1.0);
        self.cost += s2 * huber_cost(r, delta);
        self.rows += 1;
    }

    /// Adds only the cost of a row.
    pub fn add_cost(&mut self, r: f64, scale: f64, delta: Option<f64>) {
        self.cost += scale * scale * huber_cost(r, delta);
        self.rows += 1;
    }

    pub fn merge(&mut self, other: &NormalEquations<N>) {
        self.hessian += other.hessian;
        self.gradient += other.gradient;
        self.cost += other.cost;
        self.rows += other.rows;
    }
}

/// A nonlinear least-squares problem over parameters `P` with an `N`-dim increment.
pub trait LmProblem<const N: usize> {
    type Param: Clone;
    /// State frozen at linearization (for example correspondences).
    type Frozen;

    fn linearize(&mut self, x: &Self::Param) -> Result<(Self::Frozen, NormalEquations<N>)>;
    fn cost(&self, frozen: &Self::Frozen, x: &Self::Param) -> Result<f64>;
    fn retract(&self, x: &Self::Param, delta: &SVector<f64, N>) -> Self::Param;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmSettings {
    pub max_iterations: usize,
    pub param_tol: f64,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_rejections: usize,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            param_tol: 1e-8,
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.5,
            max_rejections: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub enum LmStatus {
    Converged,
    MaxIterations,
    Stalled { rejections: usize },
}

#[derive(Clone, Debug)]
pub struct LmOutcome<P, const N: usize> {
    pub x: P,
    pub cost: f64,
    pub iterations: usize,
    pub status: LmStatus,
    /// Normal equations at `x`.
    pub last: NormalEquations<N>,
    /// Costs after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

impl<P, const N: usize> LmOutcome<P, N> {
    pub fn converged(&self) -> bool {
        matches!(self.status, LmStatus::Converged)
    }
}

fn solve_damped<const N: usize>(ne: &NormalEquations<N>, lambda: f64) -> Option<SVector<f64, N>> {
    let mut a = ne.hessian;
    for i in 0..N {
        // keep a floor so zero-information directions stay solvable
        a[(i, i)] += lambda * ne.hessian[(i, i)].max(1e-12);
    }
    let chol = a.cholesky()?;
    let delta = -chol.solve(&ne.gradient);
    delta.iter().all(|v| v.is_finite()).then_some(delta)
}

/// Relative cost change treated as rounding noise.
pub const COST_RTOL: f64 = 1e-12;

/// Relative cost agreement between accepted steps that counts as a cycle.
pub const CYCLE_RTOL: f64 = 1e-7;

/// Longest cycle period detected.
pub const MAX_CYCLE: usize = 8;

pub fn solve<const N: usize, Pr: LmProblem<N>>(
    problem: &mut Pr,
    init: Pr::Param,
    settings: &LmSettings,
) -> Result<LmOutcome<Pr::Param, N>> {
    let mut x = init;
    let (mut frozen, mut ne) = problem.linearize(&x)?;
    let mut lambda = settings.lambda_init;
    let mut rejections = 0;
    let mut iterations = 0;
    let mut history = vec![ne.cost];
    let mut status = LmStatus::MaxIterations;
    while iterations < settings.max_iterations {
        iterations += 1;
        let Some(delta) = solve_damped(&ne, lambda) else {
            lambda *= settings.lambda_up;
            rejections += 1;
            if rejections >= settings.max_rejections {
                status = LmStatus::Stalled { rejections };
                break;
            }
            continue;
        };
        if delta.norm() < settings.param_tol {
            status = LmStatus::Converged;
            break;
        }
        let cand = problem.retract(&x, &delta);
        let cand_cost = problem.cost(&frozen, &cand)?;
        if cand_cost < ne.cost {
            x = cand;
            lambda = (lambda * settings.lambda_down).max(1e-12);
            rejections = 0;
            (frozen, ne) = problem.linearize(&x)?;
            history.push(ne.cost);
            // relinearization can cycle through a few frozen states
            let last = history[history.len() - 1];
            let cycled = (2..=MAX_CYCLE)
                .filter(|p| history.len() > *p)
                .any(|p| (history[history.len() - 1 - p] - last).abs() <= CYCLE_RTOL * last.abs());
            if cycled {
                status = LmStatus::Converged;
                break;
            }
        } else if cand_cost - ne.cost <= COST_RTOL * ne.cost.abs() {
            // at the rounding floor of the cost
            status = LmStatus::Converged;
            break;
        } else {
            lambda *= settings.lambda_up;
            rejections += 1;
            if rejections >= settings.max_rejections {
                status = LmStatus::Stalled { rejections };
                break;
            }
        }
    }
    Ok(LmOutcome {
        x,
        cost: ne.cost,
        iterations,
        status,
        last: ne,
        cost_history: history,
    })
}
