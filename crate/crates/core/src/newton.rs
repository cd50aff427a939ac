//! Newton's method globalised by backtracking on a convex energy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{CsrMatrix, LinearSolveError, SpdSolver};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    #[serde(alias = "max_iters")]
    pub max_iterations: usize,
    /// Step-length reduction factor in (0, 1).
    pub backtracking: f64,
    pub min_step: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-11,
            rel_tol: 1e-10,
            max_iterations: 50,
            backtracking: 0.5,
            min_step: 1e-10,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<(), NewtonError> {
        let bad = |m: String| Err(NewtonError::InvalidConfig(m));
        if !(self.abs_tol > 0.0) || !(self.rel_tol > 0.0) {
            return bad(format!("tolerances must be positive ({}, {})", self.abs_tol, self.rel_tol));
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1".into());
        }
        if !(self.backtracking > 0.0 && self.backtracking < 1.0) {
            return bad(format!("backtracking factor must lie in (0, 1), got {}", self.backtracking));
        }
        if !(self.min_step > 0.0 && self.min_step < 1.0) {
            return bad(format!("min_step must lie in (0, 1), got {}", self.min_step));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NewtonError {
    #[error("no convergence after {} iterations (residual {:e})", .residual_history.len() - 1, .residual_history.last().copied().unwrap_or(f64::NAN))]
    NonConvergence { best: Vec<f64>, residual_history: Vec<f64> },
    #[error("line search failed at iteration {iteration} (residual {residual:e})")]
    LineSearch {
        iteration: usize,
        residual: f64,
        best: Vec<f64>,
        residual_history: Vec<f64>,
    },
    #[error("linear solve failed: {0}")]
    Linear(#[from] LinearSolveError),
    #[error("invalid Newton configuration: {0}")]
    InvalidConfig(String),
}

/// Statistics of one converged Newton solve.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NewtonStats {
    pub iterations: usize,
    /// Euclidean residual norms, starting with the initial guess.
    pub residual_history: Vec<f64>,
    pub energy_initial: f64,
    pub energy_final: f64,
    /// Number of step-length reductions over all iterations.
    pub backtracks: usize,
    /// Residual level below which rounding dominates.
    pub residual_floor: f64,
}

impl NewtonStats {
    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(0.0)
    }
}

/// Convergence behaviour of the last iterations of a Newton history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailVerdict {
    /// `r_(k+1) / r_k^2` stays within the allowed spread over the tail.
    Quadratic,
    /// Fewer than two tail transitions above the rounding floor; nothing to compare.
    Undetermined,
    NotQuadratic,
}

/// Classifies the final `window` transitions of `history`.
///
/// Transitions ending at or below `floor` are rounding-limited and skipped. The tail is
/// quadratic when `max C_k <= spread * min C_k` for `C_k = r_(k+1) / r_k^2`.
pub fn classify_tail(history: &[f64], floor: f64, window: usize, spread: f64) -> TailVerdict {
    let transitions = history.len().saturating_sub(1);
    let start = transitions.saturating_sub(window);
    let ratios: Vec<f64> = (start..transitions)
        .filter(|&k| history[k + 1] > floor && history[k] > 0.0)
        .map(|k| history[k + 1] / (history[k] * history[k]))
        .collect();
    if ratios.len() < 2 {
        return TailVerdict::Undetermined;
    }
    let max = ratios.iter().copied().fold(0.0, f64::max);
    let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    if max <= spread * min {
        TailVerdict::Quadratic
    } else {
        TailVerdict::NotQuadratic
    }
}

/// A smooth convex minimisation problem.
pub trait ConvexProblem {
    fn energy(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn hessian(&self, x: &[f64]) -> CsrMatrix;

    /// Magnitude of the terms summed into the gradient, used to estimate the rounding floor.
    fn residual_scale(&self) -> f64 {
        0.0
    }

    /// Newton direction solving `H d = -g`.
    fn direction(&self, hessian: CsrMatrix, gradient: &[f64], solver: &mut SpdSolver) -> Result<Vec<f64>, LinearSolveError> {
        let rhs: Vec<f64> = gradient.iter().map(|g| -g).collect();
        solver.solve(&hessian, &rhs)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Minimises `problem` from `x0` until `||grad|| <= max(abs_tol, rel_tol ||grad(x0)||)`.
pub fn minimize<P: ConvexProblem>(
    problem: &P,
    x0: Vec<f64>,
    cfg: &NewtonConfig,
    solver: &mut SpdSolver,
) -> Result<(Vec<f64>, NewtonStats), NewtonError> {
    cfg.validate()?;
    let mut x = x0;
    let mut g = problem.gradient(&x);
    let mut energy = problem.energy(&x);
    let r0 = norm(&g);
    let tol = cfg.abs_tol.max(cfg.rel_tol * r0);
    let mut stats = NewtonStats {
        residual_history: vec![r0],
        energy_initial: energy,
        energy_final: energy,
        residual_floor: 1e3 * f64::EPSILON * problem.residual_scale(),
        ..Default::default()
    };
    let mut r = r0;
    while r > tol {
        if stats.iterations == cfg.max_iterations {
            return Err(NewtonError::NonConvergence {
                best: x,
                residual_history: stats.residual_history,
            });
        }
        let d = problem.direction(problem.hessian(&x), &g, solver)?;
        let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        let mut alpha = 1.0;
        let (x_new, g_new, e_new) = loop {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            let e_trial = problem.energy(&trial);
            // Below this threshold energy differences are rounding noise.
            let noise = 1e-13 * (1.0 + energy.abs() + e_trial.abs());
            if e_trial.is_finite() && e_trial <= energy + 1e-4 * alpha * slope {
                let g_trial = problem.gradient(&trial);
                break (trial, g_trial, e_trial);
            }
            if e_trial.is_finite() && (alpha * slope).abs() <= noise && (e_trial - energy).abs() <= noise {
                let g_trial = problem.gradient(&trial);
                if norm(&g_trial) < r {
                    break (trial, g_trial, e_trial);
                }
            }
            alpha *= cfg.backtracking;
            stats.backtracks += 1;
            if alpha < cfg.min_step {
                stats.residual_history.push(r);
                return Err(NewtonError::LineSearch {
                    iteration: stats.iterations,
                    residual: r,
                    best: x,
                    residual_history: stats.residual_history,
                });
            }
        };
        x = x_new;
        g = g_new;
        energy = e_new;
        r = norm(&g);
        stats.iterations += 1;
        stats.residual_history.push(r);
    }
    stats.energy_final = energy;
    Ok((x, stats))
}
