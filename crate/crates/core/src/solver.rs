//! Implicit Euler time stepping of the gradient scheme.
//!
//! Each step minimises the strictly convex step energy
//! `E_m(v) = 1/2 (1 + lambda dt) |Pi v|^2 + dt int sqrt(eps^2 + |grad v|^2) - int Pi u_prev Pi v - dt l_data(v)`
//! whose stationarity condition is the step equation.

use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::assembly::quadrature::QuadratureRule;
use crate::assembly::{assemble_load, total_variation, AssemblyError, FluxParams, ProblemData, StepProblem};
use crate::gdm::{DiscreteField, GdmError, GradientDiscretisation, P1Conforming};
use crate::linalg::{CsrMatrix, SpdSolver};
use crate::newton::{minimize, ConvexProblem, NewtonError, NewtonStats};

pub use crate::newton::NewtonConfig;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: NewtonError,
    },
    #[error(transparent)]
    Newton(#[from] NewtonError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Field(#[from] GdmError),
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
}

impl SolverError {
    /// Index of the failing time step, if the failure happened inside the time loop.
    pub fn step_index(&self) -> Option<usize> {
        match self {
            Self::Step { step, .. } => Some(*step),
            _ => None,
        }
    }

    pub fn is_nonconvergence(&self) -> bool {
        matches!(
            self,
            Self::Step { source: NewtonError::NonConvergence { .. } | NewtonError::LineSearch { .. }, .. }
                | Self::Newton(NewtonError::NonConvergence { .. } | NewtonError::LineSearch { .. })
        )
    }
}

/// Time levels `0 = t_0 < t_1 < ... < t_M = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self, SolverError> {
        if times.len() < 2 {
            return Err(SolverError::InvalidGrid("need at least one step".into()));
        }
        if times[0] != 0.0 {
            return Err(SolverError::InvalidGrid(format!("grid must start at 0, got {}", times[0])));
        }
        if let Some(w) = times.windows(2).find(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(SolverError::InvalidGrid(format!("grid not strictly increasing at {} -> {}", w[0], w[1])));
        }
        Ok(Self { times })
    }

    pub fn uniform(final_time: f64, steps: usize) -> Result<Self, SolverError> {
        if !(final_time > 0.0 && final_time.is_finite()) || steps == 0 {
            return Err(SolverError::InvalidGrid(format!(
                "need T > 0 and at least one step (T = {final_time}, M = {steps})"
            )));
        }
        let times = (0..=steps)
            .map(|m| if m == steps { final_time } else { final_time * m as f64 / steps as f64 })
            .collect();
        Self::new(times)
    }

    /// Uniform grid whose step is `dt` rounded so that an integer number of steps reaches `T`.
    pub fn with_step(final_time: f64, dt: f64) -> Result<Self, SolverError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SolverError::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        let ratio = final_time / dt;
        let steps = if (ratio - ratio.round()).abs() <= 1e-9 * ratio {
            ratio.round()
        } else {
            ratio.ceil()
        };
        Self::uniform(final_time, steps.max(1.0) as usize)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn num_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("non-empty grid")
    }

    /// Length of step `m` (1-based).
    pub fn dt(&self, m: usize) -> f64 {
        self.times[m] - self.times[m - 1]
    }

    pub fn dt_max(&self) -> f64 {
        (1..self.times.len()).map(|m| self.dt(m)).fold(0.0, f64::max)
    }

    pub fn dt_min(&self) -> f64 {
        (1..self.times.len()).map(|m| self.dt(m)).fold(f64::INFINITY, f64::min)
    }
}

/// How `u^(0)` is obtained from an initial datum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialPolicy {
    /// Nonlinear projection `P_D u_0`.
    #[default]
    Projected,
    /// Nodal interpolation.
    Nodal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeParams {
    pub flux: FluxParams,
    pub grid: TimeGrid,
    pub initial: InitialPolicy,
}

/// Per-step record of a time loop.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolveReport {
    pub newton_iterations: Vec<usize>,
    pub final_residuals: Vec<f64>,
    pub residual_histories: Vec<Vec<f64>>,
    /// Rounding floor of each step's residual.
    pub residual_floors: Vec<f64>,
    /// Step energy `E_m(u^(m))` at each accepted step.
    pub step_energies: Vec<f64>,
    /// `int sqrt(eps^2 + |grad_D u^(m)|^2)` for `m = 0..=M`.
    pub tv_energies: Vec<f64>,
    /// `||Pi_D u^(m)||_{L2}` for `m = 0..=M`.
    pub l2_norms: Vec<f64>,
    /// `||grad_D u^(m)||_{L1}` for `m = 0..=M`.
    pub gradient_l1_norms: Vec<f64>,
    pub step_seconds: Vec<f64>,
    pub newton: NewtonConfig,
}

impl SolveReport {
    pub fn max_newton_iterations(&self) -> usize {
        self.newton_iterations.iter().copied().max().unwrap_or(0)
    }

    pub fn total_seconds(&self) -> f64 {
        self.step_seconds.iter().sum()
    }

    /// `max_m ||Pi_D u^(m)||_{L2}`.
    pub fn max_l2_norm(&self) -> f64 {
        self.l2_norms.iter().copied().fold(0.0, f64::max)
    }

    /// `sum_m dt_m ||grad_D u^(m)||_{L1}`.
    pub fn gradient_l1_time_integral(&self, grid: &TimeGrid) -> f64 {
        (1..self.gradient_l1_norms.len())
            .map(|m| grid.dt(m) * self.gradient_l1_norms[m])
            .sum()
    }
}

/// Statistics of one implicit step.
pub type StepStats = NewtonStats;

impl ConvexProblem for StepProblem {
    fn energy(&self, x: &[f64]) -> f64 {
        StepProblem::energy(self, x).expect("dimension checked")
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.residual(x).expect("dimension checked")
    }

    fn hessian(&self, x: &[f64]) -> CsrMatrix {
        self.jacobian(x).expect("dimension checked")
    }

    fn residual_scale(&self) -> f64 {
        self.rhs().iter().map(|r| r * r).sum::<f64>().sqrt()
    }
}

/// `E_m(v)` for the step from `u_prev` to time `t` with step `dt`.
pub fn step_energy(
    v: &DiscreteField,
    u_prev: &DiscreteField,
    dt: f64,
    params: FluxParams,
    data: &dyn ProblemData,
    t: f64,
) -> Result<f64, SolverError> {
    Ok(StepProblem::new(u_prev, dt, params, data, t)?.energy(v.values())?)
}

/// Solves one implicit step by damped Newton from the initial guess `u_prev`.
pub fn newton_solve_step(
    u_prev: &DiscreteField,
    dt: f64,
    params: FluxParams,
    data: &dyn ProblemData,
    t: f64,
    cfg: &NewtonConfig,
) -> Result<(DiscreteField, StepStats), SolverError> {
    let step = StepProblem::new(u_prev, dt, params, data, t)?;
    let mut solver = SpdSolver::new(u_prev.discretisation().mass_matrix());
    solve_step(&step, u_prev, cfg, &mut solver)
}

fn solve_step(
    step: &StepProblem,
    u_prev: &DiscreteField,
    cfg: &NewtonConfig,
    solver: &mut SpdSolver,
) -> Result<(DiscreteField, StepStats), SolverError> {
    let (x, stats) = minimize(step, u_prev.values().to_vec(), cfg, solver)?;
    Ok((DiscreteField::new(u_prev.discretisation().clone(), x)?, stats))
}

fn l2_norm(gd: &P1Conforming, u: &[f64]) -> f64 {
    gd.mass_matrix().quadratic_form(u).max(0.0).sqrt()
}

fn gradient_l1(gd: &P1Conforming, u: &[f64]) -> f64 {
    gd.mesh()
        .cells()
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let g = gd.cell_gradient(u, c);
            cell.area * g[0].hypot(g[1])
        })
        .sum()
}

/// Runs all `M` steps from `u0`; the trajectory holds `M + 1` fields.
pub fn run_time_loop(
    u0: &DiscreteField,
    params: &SchemeParams,
    data: &dyn ProblemData,
    cfg: &NewtonConfig,
) -> Result<(Vec<DiscreteField>, SolveReport), SolverError> {
    cfg.validate()?;
    let gd: Arc<P1Conforming> = u0.discretisation().clone();
    let grid = &params.grid;
    let rule = QuadratureRule::degree4();
    let mut solver = SpdSolver::new(gd.mass_matrix());
    let mut report = SolveReport {
        newton: *cfg,
        ..Default::default()
    };
    let record_level = |report: &mut SolveReport, u: &[f64]| {
        report.tv_energies.push(total_variation(&gd, u, params.flux));
        report.l2_norms.push(l2_norm(&gd, u));
        report.gradient_l1_norms.push(gradient_l1(&gd, u));
    };
    record_level(&mut report, u0.values());

    let mut trajectory = Vec::with_capacity(grid.num_steps() + 1);
    trajectory.push(u0.clone());
    for m in 1..=grid.num_steps() {
        let start = Instant::now();
        let t = grid.times()[m];
        let dt = grid.dt(m);
        let load = assemble_load(&gd, data, params.flux.lambda(), t, &rule);
        let prev = trajectory.last().expect("non-empty trajectory");
        let step = StepProblem::with_load(prev, dt, params.flux, &load)?;
        let (u, stats) = match solve_step(&step, prev, cfg, &mut solver) {
            Ok(ok) => ok,
            Err(SolverError::Newton(source)) => return Err(SolverError::Step { step: m, source }),
            Err(e) => return Err(e),
        };
        report.newton_iterations.push(stats.iterations);
        report.final_residuals.push(stats.final_residual());
        report.step_energies.push(stats.energy_final);
        report.residual_floors.push(stats.residual_floor);
        report.residual_histories.push(stats.residual_history);
        record_level(&mut report, u.values());
        report.step_seconds.push(start.elapsed().as_secs_f64());
        trajectory.push(u);
    }
    Ok((trajectory, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{ConstantFidelity, NoData};

    #[test]
    fn time_grid_construction() {
        let g = TimeGrid::with_step(1e-2, 2e-5).unwrap();
        assert_eq!(g.num_steps(), 500);
        assert_eq!(g.final_time(), 1e-2);
        assert!((g.dt_max() / 2e-5 - 1.0).abs() < 1e-12 && (g.dt_min() / 2e-5 - 1.0).abs() < 1e-12);
        assert_eq!(TimeGrid::with_step(1.0, 0.3).unwrap().num_steps(), 4);
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.5]).is_err());
        assert!(TimeGrid::new(vec![0.1, 0.5]).is_err());
        assert!(TimeGrid::uniform(0.0, 3).is_err());
        assert!(TimeGrid::with_step(1.0, 0.0).is_err());
    }

    #[test]
    fn steady_state_needs_no_iterations() {
        let gd = Arc::new(P1Conforming::structured(4).unwrap());
        let c = DiscreteField::constant(gd, -0.4);
        let params = FluxParams::new(2e-5, 1.0).unwrap();
        let (u, stats) =
            newton_solve_step(&c, 2e-5, params, &ConstantFidelity(-0.4), 2e-5, &NewtonConfig::default()).unwrap();
        assert_eq!(stats.iterations, 0);
        assert_eq!(u.values(), c.values());
    }

    #[test]
    fn step_energy_decreases_and_is_coercive() {
        let gd = Arc::new(P1Conforming::structured(4).unwrap());
        let up = DiscreteField::interpolate(gd.clone(), |p| (3.0 * p[0]).sin() * p[1]);
        let params = FluxParams::new(1e-2, 0.5).unwrap();
        let (u, stats) = newton_solve_step(&up, 1e-3, params, &NoData, 1e-3, &NewtonConfig::default()).unwrap();
        let e_prev = step_energy(&up, &up, 1e-3, params, &NoData, 1e-3).unwrap();
        let e_new = step_energy(&u, &up, 1e-3, params, &NoData, 1e-3).unwrap();
        assert!(e_new <= e_prev);
        assert!((stats.energy_final - e_new).abs() < 1e-14);

        let dir = DiscreteField::interpolate(gd, |p| p[0] - 2.0 * p[1] + 0.3);
        let e1 = step_energy(&dir, &up, 1e-3, params, &NoData, 1e-3).unwrap();
        let far = dir.linear_combination(1e3, &dir, 0.0).unwrap();
        let e2 = step_energy(&far, &up, 1e-3, params, &NoData, 1e-3).unwrap();
        assert!(e2 > 1e4 * e1.abs().max(1.0));
    }

    #[test]
    fn nonconvergence_carries_step_index() {
        let gd = Arc::new(P1Conforming::structured(3).unwrap());
        let u0 = DiscreteField::interpolate(gd, |p| (5.0 * p[0]).cos());
        let params = SchemeParams {
            flux: FluxParams::new(1e-3, 0.0).unwrap(),
            grid: TimeGrid::uniform(0.1, 2).unwrap(),
            initial: InitialPolicy::Nodal,
        };
        let cfg = NewtonConfig {
            max_iterations: 1,
            ..Default::default()
        };
        let err = run_time_loop(&u0, &params, &NoData, &cfg).unwrap_err();
        assert_eq!(err.step_index(), Some(1));
        assert!(err.is_nonconvergence());
    }
}
