//! Manufactured-solution runs and mesh-refinement sweeps.

use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::analysis::{
    error_e1, error_e2, AnalysisError, ConvergenceReport, ConvergenceRow, E2Denominator, ManufacturedData,
    ManufacturedSolution,
};
use crate::assembly::{AssemblyError, FluxParams};
use crate::gdm::{DiscreteField, GradientDiscretisation, P1Conforming};
use crate::interpolator::initial_field;
use crate::newton::{NewtonConfig, NewtonError};
use crate::solver::{run_time_loop, InitialPolicy, SchemeParams, SolveReport, SolverError, TimeGrid};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("initial projection: {0}")]
    Projection(#[from] NewtonError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error("mesh {mesh_id}: {source}")]
    Case {
        mesh_id: String,
        #[source]
        source: Box<ExperimentError>,
    },
}

impl ExperimentError {
    /// Time step at which Newton failed, if that is the cause.
    pub fn failed_step(&self) -> Option<usize> {
        match self {
            Self::Solver(e) if e.is_nonconvergence() => e.step_index(),
            Self::Case { source, .. } => source.failed_step(),
            _ => None,
        }
    }

    pub fn is_nonconvergence(&self) -> bool {
        match self {
            Self::Solver(e) => e.is_nonconvergence(),
            Self::Projection(NewtonError::NonConvergence { .. } | NewtonError::LineSearch { .. }) => true,
            Self::Case { source, .. } => source.is_nonconvergence(),
            _ => false,
        }
    }
}

/// Time step as a function of the mesh size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    Fixed(f64),
    /// `dt = c h^beta`.
    Power { c: f64, beta: f64 },
}

impl StepRule {
    pub fn dt(&self, h: f64) -> f64 {
        match *self {
            Self::Fixed(dt) => dt,
            Self::Power { c, beta } => c * h.powf(beta),
        }
    }
}

/// Parameters of a manufactured-solution run, shared by all meshes of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ManufacturedCase {
    pub epsilon: f64,
    pub lambda: f64,
    pub final_time: f64,
    pub step: StepRule,
    pub initial: InitialPolicy,
    pub newton: NewtonConfig,
    pub e2_denominator: E2Denominator,
}

impl Default for ManufacturedCase {
    fn default() -> Self {
        Self {
            epsilon: 2e-5,
            lambda: 1.0,
            final_time: 1e-2,
            step: StepRule::Fixed(2e-5),
            initial: InitialPolicy::Projected,
            newton: NewtonConfig::default(),
            e2_denominator: E2Denominator::Gradient,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub h: f64,
    pub grid: TimeGrid,
    pub e1: f64,
    pub e2: f64,
    pub trajectory: Vec<DiscreteField>,
    pub report: SolveReport,
    pub wall_seconds: f64,
}

impl CaseResult {
    pub fn row(&self, mesh_id: impl Into<String>) -> ConvergenceRow {
        let its = &self.report.newton_iterations;
        ConvergenceRow {
            mesh_id: mesh_id.into(),
            h: self.h,
            dt: self.grid.dt_max(),
            e1: self.e1,
            e2: self.e2,
            max_newton_iterations: self.report.max_newton_iterations(),
            mean_newton_iterations: its.iter().sum::<usize>() as f64 / its.len().max(1) as f64,
            wall_seconds: self.wall_seconds,
        }
    }
}

/// Solves the forced problem whose exact solution is `ms` and measures E1 and E2.
pub fn run_manufactured(
    gd: Arc<P1Conforming>,
    case: &ManufacturedCase,
    ms: &dyn ManufacturedSolution,
) -> Result<CaseResult, ExperimentError> {
    let start = Instant::now();
    let h = gd.mesh().h_mesh();
    let flux = FluxParams::new(case.epsilon, case.lambda)?;
    let grid = TimeGrid::with_step(case.final_time, case.step.dt(h))?;
    let u0 = initial_field(
        gd,
        case.initial,
        case.epsilon,
        |p| ms.value(p, 0.0),
        |p| ms.gradient(p, 0.0),
        &case.newton,
    )?;
    let params = SchemeParams {
        flux,
        grid,
        initial: case.initial,
    };
    let data = ManufacturedData { solution: ms, params: flux };
    let (trajectory, report) = run_time_loop(&u0, &params, &data, &case.newton)?;
    let e1 = error_e1(&trajectory, ms, &params.grid)?;
    let e2 = error_e2(&trajectory, ms, &params.grid, case.e2_denominator)?;
    Ok(CaseResult {
        h,
        grid: params.grid,
        e1,
        e2,
        trajectory,
        report,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every mesh (in parallel) and assembles the report in the given order.
///
/// On failure the successful rows are returned alongside the first error.
pub fn convergence_sweep(
    meshes: Vec<(String, Arc<P1Conforming>)>,
    case: &ManufacturedCase,
    ms: &dyn ManufacturedSolution,
) -> Result<(ConvergenceReport, Vec<CaseResult>), (Vec<ConvergenceRow>, ExperimentError)> {
    let results: Vec<Result<CaseResult, ExperimentError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = meshes
            .iter()
            .map(|(_, gd)| {
                let gd = gd.clone();
                scope.spawn(move || run_manufactured(gd, case, ms))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("case thread panicked")).collect()
    });
    let mut rows = Vec::new();
    let mut cases = Vec::new();
    let mut failure = None;
    for ((id, _), result) in meshes.iter().zip(results) {
        match result {
            Ok(r) => {
                rows.push(r.row(id.clone()));
                cases.push(r);
            }
            Err(e) if failure.is_none() => {
                failure = Some(ExperimentError::Case {
                    mesh_id: id.clone(),
                    source: Box::new(e),
                })
            }
            Err(_) => {}
        }
    }
    if let Some(e) = failure {
        return Err((rows, e));
    }
    match ConvergenceReport::new(rows.clone()) {
        Ok(report) => Ok((report, cases)),
        Err(e) => Err((rows, e.into())),
    }
}
