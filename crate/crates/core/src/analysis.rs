//! Manufactured solutions, error norms and observed orders for convergence studies.

use std::f64::consts::PI;
use std::sync::Arc;

use thiserror::Error;

use crate::assembly::quadrature::QuadratureRule;
use crate::assembly::{AssemblyError, FluxParams, ProblemData, StepProblem};
use crate::gdm::{DiscreteField, GdmError, GradientDiscretisation, P1Conforming};
use crate::interpolator::{project, ProjectionProblem};
use crate::mesh::Point;
use crate::newton::{NewtonConfig, NewtonError};
use crate::solver::TimeGrid;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("trajectory is empty or has no time steps")]
    EmptyTrajectory,
    #[error("trajectory has {found} fields but the time grid has {expected} levels")]
    LengthMismatch { expected: usize, found: usize },
    #[error("reference norm is zero, relative error undefined")]
    ZeroDenominator,
    #[error("error at row {index} is not positive ({value:e})")]
    NonPositiveError { index: usize, value: f64 },
    #[error("mesh sizes must be strictly decreasing (row {index}: {previous} -> {next})")]
    NonDecreasingH { index: usize, previous: f64, next: f64 },
    #[error("at least two rows are needed, got {0}")]
    TooFewRows(usize),
    #[error("step index must be in 1..={max}, got {step}")]
    InvalidStep { step: usize, max: usize },
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Field(#[from] GdmError),
}

/// A closed-form space-time function with its derivatives.
pub trait ManufacturedSolution: Sync {
    fn value(&self, p: Point, t: f64) -> f64;
    fn gradient(&self, p: Point, t: f64) -> [f64; 2];
    /// Symmetric Hessian `[[u_xx, u_xy], [u_xy, u_yy]]`.
    fn hessian(&self, p: Point, t: f64) -> [[f64; 2]; 2];
    fn time_derivative(&self, p: Point, t: f64) -> f64;
}

/// `u(x, y, t) = a cos(t) cos(pi x) cos(pi y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSolution {
    pub amplitude: f64,
}

impl Default for CosineSolution {
    fn default() -> Self {
        Self { amplitude: 1.0 }
    }
}

impl ManufacturedSolution for CosineSolution {
    fn value(&self, p: Point, t: f64) -> f64 {
        self.amplitude * t.cos() * (PI * p[0]).cos() * (PI * p[1]).cos()
    }

    fn gradient(&self, p: Point, t: f64) -> [f64; 2] {
        let a = self.amplitude * t.cos();
        let (sx, cx) = (PI * p[0]).sin_cos();
        let (sy, cy) = (PI * p[1]).sin_cos();
        [-a * PI * sx * cy, -a * PI * cx * sy]
    }

    fn hessian(&self, p: Point, t: f64) -> [[f64; 2]; 2] {
        let a = self.amplitude * t.cos() * PI * PI;
        let (sx, cx) = (PI * p[0]).sin_cos();
        let (sy, cy) = (PI * p[1]).sin_cos();
        let off = a * sx * sy;
        [[-a * cx * cy, off], [off, -a * cx * cy]]
    }

    fn time_derivative(&self, p: Point, t: f64) -> f64 {
        -self.amplitude * t.sin() * (PI * p[0]).cos() * (PI * p[1]).cos()
    }
}

/// `div flux(grad u) = Delta u / s - (grad u . H grad u) / s^3`, `s = sqrt(eps^2 + |grad u|^2)`.
pub fn flux_divergence(ms: &dyn ManufacturedSolution, p: Point, t: f64, epsilon: f64) -> f64 {
    let g = ms.gradient(p, t);
    let h = ms.hessian(p, t);
    let s = (epsilon * epsilon + g[0] * g[0] + g[1] * g[1]).sqrt();
    let hg = [h[0][0] * g[0] + h[0][1] * g[1], h[1][0] * g[0] + h[1][1] * g[1]];
    (h[0][0] + h[1][1]) / s - (g[0] * hg[0] + g[1] * hg[1]) / (s * s * s)
}

/// Source `f` making `ms` an exact solution with fidelity target `g = 0`.
pub fn source_term(ms: &dyn ManufacturedSolution, p: Point, t: f64, params: FluxParams) -> f64 {
    ms.time_derivative(p, t) - flux_divergence(ms, p, t, params.epsilon()) + params.lambda() * ms.value(p, t)
}

/// Problem data of the manufactured case: `g = 0` and `f = source_term`.
pub struct ManufacturedData<'a> {
    pub solution: &'a dyn ManufacturedSolution,
    pub params: FluxParams,
}

impl ProblemData for ManufacturedData<'_> {
    fn source(&self, p: Point, t: f64) -> f64 {
        source_term(self.solution, p, t, self.params)
    }
}

/// `||Pi_D u - w||_{L2}` by quadrature.
pub fn l2_error(u: &DiscreteField, w: impl Fn(Point) -> f64, rule: &QuadratureRule) -> f64 {
    let gd = u.discretisation();
    let v = u.values();
    rule.integrate(gd.mesh(), |c, p, bary| {
        let t = gd.mesh().triangles()[c];
        let d = bary[0] * v[t[0]] + bary[1] * v[t[1]] + bary[2] * v[t[2]] - w(p);
        d * d
    })
    .max(0.0)
    .sqrt()
}

/// `||grad_D u - w||_{L1}` by quadrature.
pub fn gradient_l1_error(u: &DiscreteField, w: impl Fn(Point) -> [f64; 2], rule: &QuadratureRule) -> f64 {
    let gd = u.discretisation();
    rule.integrate(gd.mesh(), |c, p, _| {
        let g = gd.cell_gradient(u.values(), c);
        let e = w(p);
        (g[0] - e[0]).hypot(g[1] - e[1])
    })
}

fn l2_norm_exact(gd: &P1Conforming, w: impl Fn(Point) -> f64, rule: &QuadratureRule) -> f64 {
    rule.integrate(gd.mesh(), |_, p, _| w(p).powi(2)).max(0.0).sqrt()
}

fn l1_norm_exact(gd: &P1Conforming, w: impl Fn(Point) -> f64, rule: &QuadratureRule) -> f64 {
    rule.integrate(gd.mesh(), |_, p, _| w(p).abs())
}

fn check_trajectory(trajectory: &[DiscreteField], grid: &TimeGrid) -> Result<(), AnalysisError> {
    if trajectory.len() < 2 {
        return Err(AnalysisError::EmptyTrajectory);
    }
    if trajectory.len() != grid.times().len() {
        return Err(AnalysisError::LengthMismatch {
            expected: grid.times().len(),
            found: trajectory.len(),
        });
    }
    Ok(())
}

/// Relative `L^inf(0,T; L^2)` error over the levels `m = 1..=M`.
pub fn error_e1(
    trajectory: &[DiscreteField],
    ms: &dyn ManufacturedSolution,
    grid: &TimeGrid,
) -> Result<f64, AnalysisError> {
    check_trajectory(trajectory, grid)?;
    let rule = QuadratureRule::degree4();
    let gd = trajectory[0].discretisation();
    let mut num: f64 = 0.0;
    let mut den: f64 = 0.0;
    for (u, &t) in trajectory.iter().zip(grid.times()).skip(1) {
        num = num.max(l2_error(u, |p| ms.value(p, t), &rule));
        den = den.max(l2_norm_exact(gd, |p| ms.value(p, t), &rule));
    }
    if den == 0.0 {
        return Err(AnalysisError::ZeroDenominator);
    }
    Ok(num / den)
}

/// Normalisation of the gradient error [`error_e2`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum E2Denominator {
    /// `||grad u||_{L2(0,T; L1)}`, matching the numerator.
    #[default]
    Gradient,
    /// `||u||_{L2(0,T; L1)}`.
    Value,
}

/// Relative `L^2(0,T; L^1)` gradient error with right-endpoint sampling in time.
pub fn error_e2(
    trajectory: &[DiscreteField],
    ms: &dyn ManufacturedSolution,
    grid: &TimeGrid,
    denominator: E2Denominator,
) -> Result<f64, AnalysisError> {
    check_trajectory(trajectory, grid)?;
    let rule = QuadratureRule::degree4();
    let gd = trajectory[0].discretisation();
    let mut num = 0.0;
    let mut den = 0.0;
    for m in 1..trajectory.len() {
        let t = grid.times()[m];
        let dt = grid.dt(m);
        num += dt * gradient_l1_error(&trajectory[m], |p| ms.gradient(p, t), &rule).powi(2);
        let reference = match denominator {
            E2Denominator::Gradient => l1_norm_exact(
                gd,
                |p| {
                    let g = ms.gradient(p, t);
                    g[0].hypot(g[1])
                },
                &rule,
            ),
            E2Denominator::Value => l1_norm_exact(gd, |p| ms.value(p, t), &rule),
        };
        den += dt * reference * reference;
    }
    if den == 0.0 {
        return Err(AnalysisError::ZeroDenominator);
    }
    Ok((num / den).sqrt())
}

/// Log-log slopes `ln(e_i / e_{i+1}) / ln(h_i / h_{i+1})` between consecutive `(h, e)` rows.
pub fn observed_order(rows: &[(f64, f64)]) -> Result<Vec<f64>, AnalysisError> {
    if rows.len() < 2 {
        return Err(AnalysisError::TooFewRows(rows.len()));
    }
    for (index, &(_, e)) in rows.iter().enumerate() {
        if !(e > 0.0) {
            return Err(AnalysisError::NonPositiveError { index, value: e });
        }
    }
    for (i, w) in rows.windows(2).enumerate() {
        if !(w[1].0 < w[0].0) || !(w[1].0 > 0.0) {
            return Err(AnalysisError::NonDecreasingH {
                index: i + 1,
                previous: w[0].0,
                next: w[1].0,
            });
        }
    }
    Ok(rows
        .windows(2)
        .map(|w| (w[0].1 / w[1].1).ln() / (w[0].0 / w[1].0).ln())
        .collect())
}

/// Consistency functional of the scheme at step `step` for the discrete trajectory `projected`
/// (typically `P_D u(t^(l))`), tested against `v`:
///
/// `int (Pi w^l - Pi w^(l-1))/dt Pi v + int flux(grad w^l) . grad v + lambda int (Pi w^l - g) Pi v - int f(t^l) Pi v`.
pub fn consistency_residual(
    projected: &[DiscreteField],
    v: &DiscreteField,
    step: usize,
    grid: &TimeGrid,
    params: FluxParams,
    data: &dyn ProblemData,
) -> Result<f64, AnalysisError> {
    if step == 0 || step >= projected.len() || step > grid.num_steps() {
        return Err(AnalysisError::InvalidStep {
            step,
            max: grid.num_steps().min(projected.len().saturating_sub(1)),
        });
    }
    let dt = grid.dt(step);
    let problem = StepProblem::new(&projected[step - 1], dt, params, data, grid.times()[step])?;
    let r = problem.residual(projected[step].values())?;
    if v.values().len() != r.len() {
        return Err(GdmError::DimensionMismatch {
            expected: r.len(),
            found: v.values().len(),
        }
        .into());
    }
    Ok(r.iter().zip(v.values()).map(|(a, b)| a * b).sum::<f64>() / dt)
}

/// `P_D u(t)` at every level of `grid`.
pub fn projected_trajectory(
    gd: Arc<P1Conforming>,
    ms: &dyn ManufacturedSolution,
    grid: &TimeGrid,
    epsilon: f64,
    newton: &NewtonConfig,
) -> Result<Vec<DiscreteField>, NewtonError> {
    let rule = QuadratureRule::degree4();
    grid.times()
        .iter()
        .map(|&t| {
            let problem = ProjectionProblem::new(gd.clone(), epsilon, |p| ms.value(p, t), |p| ms.gradient(p, t), &rule)?;
            project(&problem, newton).map(|(f, _)| f)
        })
        .collect()
}

/// One mesh of a convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub mesh_id: String,
    pub h: f64,
    pub dt: f64,
    pub e1: f64,
    pub e2: f64,
    pub max_newton_iterations: usize,
    pub mean_newton_iterations: f64,
    pub wall_seconds: f64,
}

/// Rows sorted by decreasing `h` with orders between consecutive rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub order_e1: Vec<f64>,
    pub order_e2: Vec<f64>,
}

impl ConvergenceReport {
    pub fn new(mut rows: Vec<ConvergenceRow>) -> Result<Self, AnalysisError> {
        rows.sort_by(|a, b| b.h.total_cmp(&a.h));
        let pairs = |f: fn(&ConvergenceRow) -> f64| rows.iter().map(|r| (r.h, f(r))).collect::<Vec<_>>();
        let order_e1 = observed_order(&pairs(|r| r.e1))?;
        let order_e2 = observed_order(&pairs(|r| r.e2))?;
        Ok(Self { rows, order_e1, order_e2 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_derivatives_match_finite_differences() {
        let ms = CosineSolution::default();
        let h = 1e-5;
        for &(p, t) in &[([0.3, 0.7], 0.2), ([0.91, 0.05], 1.3), ([0.5, 0.5], 0.0)] {
            let g = ms.gradient(p, t);
            let hs = ms.hessian(p, t);
            for k in 0..2 {
                let mut a = p;
                let mut b = p;
                a[k] += h;
                b[k] -= h;
                let fd = (ms.value(a, t) - ms.value(b, t)) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + g[k].abs()));
                let (ga, gb) = (ms.gradient(a, t), ms.gradient(b, t));
                for j in 0..2 {
                    let fd = (ga[j] - gb[j]) / (2.0 * h);
                    assert!((fd - hs[j][k]).abs() <= 1e-6 * (1.0 + hs[j][k].abs()));
                }
            }
            let fd = (ms.value(p, t + h) - ms.value(p, t - h)) / (2.0 * h);
            assert!((fd - ms.time_derivative(p, t)).abs() <= 1e-6);
        }
    }

    #[test]
    fn source_at_critical_point() {
        let params = FluxParams::new(2e-5, 1.0).unwrap();
        let f = source_term(&CosineSolution::default(), [0.0, 0.0], 0.0, params);
        let expected = 2.0 * PI * PI / 2e-5 + 1.0;
        assert!((f - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn observed_order_examples() {
        let o = observed_order(&[(0.25, 0.1), (0.125, 0.06)]).unwrap();
        assert!((o[0] - 0.7369655941662062).abs() < 1e-12);
        let lin: Vec<_> = [0.5, 0.25, 0.1].iter().map(|&h| (h, 3.0 * h)).collect();
        assert!(observed_order(&lin).unwrap().iter().all(|o| (o - 1.0).abs() < 1e-12));
        let quad: Vec<_> = [0.5, 0.25, 0.1].iter().map(|&h| (h, 3.0 * h * h)).collect();
        assert!(observed_order(&quad).unwrap().iter().all(|o| (o - 2.0).abs() < 1e-12));
        assert!(matches!(
            observed_order(&[(0.1, 1.0), (0.1, 0.5)]),
            Err(AnalysisError::NonDecreasingH { .. })
        ));
        assert!(matches!(
            observed_order(&[(0.2, 1.0), (0.1, 0.0)]),
            Err(AnalysisError::NonPositiveError { index: 1, .. })
        ));
        assert!(matches!(observed_order(&[(0.2, 1.0)]), Err(AnalysisError::TooFewRows(1))));
    }

    #[test]
    fn zero_reference_is_an_error() {
        let zero = CosineSolution { amplitude: 0.0 };
        let gd = Arc::new(P1Conforming::structured(2).unwrap());
        let grid = TimeGrid::uniform(0.1, 2).unwrap();
        let traj = vec![DiscreteField::zeros(gd); 3];
        assert_eq!(error_e1(&traj, &zero, &grid), Err(AnalysisError::ZeroDenominator));
        assert_eq!(
            error_e2(&traj, &zero, &grid, E2Denominator::Gradient),
            Err(AnalysisError::ZeroDenominator)
        );
        assert_eq!(error_e1(&traj[..1], &zero, &grid), Err(AnalysisError::EmptyTrajectory));
    }

    #[test]
    fn report_sorts_rows() {
        let row = |h: f64, e: f64| ConvergenceRow {
            mesh_id: format!("{h}"),
            h,
            dt: h,
            e1: e,
            e2: e * e,
            max_newton_iterations: 1,
            mean_newton_iterations: 1.0,
            wall_seconds: 0.0,
        };
        let r = ConvergenceReport::new(vec![row(0.1, 0.1), row(0.2, 0.2)]).unwrap();
        assert_eq!(r.rows[0].h, 0.2);
        assert!((r.order_e1[0] - 1.0).abs() < 1e-12);
        assert!((r.order_e2[0] - 2.0).abs() < 1e-12);
    }
}
