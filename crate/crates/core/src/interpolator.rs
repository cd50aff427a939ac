//! Nonlinear projection `P_D u`: the discrete field whose regularised flux matches
//! the flux of `grad u` against every discrete test gradient.
//!
//! `P_D u` minimises `F(v) = int sqrt(eps^2 + |grad_D v|^2) - l_u(v)` with
//! `l_u(w) = int flux(grad u) . grad_D w`. Only gradients enter `F`, so the
//! additive constant is fixed by requiring `int Pi_D v = int u`.

use std::sync::Arc;

use crate::assembly::quadrature::QuadratureRule;
use crate::assembly::{diffusion_jacobian, diffusion_operator, total_variation, FluxParams};
use crate::gdm::{DiscreteField, GradientDiscretisation, P1Conforming};
use crate::linalg::{CsrMatrix, LinearSolveError, SpdSolver};
use crate::mesh::Point;
use crate::newton::{minimize, ConvexProblem, NewtonConfig, NewtonError, NewtonStats};
use crate::solver::InitialPolicy;

#[derive(Debug, Clone)]
pub struct ProjectionProblem {
    gd: Arc<P1Conforming>,
    params: FluxParams,
    /// `l_u(phi_k)` for every basis function.
    load: Vec<f64>,
    /// Required value of `int Pi_D v`.
    target_integral: f64,
    /// `int phi_k`, so that `int Pi_D v = weights . v`.
    weights: Vec<f64>,
    initial_guess: Vec<f64>,
}

impl ProjectionProblem {
    pub fn new(
        gd: Arc<P1Conforming>,
        epsilon: f64,
        u: impl Fn(Point) -> f64,
        grad_u: impl Fn(Point) -> [f64; 2],
        rule: &QuadratureRule,
    ) -> Result<Self, NewtonError> {
        let params =
            FluxParams::new(epsilon, 0.0).map_err(|e| NewtonError::InvalidConfig(e.to_string()))?;
        let mesh = gd.mesh();
        let mut load = vec![0.0; gd.dim()];
        let mut target_integral = 0.0;
        for (c, tri) in mesh.triangles().iter().enumerate() {
            let cell = mesh.cell(c);
            let mut mean_flux = [0.0; 2];
            for (bary, w) in rule.iter() {
                let p = mesh.map_point(c, bary);
                let q = params.flux(grad_u(p));
                mean_flux[0] += w * q[0];
                mean_flux[1] += w * q[1];
                target_integral += cell.area * w * u(p);
            }
            for k in 0..3 {
                let g = cell.basis_gradients[k];
                load[tri[k]] += cell.area * (mean_flux[0] * g[0] + mean_flux[1] * g[1]);
            }
        }
        let weights = gd.mass_matrix().mul_vec(&vec![1.0; gd.dim()]);
        let mut initial_guess = gd.interpolate(&u);
        let area: f64 = weights.iter().sum();
        let shift = (target_integral - dot(&weights, &initial_guess)) / area;
        initial_guess.iter_mut().for_each(|v| *v += shift);
        Ok(Self {
            gd,
            params,
            load,
            target_integral,
            weights,
            initial_guess,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.params.epsilon()
    }

    pub fn target_integral(&self) -> f64 {
        self.target_integral
    }

    pub fn initial_guess(&self) -> &[f64] {
        &self.initial_guess
    }

    /// Residual of the projection equation tested against every basis function.
    pub fn euler_lagrange_residual(&self, v: &[f64]) -> Vec<f64> {
        let mut r = diffusion_operator(&self.gd, v, self.params);
        for (ri, li) in r.iter_mut().zip(&self.load) {
            *ri -= li;
        }
        r
    }

    fn restore_anchor(&self, v: &mut [f64]) {
        let area: f64 = self.weights.iter().sum();
        let shift = (self.target_integral - dot(&self.weights, v)) / area;
        v.iter_mut().for_each(|x| *x += shift);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ConvexProblem for ProjectionProblem {
    fn energy(&self, x: &[f64]) -> f64 {
        total_variation(&self.gd, x, self.params) - dot(&self.load, x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.euler_lagrange_residual(x)
    }

    fn hessian(&self, x: &[f64]) -> CsrMatrix {
        diffusion_jacobian(&self.gd, x, self.params)
    }

    fn residual_scale(&self) -> f64 {
        self.load.iter().map(|l| l * l).sum::<f64>().sqrt()
    }

    /// Newton direction within the anchored subspace `weights . d = 0`.
    ///
    /// The Hessian annihilates constants and the gradient sums to zero, so pinning one
    /// unknown yields an SPD system whose solution is a valid direction up to a constant.
    fn direction(&self, mut hessian: CsrMatrix, gradient: &[f64], solver: &mut SpdSolver) -> Result<Vec<f64>, LinearSolveError> {
        hessian.pin_unknown(0);
        let mut rhs: Vec<f64> = gradient.iter().map(|g| -g).collect();
        rhs[0] = 0.0;
        let mut d = solver.solve(&hessian, &rhs)?;
        let area: f64 = self.weights.iter().sum();
        let shift = dot(&self.weights, &d) / area;
        d.iter_mut().for_each(|x| *x -= shift);
        Ok(d)
    }
}

/// Computes `P_D u` by damped Newton from the nodal interpolant.
pub fn project(problem: &ProjectionProblem, cfg: &NewtonConfig) -> Result<(DiscreteField, NewtonStats), NewtonError> {
    project_from(problem, problem.initial_guess.clone(), cfg)
}

/// Same as [`project`] from a caller-supplied initial guess (shifted onto the anchor).
pub fn project_from(
    problem: &ProjectionProblem,
    mut guess: Vec<f64>,
    cfg: &NewtonConfig,
) -> Result<(DiscreteField, NewtonStats), NewtonError> {
    if guess.len() != problem.gd.dim() {
        return Err(NewtonError::InvalidConfig(format!(
            "initial guess has {} entries, expected {}",
            guess.len(),
            problem.gd.dim()
        )));
    }
    problem.restore_anchor(&mut guess);
    let mut solver = SpdSolver::new(problem.gd.mass_matrix());
    let (mut x, stats) = minimize(problem, guess, cfg, &mut solver)?;
    problem.restore_anchor(&mut x);
    let field = DiscreteField::new(problem.gd.clone(), x).map_err(|e| NewtonError::InvalidConfig(e.to_string()))?;
    Ok((field, stats))
}

/// Error measures of a projected field against the exact function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionDiagnostics {
    pub grad_l2_error: f64,
    pub grad_l1_error: f64,
    pub value_l2_error: f64,
    pub max_cell_gradient: f64,
}

pub fn projection_diagnostics(
    u: impl Fn(Point) -> f64,
    grad_u: impl Fn(Point) -> [f64; 2],
    projected: &DiscreteField,
    rule: &QuadratureRule,
) -> ProjectionDiagnostics {
    let gd = projected.discretisation();
    let mesh = gd.mesh();
    let v = projected.values();
    let (mut g2, mut g1, mut e2) = (0.0, 0.0, 0.0);
    let mut max_cell_gradient: f64 = 0.0;
    for c in 0..mesh.num_cells() {
        let g = gd.cell_gradient(v, c);
        max_cell_gradient = max_cell_gradient.max(g[0].hypot(g[1]));
        let t = mesh.triangles()[c];
        let area = mesh.cell(c).area;
        for (bary, w) in rule.iter() {
            let p = mesh.map_point(c, bary);
            let e = grad_u(p);
            let d = (g[0] - e[0]).hypot(g[1] - e[1]);
            g2 += area * w * d * d;
            g1 += area * w * d;
            let val = bary[0] * v[t[0]] + bary[1] * v[t[1]] + bary[2] * v[t[2]];
            e2 += area * w * (val - u(p)).powi(2);
        }
    }
    ProjectionDiagnostics {
        grad_l2_error: g2.sqrt(),
        grad_l1_error: g1,
        value_l2_error: e2.sqrt(),
        max_cell_gradient,
    }
}

/// `u^(0)` from the initial datum according to `policy`.
pub fn initial_field(
    gd: Arc<P1Conforming>,
    policy: InitialPolicy,
    epsilon: f64,
    u0: impl Fn(Point) -> f64,
    grad_u0: impl Fn(Point) -> [f64; 2],
    cfg: &NewtonConfig,
) -> Result<DiscreteField, NewtonError> {
    match policy {
        InitialPolicy::Nodal => Ok(DiscreteField::interpolate(gd, u0)),
        InitialPolicy::Projected => {
            let problem = ProjectionProblem::new(gd, epsilon, u0, grad_u0, &QuadratureRule::degree4())?;
            project(&problem, cfg).map(|(f, _)| f)
        }
    }
}
