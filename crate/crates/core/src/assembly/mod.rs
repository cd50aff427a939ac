//! Regularised flux, quadrature, and assembly of one implicit step.
//!
//! One step of the scheme seeks `u` with, for every basis function `phi_k`,
//!
//! ```text
//! (1 + lambda dt) int u phi_k + dt int flux(grad u) . grad phi_k
//!     = int u_prev phi_k + dt int (lambda g + f(t)) phi_k
//! ```
//!
//! where `flux(mu) = mu / sqrt(eps^2 + |mu|^2)` and `f` is an optional
//! manufactured source. The residual is the gradient of the convex step
//! energy, and the Jacobian is its Hessian.

pub mod quadrature;

use std::sync::Arc;

use thiserror::Error;

use crate::gdm::{DiscreteField, GdmError, GradientDiscretisation, P1Conforming};
use crate::linalg::CsrMatrix;
use crate::mesh::Point;
use quadrature::QuadratureRule;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Field(#[from] GdmError),
}

/// Regularisation `epsilon > 0` and fidelity weight `lambda >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxParams {
    epsilon: f64,
    lambda: f64,
}

impl FluxParams {
    pub fn new(epsilon: f64, lambda: f64) -> Result<Self, AssemblyError> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(AssemblyError::InvalidArgument(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(AssemblyError::InvalidArgument(format!(
                "lambda must be nonnegative, got {lambda}"
            )));
        }
        Ok(Self { epsilon, lambda })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    #[inline]
    pub fn flux(&self, mu: [f64; 2]) -> [f64; 2] {
        flux_raw(mu, self.epsilon)
    }

    #[inline]
    pub fn flux_jacobian(&self, mu: [f64; 2]) -> [[f64; 2]; 2] {
        flux_jacobian_raw(mu, self.epsilon)
    }

    /// `sqrt(eps^2 + |mu|^2)`, the density whose gradient is the flux.
    #[inline]
    pub fn density(&self, mu: [f64; 2]) -> f64 {
        self.epsilon.hypot(mu[0].hypot(mu[1]))
    }
}

#[inline]
fn flux_raw(mu: [f64; 2], eps: f64) -> [f64; 2] {
    let s = eps.hypot(mu[0].hypot(mu[1]));
    [mu[0] / s, mu[1] / s]
}

#[inline]
fn flux_jacobian_raw(mu: [f64; 2], eps: f64) -> [[f64; 2]; 2] {
    let s = eps.hypot(mu[0].hypot(mu[1]));
    let s3 = s * s * s;
    let off = -mu[0] * mu[1] / s3;
    [
        [(s * s - mu[0] * mu[0]) / s3, off],
        [off, (s * s - mu[1] * mu[1]) / s3],
    ]
}

fn check_epsilon(epsilon: f64) -> Result<(), AssemblyError> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(AssemblyError::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )))
    }
}

/// `mu / sqrt(eps^2 + |mu|^2)`.
pub fn flux(mu: [f64; 2], epsilon: f64) -> Result<[f64; 2], AssemblyError> {
    check_epsilon(epsilon)?;
    Ok(flux_raw(mu, epsilon))
}

/// Derivative of [`flux`]: `(s^2 I - mu mu^T) / s^3` with `s = sqrt(eps^2 + |mu|^2)`.
pub fn flux_jacobian(mu: [f64; 2], epsilon: f64) -> Result<[[f64; 2]; 2], AssemblyError> {
    check_epsilon(epsilon)?;
    Ok(flux_jacobian_raw(mu, epsilon))
}

/// Data of the evolution problem: fidelity target `g` and an optional source `f(x, t)`.
pub trait ProblemData: Sync {
    fn fidelity(&self, _p: Point) -> f64 {
        0.0
    }

    fn source(&self, _p: Point, _t: f64) -> f64 {
        0.0
    }
}

/// `g = 0` and no source.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoData;

impl ProblemData for NoData {}

/// Constant fidelity target `g = c`, no source.
#[derive(Debug, Clone, Copy)]
pub struct ConstantFidelity(pub f64);

impl ProblemData for ConstantFidelity {
    fn fidelity(&self, _p: Point) -> f64 {
        self.0
    }
}

/// Problem data given by closures.
pub struct FnData<G, F> {
    pub fidelity: G,
    pub source: F,
}

impl<G, F> ProblemData for FnData<G, F>
where
    G: Fn(Point) -> f64 + Sync,
    F: Fn(Point, f64) -> f64 + Sync,
{
    fn fidelity(&self, p: Point) -> f64 {
        (self.fidelity)(p)
    }

    fn source(&self, p: Point, t: f64) -> f64 {
        (self.source)(p, t)
    }
}

/// Consistent mass matrix with local blocks `|T|/12 [[2,1,1],[1,2,1],[1,1,2]]`.
pub fn assemble_mass(gd: &P1Conforming) -> CsrMatrix {
    gd.mass_matrix().clone()
}

/// Load vector `int (lambda g + f(., t)) phi_k`.
pub fn assemble_load(
    gd: &P1Conforming,
    data: &dyn ProblemData,
    lambda: f64,
    t: f64,
    rule: &QuadratureRule,
) -> Vec<f64> {
    let mesh = gd.mesh();
    let mut load = vec![0.0; gd.dim()];
    for (c, tri) in mesh.triangles().iter().enumerate() {
        let area = mesh.cell(c).area;
        let mut local = [0.0; 3];
        for (bary, w) in rule.iter() {
            let p = mesh.map_point(c, bary);
            let mut value = data.source(p, t);
            if lambda != 0.0 {
                value += lambda * data.fidelity(p);
            }
            for k in 0..3 {
                local[k] += w * value * bary[k];
            }
        }
        for k in 0..3 {
            load[tri[k]] += area * local[k];
        }
    }
    load
}

/// The nonlinear system of one implicit step with `u_prev`, `dt`, and the data frozen.
#[derive(Debug, Clone)]
pub struct StepProblem {
    gd: Arc<P1Conforming>,
    params: FluxParams,
    dt: f64,
    /// `M u_prev + dt * load`.
    rhs: Vec<f64>,
}

impl StepProblem {
    pub fn new(
        u_prev: &DiscreteField,
        dt: f64,
        params: FluxParams,
        data: &dyn ProblemData,
        t: f64,
    ) -> Result<Self, AssemblyError> {
        let gd = u_prev.discretisation().clone();
        let load = assemble_load(&gd, data, params.lambda(), t, &QuadratureRule::degree4());
        Self::with_load(u_prev, dt, params, &load)
    }

    /// Step problem with a precomputed load vector `int (lambda g + f) phi_k`.
    pub fn with_load(u_prev: &DiscreteField, dt: f64, params: FluxParams, load: &[f64]) -> Result<Self, AssemblyError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(AssemblyError::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        let gd = u_prev.discretisation().clone();
        if load.len() != gd.dim() {
            return Err(GdmError::DimensionMismatch {
                expected: gd.dim(),
                found: load.len(),
            }
            .into());
        }
        let mut rhs = gd.mass_matrix().mul_vec(u_prev.values());
        for (r, l) in rhs.iter_mut().zip(load) {
            *r += dt * l;
        }
        Ok(Self { gd, params, dt, rhs })
    }

    pub fn discretisation(&self) -> &Arc<P1Conforming> {
        &self.gd
    }

    pub fn params(&self) -> FluxParams {
        self.params
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `M u_prev + dt * load`.
    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    fn mass_coefficient(&self) -> f64 {
        1.0 + self.params.lambda() * self.dt
    }

    fn check(&self, u: &[f64]) -> Result<(), AssemblyError> {
        if u.len() != self.gd.dim() {
            return Err(GdmError::DimensionMismatch {
                expected: self.gd.dim(),
                found: u.len(),
            }
            .into());
        }
        Ok(())
    }

    /// Convex step energy
    /// `1/2 (1 + lambda dt) |u|_M^2 + dt sum |T| sqrt(eps^2 + |grad u|^2) - u . rhs`.
    pub fn energy(&self, u: &[f64]) -> Result<f64, AssemblyError> {
        self.check(u)?;
        let quad = 0.5 * self.mass_coefficient() * self.gd.mass_matrix().quadratic_form(u);
        let linear: f64 = u.iter().zip(&self.rhs).map(|(a, b)| a * b).sum();
        Ok(quad + self.dt * total_variation(&self.gd, u, self.params) - linear)
    }

    /// Residual of the step equation, equal to the gradient of [`StepProblem::energy`].
    pub fn residual(&self, u: &[f64]) -> Result<Vec<f64>, AssemblyError> {
        self.check(u)?;
        let mut r = self.gd.mass_matrix().mul_vec(u);
        let a = self.mass_coefficient();
        for (ri, bi) in r.iter_mut().zip(&self.rhs) {
            *ri = a * *ri - bi;
        }
        let diffusion = diffusion_operator(&self.gd, u, self.params);
        for (ri, di) in r.iter_mut().zip(&diffusion) {
            *ri += self.dt * di;
        }
        Ok(r)
    }

    /// Jacobian `(1 + lambda dt) M + dt sum |T| B^T Dflux(grad u) B`.
    pub fn jacobian(&self, u: &[f64]) -> Result<CsrMatrix, AssemblyError> {
        self.check(u)?;
        let mut j = diffusion_jacobian(&self.gd, u, self.params);
        j.scale(self.dt);
        j.add_scaled(self.mass_coefficient(), self.gd.mass_matrix());
        Ok(j)
    }
}

/// `sum_T |T| sqrt(eps^2 + |grad u|_T|^2)`.
pub fn total_variation(gd: &P1Conforming, u: &[f64], params: FluxParams) -> f64 {
    gd.mesh()
        .cells()
        .iter()
        .enumerate()
        .map(|(c, cell)| cell.area * params.density(gd.cell_gradient(u, c)))
        .sum()
}

/// Vector `int flux(grad u) . grad phi_k`, exact since gradients are cellwise constant.
pub fn diffusion_operator(gd: &P1Conforming, u: &[f64], params: FluxParams) -> Vec<f64> {
    let mesh = gd.mesh();
    let mut out = vec![0.0; gd.dim()];
    for (c, tri) in mesh.triangles().iter().enumerate() {
        let cell = mesh.cell(c);
        let q = params.flux(gd.cell_gradient(u, c));
        for k in 0..3 {
            let g = cell.basis_gradients[k];
            out[tri[k]] += cell.area * (q[0] * g[0] + q[1] * g[1]);
        }
    }
    out
}

/// Derivative of [`diffusion_operator`] with respect to the nodal values.
pub fn diffusion_jacobian(gd: &P1Conforming, u: &[f64], params: FluxParams) -> CsrMatrix {
    let mesh = gd.mesh();
    let mut j = gd.zero_matrix();
    for c in 0..mesh.num_cells() {
        let cell = mesh.cell(c);
        let d = params.flux_jacobian(gd.cell_gradient(u, c));
        let g = &cell.basis_gradients;
        let pos = gd.cell_positions(c);
        for a in 0..3 {
            let dg = [
                d[0][0] * g[a][0] + d[0][1] * g[a][1],
                d[1][0] * g[a][0] + d[1][1] * g[a][1],
            ];
            for b in 0..3 {
                j.values_mut()[pos[b][a]] += cell.area * (dg[0] * g[b][0] + dg[1] * g[b][1]);
            }
        }
    }
    j
}

fn check_pair(u: &DiscreteField, other: &DiscreteField) -> Result<(), AssemblyError> {
    if u.same_discretisation(other) || u.values().len() == other.values().len() {
        Ok(())
    } else {
        Err(GdmError::DimensionMismatch {
            expected: u.values().len(),
            found: other.values().len(),
        }
        .into())
    }
}

/// Residual of one implicit step at candidate `u`; zero exactly when `u` solves the step.
/// Data are evaluated at the step's end time `t`.
pub fn assemble_step_residual(
    u: &DiscreteField,
    u_prev: &DiscreteField,
    dt: f64,
    params: FluxParams,
    data: &dyn ProblemData,
    t: f64,
) -> Result<Vec<f64>, AssemblyError> {
    check_pair(u, u_prev)?;
    StepProblem::new(u_prev, dt, params, data, t)?.residual(u.values())
}

/// Jacobian of [`assemble_step_residual`] with respect to `u`; it does not depend on `u_prev` or the data.
pub fn assemble_step_jacobian(u: &DiscreteField, dt: f64, params: FluxParams) -> Result<CsrMatrix, AssemblyError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(AssemblyError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let gd = u.discretisation();
    let mut j = diffusion_jacobian(gd, u.values(), params);
    j.scale(dt);
    j.add_scaled(1.0 + params.lambda() * dt, gd.mass_matrix());
    Ok(j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::TriMesh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_triangles() -> Arc<P1Conforming> {
        Arc::new(P1Conforming::new(TriMesh::generate_structured(1).unwrap()))
    }

    #[test]
    fn flux_examples() {
        assert_eq!(flux([0.0, 0.0], 0.3).unwrap(), [0.0, 0.0]);
        let q = flux([3.0, 4.0], 1.0).unwrap();
        let s = 26f64.sqrt();
        assert!((q[0] - 3.0 / s).abs() < 1e-15 && (q[1] - 4.0 / s).abs() < 1e-15);
        assert!((q[0] - 0.58835).abs() < 1e-5 && (q[1] - 0.78446).abs() < 1e-5);
        let big = flux([1e8, 0.0], 1.0).unwrap();
        assert!(big[0].hypot(big[1]) > 1.0 - 1e-15);
        assert!(flux([1.0, 0.0], 0.0).is_err());
        assert!(flux([1.0, 0.0], -1.0).is_err());
        assert!(flux_jacobian([1.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn flux_jacobian_at_zero_is_scaled_identity() {
        let j = flux_jacobian([0.0, 0.0], 0.25).unwrap();
        assert_eq!(j, [[4.0, 0.0], [0.0, 4.0]]);
    }

    #[test]
    fn flux_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..1000 {
            let eps = rng.random_range(0.05..2.0);
            let mu: [f64; 2] = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let nu: [f64; 2] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let j = flux_jacobian(mu, eps).unwrap();
            let jn = [j[0][0] * nu[0] + j[0][1] * nu[1], j[1][0] * nu[0] + j[1][1] * nu[1]];
            let fp = flux([mu[0] + h * nu[0], mu[1] + h * nu[1]], eps).unwrap();
            let fm = flux([mu[0] - h * nu[0], mu[1] - h * nu[1]], eps).unwrap();
            let fd = [(fp[0] - fm[0]) / (2.0 * h), (fp[1] - fm[1]) / (2.0 * h)];
            let err = (fd[0] - jn[0]).hypot(fd[1] - jn[1]);
            assert!(err <= 1e-5 * jn[0].hypot(jn[1]).max(1e-3), "{err}");
        }
    }

    #[test]
    fn flux_jacobian_eigenvalue_sandwich() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100_000 {
            let eps = 10f64.powf(rng.random_range(-4.0..1.0));
            let mu: [f64; 2] = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
            let nu: [f64; 2] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let s = eps.hypot(mu[0].hypot(mu[1]));
            let j = flux_jacobian(mu, eps).unwrap();
            let q = nu[0] * (j[0][0] * nu[0] + j[0][1] * nu[1]) + nu[1] * (j[1][0] * nu[0] + j[1][1] * nu[1]);
            let n2 = nu[0] * nu[0] + nu[1] * nu[1];
            let lo = eps * eps / (s * s * s) * n2;
            let hi = n2 / s;
            assert!(q >= lo * (1.0 - 1e-10) - 1e-300 && q <= hi * (1.0 + 1e-12));
        }
    }

    #[test]
    fn mass_matrix_is_spd_and_integrates_constants() {
        let gd = P1Conforming::structured(2).unwrap();
        let m = assemble_mass(&gd);
        let ones = vec![1.0; gd.dim()];
        assert!((m.quadratic_form(&ones) - 1.0).abs() < 1e-14);
        assert_eq!(m.max_asymmetry(), 0.0);
        // Cholesky succeeds only for positive definite matrices.
        let x = crate::linalg::SpdSolver::new(&m).solve(&m, &ones).unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constants_are_steady_states() {
        let gd = Arc::new(P1Conforming::structured(4).unwrap());
        let c = DiscreteField::constant(gd, 0.7);
        let params = FluxParams::new(1e-2, 1.0).unwrap();
        let r = assemble_step_residual(&c, &c, 1e-3, params, &ConstantFidelity(0.7), 0.0).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-15), "{r:?}");
    }

    #[test]
    fn diffusion_acts_on_nonconstant_fields() {
        let gd = Arc::new(P1Conforming::structured(3).unwrap());
        let u = DiscreteField::interpolate(gd, |p| p[0] * p[0]);
        let params = FluxParams::new(0.1, 0.0).unwrap();
        let r = assemble_step_residual(&u, &u, 0.01, params, &NoData, 0.0).unwrap();
        assert!(r.iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn diffusion_conserves_mass() {
        let gd = Arc::new(P1Conforming::structured(5).unwrap());
        let u = DiscreteField::interpolate(gd.clone(), |p| (4.0 * p[0]).sin() * p[1]);
        let params = FluxParams::new(1e-3, 0.0).unwrap();
        let total: f64 = diffusion_operator(&gd, u.values(), params).iter().sum();
        assert!(total.abs() < 1e-13);
    }

    #[test]
    fn residual_is_energy_gradient() {
        let gd = two_triangles();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = FluxParams::new(0.3, 0.8).unwrap();
        let data = FnData {
            fidelity: |p: Point| 1.0 + p[0] - 0.5 * p[1],
            source: |p: Point, t: f64| (p[0] + t).cos(),
        };
        for _ in 0..20 {
            let u = DiscreteField::new(gd.clone(), (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let up = DiscreteField::new(gd.clone(), (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let step = StepProblem::new(&up, 0.05, params, &data, 0.1).unwrap();
            let r = step.residual(u.values()).unwrap();
            let h = 1e-5;
            for k in 0..4 {
                let mut p = u.values().to_vec();
                let mut m = u.values().to_vec();
                p[k] += h;
                m[k] -= h;
                let fd = (step.energy(&p).unwrap() - step.energy(&m).unwrap()) / (2.0 * h);
                assert!((fd - r[k]).abs() <= 1e-6 * r[k].abs().max(1e-3), "{fd} vs {}", r[k]);
            }
        }
    }

    #[test]
    fn jacobian_at_zero_gradient_is_mass_plus_scaled_stiffness() {
        let gd = Arc::new(P1Conforming::structured(3).unwrap());
        let u = DiscreteField::constant(gd.clone(), 2.0);
        let (dt, eps, lambda) = (0.01, 0.2, 1.5);
        let j = assemble_step_jacobian(&u, dt, FluxParams::new(eps, lambda).unwrap()).unwrap();
        let mut expected = gd.mass_matrix().clone();
        expected.scale(1.0 + lambda * dt);
        expected.add_scaled(dt / eps, gd.stiffness_matrix());
        for (a, b) in j.values().iter().zip(expected.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn jacobian_is_symmetric_and_matches_directional_differences() {
        let gd = two_triangles();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = FluxParams::new(0.5, 1.0).unwrap();
        for _ in 0..20 {
            let vals: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u = DiscreteField::new(gd.clone(), vals).unwrap();
            let dir: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let step = StepProblem::new(&u, 0.1, params, &NoData, 0.0).unwrap();
            let j = step.jacobian(u.values()).unwrap();
            assert!(j.max_asymmetry() <= 1e-12);
            let jv = j.mul_vec(&dir);
            let h = 1e-6;
            let shift = |s: f64| -> Vec<f64> { u.values().iter().zip(&dir).map(|(a, d)| a + s * d).collect() };
            let rp = step.residual(&shift(h)).unwrap();
            let rm = step.residual(&shift(-h)).unwrap();
            let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let num: f64 = fd.iter().zip(&jv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = jv.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(num <= 1e-5 * den, "{num} vs {den}");
        }
    }

    #[test]
    fn invalid_step_arguments() {
        let gd = two_triangles();
        let u = DiscreteField::zeros(gd);
        let params = FluxParams::new(0.5, 1.0).unwrap();
        assert!(assemble_step_residual(&u, &u, 0.0, params, &NoData, 0.0).is_err());
        assert!(assemble_step_jacobian(&u, -1.0, params).is_err());
        let other = DiscreteField::zeros(Arc::new(P1Conforming::structured(2).unwrap()));
        assert!(assemble_step_residual(&u, &other, 0.1, params, &NoData, 0.0).is_err());
        assert!(FluxParams::new(0.0, 1.0).is_err());
        assert!(FluxParams::new(1.0, -1.0).is_err());
    }
}
