//! Gradient discretisations: discrete unknowns with a function reconstruction
//! and a piecewise-polynomial gradient reconstruction on a mesh.

use std::sync::Arc;

use thiserror::Error;

use crate::assembly::quadrature::QuadratureRule;
use crate::linalg::CsrMatrix;
use crate::mesh::{Point, TriMesh};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GdmError {
    #[error("cell index {cell} out of range ({num_cells} cells)")]
    CellOutOfRange { cell: usize, num_cells: usize },
    #[error("barycentric coordinates {0:?} are invalid")]
    InvalidBarycentric([f64; 3]),
    #[error("field has {found} coefficients, discretisation has {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("coefficient {0} is not finite")]
    NonFinite(usize),
    #[error("fields belong to different discretisations")]
    DiscretisationMismatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub const CENTROID: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];

/// Discrete space `X_D` with linear reconstructions `Pi_D` and `grad_D`, evaluated cellwise.
pub trait GradientDiscretisation {
    fn dim(&self) -> usize;
    fn mesh(&self) -> &TriMesh;
    /// Polynomial degree of the gradient reconstruction on each cell.
    fn gradient_degree(&self) -> usize;
    fn pi_eval(&self, values: &[f64], cell: usize, bary: [f64; 3]) -> Result<f64, GdmError>;
    fn grad_eval(&self, values: &[f64], cell: usize, bary: [f64; 3]) -> Result<[f64; 2], GdmError>;
}

/// Conforming P1 finite elements: nodal values at the mesh vertices.
#[derive(Debug, Clone)]
pub struct P1Conforming {
    mesh: TriMesh,
    /// Storage positions of the 3x3 local block of every cell in the shared pattern.
    cell_positions: Vec<[[usize; 3]; 3]>,
    mass: CsrMatrix,
    stiffness: CsrMatrix,
}

impl P1Conforming {
    pub fn new(mesh: TriMesh) -> Self {
        let pattern = CsrMatrix::from_pairs(mesh.num_vertices(), mesh.edges());
        let cell_positions: Vec<[[usize; 3]; 3]> = mesh
            .triangles()
            .iter()
            .map(|t| {
                let mut pos = [[0; 3]; 3];
                for (i, row) in pos.iter_mut().enumerate() {
                    for (j, p) in row.iter_mut().enumerate() {
                        *p = pattern.position(t[i], t[j]).expect("cell pair is an edge");
                    }
                }
                pos
            })
            .collect();
        let mut mass = pattern.clone();
        let mut stiffness = pattern;
        for (c, cell) in mesh.cells().iter().enumerate() {
            let pos = &cell_positions[c];
            let g = &cell.basis_gradients;
            for i in 0..3 {
                for j in 0..3 {
                    let m = if i == j { 2.0 } else { 1.0 };
                    mass.values_mut()[pos[i][j]] += cell.area * m / 12.0;
                    let k = g[i][0] * g[j][0] + g[i][1] * g[j][1];
                    stiffness.values_mut()[pos[i][j]] += cell.area * k;
                }
            }
        }
        Self {
            mesh,
            cell_positions,
            mass,
            stiffness,
        }
    }

    pub fn structured(n: usize) -> Result<Self, crate::mesh::MeshError> {
        Ok(Self::new(TriMesh::generate_structured(n)?))
    }

    /// Consistent mass matrix `int phi_i phi_j`.
    pub fn mass_matrix(&self) -> &CsrMatrix {
        &self.mass
    }

    /// Stiffness matrix `int grad phi_i . grad phi_j`.
    pub fn stiffness_matrix(&self) -> &CsrMatrix {
        &self.stiffness
    }

    /// Zero matrix on the vertex-adjacency pattern.
    pub fn zero_matrix(&self) -> CsrMatrix {
        let mut z = self.mass.clone();
        z.fill_zero();
        z
    }

    pub fn cell_positions(&self, c: usize) -> &[[usize; 3]; 3] {
        &self.cell_positions[c]
    }

    /// Constant gradient of the P1 function on cell `c`.
    #[inline]
    pub fn cell_gradient(&self, values: &[f64], c: usize) -> [f64; 2] {
        let t = self.mesh.triangles()[c];
        let g = &self.mesh.cell(c).basis_gradients;
        let mut out = [0.0; 2];
        for k in 0..3 {
            out[0] += values[t[k]] * g[k][0];
            out[1] += values[t[k]] * g[k][1];
        }
        out
    }

    pub fn interpolate(&self, f: impl Fn(Point) -> f64) -> Vec<f64> {
        self.mesh.vertices().iter().map(|&p| f(p)).collect()
    }

    fn check_cell(&self, cell: usize) -> Result<(), GdmError> {
        if cell >= self.mesh.num_cells() {
            return Err(GdmError::CellOutOfRange {
                cell,
                num_cells: self.mesh.num_cells(),
            });
        }
        Ok(())
    }

    fn check_len(&self, values: &[f64]) -> Result<(), GdmError> {
        if values.len() != self.dim() {
            return Err(GdmError::DimensionMismatch {
                expected: self.dim(),
                found: values.len(),
            });
        }
        Ok(())
    }
}

impl GradientDiscretisation for P1Conforming {
    fn dim(&self) -> usize {
        self.mesh.num_vertices()
    }

    fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    fn gradient_degree(&self) -> usize {
        0
    }

    fn pi_eval(&self, values: &[f64], cell: usize, bary: [f64; 3]) -> Result<f64, GdmError> {
        self.check_cell(cell)?;
        self.check_len(values)?;
        if (bary.iter().sum::<f64>() - 1.0).abs() > 1e-12 || bary.iter().any(|b| !b.is_finite()) {
            return Err(GdmError::InvalidBarycentric(bary));
        }
        let t = self.mesh.triangles()[cell];
        Ok(bary[0] * values[t[0]] + bary[1] * values[t[1]] + bary[2] * values[t[2]])
    }

    fn grad_eval(&self, values: &[f64], cell: usize, _bary: [f64; 3]) -> Result<[f64; 2], GdmError> {
        self.check_cell(cell)?;
        self.check_len(values)?;
        Ok(self.cell_gradient(values, cell))
    }
}

/// Coefficient vector of one element of `X_D`, tied to its discretisation.
#[derive(Debug, Clone)]
pub struct DiscreteField<G = P1Conforming> {
    gd: Arc<G>,
    values: Vec<f64>,
}

impl<G: GradientDiscretisation> DiscreteField<G> {
    pub fn new(gd: Arc<G>, values: Vec<f64>) -> Result<Self, GdmError> {
        if values.len() != gd.dim() {
            return Err(GdmError::DimensionMismatch {
                expected: gd.dim(),
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GdmError::NonFinite(i));
        }
        Ok(Self { gd, values })
    }

    pub fn zeros(gd: Arc<G>) -> Self {
        let n = gd.dim();
        Self { gd, values: vec![0.0; n] }
    }

    pub fn constant(gd: Arc<G>, c: f64) -> Self {
        let n = gd.dim();
        Self { gd, values: vec![c; n] }
    }

    pub fn discretisation(&self) -> &Arc<G> {
        &self.gd
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn same_discretisation(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.gd, &other.gd)
    }

    pub fn pi_eval(&self, cell: usize, bary: [f64; 3]) -> Result<f64, GdmError> {
        self.gd.pi_eval(&self.values, cell, bary)
    }

    /// Gradient reconstruction on `cell`, evaluated at the centroid.
    pub fn grad_eval(&self, cell: usize) -> Result<[f64; 2], GdmError> {
        self.gd.grad_eval(&self.values, cell, CENTROID)
    }

    pub fn grad_eval_at(&self, cell: usize, bary: [f64; 3]) -> Result<[f64; 2], GdmError> {
        self.gd.grad_eval(&self.values, cell, bary)
    }

    /// `a * self + b * other`.
    pub fn linear_combination(&self, a: f64, other: &Self, b: f64) -> Result<Self, GdmError> {
        if !self.same_discretisation(other) {
            return Err(GdmError::DiscretisationMismatch);
        }
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Self::new(self.gd.clone(), values)
    }
}

impl DiscreteField<P1Conforming> {
    pub fn interpolate(gd: Arc<P1Conforming>, f: impl Fn(Point) -> f64) -> Self {
        let values = gd.interpolate(f);
        Self { gd, values }
    }
}

/// Evaluates `(Pi_D v, grad_D v)` at every quadrature node, passing both to `f`, and sums.
fn integrate_field<G: GradientDiscretisation>(
    field: &DiscreteField<G>,
    rule: &QuadratureRule,
    mut f: impl FnMut(Point, f64, [f64; 2]) -> f64,
) -> f64 {
    let gd = field.discretisation();
    let mesh = gd.mesh();
    (0..mesh.num_cells())
        .map(|c| {
            rule.integrate_cell(mesh, c, |p, bary| {
                let v = gd.pi_eval(field.values(), c, bary).expect("valid cell");
                let g = gd.grad_eval(field.values(), c, bary).expect("valid cell");
                f(p, v, g)
            })
        })
        .sum()
}

fn default_rule<G: GradientDiscretisation>(gd: &G) -> QuadratureRule {
    // Squares of P1 reconstructions need degree 2; higher-degree gradients need more.
    QuadratureRule::for_degree((2 * gd.gradient_degree()).max(4)).unwrap_or_else(QuadratureRule::degree4)
}

/// `||Pi_D v||_{L2} + ||grad_D v||_{L1}`.
pub fn discrete_norm<G: GradientDiscretisation>(field: &DiscreteField<G>) -> f64 {
    let rule = default_rule(field.discretisation().as_ref());
    let l2 = integrate_field(field, &rule, |_, v, _| v * v).sqrt();
    let l1 = integrate_field(field, &rule, |_, _, g| g[0].hypot(g[1]));
    l2 + l1
}

/// Consistency defect `||Pi_D v - phi||_{L2} / alpha + ||grad_D v - grad phi||_{L2}`.
///
/// Evaluated at a candidate `v` it bounds the minimum over `X_D` from above.
pub fn consistency_defect<G: GradientDiscretisation>(
    phi: impl Fn(Point) -> f64,
    phi_grad: impl Fn(Point) -> [f64; 2],
    v: &DiscreteField<G>,
    alpha: f64,
    rule: &QuadratureRule,
) -> Result<f64, GdmError> {
    if !(alpha > 0.0) {
        return Err(GdmError::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let value_err = integrate_field(v, rule, |p, val, _| (val - phi(p)).powi(2)).sqrt();
    let grad_err = integrate_field(v, rule, |p, _, g| {
        let e = phi_grad(p);
        (g[0] - e[0]).powi(2) + (g[1] - e[1]).powi(2)
    })
    .sqrt();
    Ok(value_err / alpha + grad_err)
}

/// Signed limit-conformity defect `int grad_D v . psi + int Pi_D v div psi`.
pub fn limit_conformity_defect<G: GradientDiscretisation>(
    psi: impl Fn(Point) -> [f64; 2],
    psi_div: impl Fn(Point) -> f64,
    v: &DiscreteField<G>,
    rule: &QuadratureRule,
) -> f64 {
    integrate_field(v, rule, |p, val, g| {
        let q = psi(p);
        g[0] * q[0] + g[1] * q[1] + val * psi_div(p)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> Arc<P1Conforming> {
        let mesh = TriMesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap();
        Arc::new(P1Conforming::new(mesh))
    }

    #[test]
    fn pi_eval_examples() {
        let gd = Arc::new(P1Conforming::structured(3).unwrap());
        let ones = DiscreteField::constant(gd.clone(), 1.0);
        for c in 0..gd.mesh().num_cells() {
            assert!((ones.pi_eval(c, [0.2, 0.3, 0.5]).unwrap() - 1.0).abs() < 1e-15);
        }
        let r = reference();
        let f = DiscreteField::new(r.clone(), vec![0.0, 1.0, 0.0]).unwrap();
        assert!((f.pi_eval(0, CENTROID).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let f = DiscreteField::new(r, vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(f.pi_eval(0, [0.5, 0.5, 0.0]).unwrap(), 3.0);
        assert!(matches!(f.pi_eval(1, CENTROID), Err(GdmError::CellOutOfRange { .. })));
        assert!(matches!(f.pi_eval(0, [0.5, 0.6, 0.0]), Err(GdmError::InvalidBarycentric(_))));
    }

    #[test]
    fn grad_eval_examples() {
        let r = reference();
        let x = DiscreteField::new(r.clone(), vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(x.grad_eval(0).unwrap(), [1.0, 0.0]);
        let y = DiscreteField::new(r.clone(), vec![0.0, 0.0, 1.0]).unwrap();
        assert_eq!(y.grad_eval(0).unwrap(), [0.0, 1.0]);
        let c = DiscreteField::constant(r, 2.5);
        assert_eq!(c.grad_eval(0).unwrap(), [0.0, 0.0]);
        assert!(c.grad_eval(3).is_err());
    }

    #[test]
    fn field_validation() {
        let r = reference();
        assert!(matches!(
            DiscreteField::new(r.clone(), vec![0.0; 2]),
            Err(GdmError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            DiscreteField::new(r, vec![0.0, f64::NAN, 0.0]),
            Err(GdmError::NonFinite(1))
        ));
    }

    #[test]
    fn discrete_norm_examples() {
        let gd = Arc::new(P1Conforming::structured(4).unwrap());
        assert_eq!(discrete_norm(&DiscreteField::zeros(gd.clone())), 0.0);
        assert!((discrete_norm(&DiscreteField::constant(gd, 1.0)) - 1.0).abs() < 1e-14);

        let f = DiscreteField::new(reference(), vec![0.0, 1.0, 0.0]).unwrap();
        let expected = (1.0f64 / 12.0).sqrt() + 0.5;
        assert!((discrete_norm(&f) - expected).abs() < 1e-14);
    }

    #[test]
    fn discrete_norm_matches_mass_matrix_route() {
        let gd = Arc::new(P1Conforming::structured(5).unwrap());
        let f = DiscreteField::interpolate(gd.clone(), |p| (3.0 * p[0]).sin() + p[1] * p[1]);
        let l2 = gd.mass_matrix().quadratic_form(f.values()).sqrt();
        let l1: f64 = (0..gd.mesh().num_cells())
            .map(|c| {
                let g = gd.cell_gradient(f.values(), c);
                gd.mesh().cell(c).area * g[0].hypot(g[1])
            })
            .sum();
        assert!((discrete_norm(&f) - (l2 + l1)).abs() < 1e-13);
    }

    #[test]
    fn mass_matrix_entries() {
        let gd = reference();
        let m = gd.mass_matrix();
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 2.0 / 24.0 } else { 1.0 / 24.0 };
                assert!((m.get(i, j) - e).abs() < 1e-16);
            }
        }
    }

    #[test]
    fn affine_functions_have_zero_consistency_defect() {
        let gd = Arc::new(P1Conforming::structured(4).unwrap());
        let phi = |p: Point| 0.3 - 1.2 * p[0] + 2.5 * p[1];
        let v = DiscreteField::interpolate(gd.clone(), phi);
        let rule = QuadratureRule::degree4();
        let d = consistency_defect(phi, |_| [-1.2, 2.5], &v, 0.25, &rule).unwrap();
        assert!(d < 1e-12, "{d}");
        let z = DiscreteField::zeros(gd);
        assert_eq!(consistency_defect(|_| 0.0, |_| [0.0, 0.0], &z, 1.0, &rule).unwrap(), 0.0);
        assert!(consistency_defect(|_| 0.0, |_| [0.0, 0.0], &z, 0.0, &rule).is_err());
    }

    #[test]
    fn limit_conformity_vanishes_for_conforming_p1() {
        let gd = Arc::new(P1Conforming::structured(6).unwrap());
        let rule = QuadratureRule::degree4();
        let v = DiscreteField::interpolate(gd.clone(), |p| (2.0 * p[0]).cos() * (1.0 + p[1]));
        // psi . n = 0 on the boundary of the unit square.
        let psi = |p: Point| [p[0] * (1.0 - p[0]) * p[1], p[1] * (1.0 - p[1]) * p[0] * p[0]];
        let psi_div = |p: Point| (1.0 - 2.0 * p[0]) * p[1] + (1.0 - 2.0 * p[1]) * p[0] * p[0];
        let d = limit_conformity_defect(psi, psi_div, &v, &rule);
        assert!(d.abs() < 1e-14, "{d}");

        assert_eq!(limit_conformity_defect(psi, psi_div, &DiscreteField::zeros(gd.clone()), &rule), 0.0);
        let ones = DiscreteField::constant(gd, 1.0);
        let d = limit_conformity_defect(|_| [0.7, -1.3], |_| 0.0, &ones, &rule);
        assert!(d.abs() < 1e-15);
    }
}
