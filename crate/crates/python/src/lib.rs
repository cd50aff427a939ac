//! Python bindings: meshes, the regularised flux, single implicit steps, the
//! nonlinear projection and manufactured-solution runs.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tvflow::analysis::{observed_order as order_rows, CosineSolution, ManufacturedSolution};
use tvflow::assembly::quadrature::QuadratureRule;
use tvflow::assembly::{self, ConstantFidelity};
use tvflow::experiment::{run_manufactured as run_case, ManufacturedCase, StepRule};
use tvflow::interpolator::{project, projection_diagnostics, ProjectionProblem};
use tvflow::solver::newton_solve_step;
use tvflow::{DiscreteField, FluxParams, GradientDiscretisation, InitialPolicy, NewtonConfig, P1Conforming, TriMesh};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Conforming triangular mesh together with its P1 discretisation.
#[pyclass(name = "Mesh", frozen)]
struct PyMesh {
    gd: Arc<P1Conforming>,
}

impl PyMesh {
    fn from_mesh(mesh: TriMesh) -> Self {
        Self {
            gd: Arc::new(P1Conforming::new(mesh)),
        }
    }

    fn mesh(&self) -> &TriMesh {
        self.gd.mesh()
    }

    fn field(&self, values: Vec<f64>) -> PyResult<DiscreteField> {
        DiscreteField::new(self.gd.clone(), values).map_err(value_err)
    }
}

#[pymethods]
impl PyMesh {
    #[new]
    fn new(vertices: Vec<(f64, f64)>, triangles: Vec<(usize, usize, usize)>) -> PyResult<Self> {
        let vertices = vertices.into_iter().map(|(x, y)| [x, y]).collect();
        let triangles = triangles.into_iter().map(|(a, b, c)| [a, b, c]).collect();
        TriMesh::new(vertices, triangles).map(Self::from_mesh).map_err(value_err)
    }

    /// The unit square split into `n x n` squares, each cut along its lower-left diagonal.
    #[staticmethod]
    fn structured(n: usize) -> PyResult<Self> {
        TriMesh::generate_structured(n).map(Self::from_mesh).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        TriMesh::load_file(path).map(Self::from_mesh).map_err(value_err)
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        TriMesh::load(text.as_bytes()).map(Self::from_mesh).map_err(value_err)
    }

    fn serialize(&self) -> String {
        self.mesh().serialize()
    }

    #[getter]
    fn num_vertices(&self) -> usize {
        self.mesh().num_vertices()
    }

    #[getter]
    fn num_cells(&self) -> usize {
        self.mesh().num_cells()
    }

    #[getter]
    fn h_mesh(&self) -> f64 {
        self.mesh().h_mesh()
    }

    fn vertices(&self) -> Vec<(f64, f64)> {
        self.mesh().vertices().iter().map(|p| (p[0], p[1])).collect()
    }

    fn triangles(&self) -> Vec<(usize, usize, usize)> {
        self.mesh().triangles().iter().map(|t| (t[0], t[1], t[2])).collect()
    }

    /// `(h_mesh, rho_inradius, rho_area, rho_size, rho)`.
    fn quasi_uniformity(&self) -> (f64, f64, f64, f64, f64) {
        let q = self.mesh().quasi_uniformity();
        (q.h_mesh, q.rho_inradius, q.rho_area, q.rho_size, q.rho)
    }

    /// Constant gradient of the P1 field `values` on each cell.
    fn cell_gradients(&self, values: Vec<f64>) -> PyResult<Vec<(f64, f64)>> {
        let u = self.field(values)?;
        Ok((0..self.mesh().num_cells())
            .map(|c| {
                let g = self.gd.cell_gradient(u.values(), c);
                (g[0], g[1])
            })
            .collect())
    }

    /// `||Pi_D v||_L2 + ||grad_D v||_L1`.
    fn discrete_norm(&self, values: Vec<f64>) -> PyResult<f64> {
        Ok(tvflow::gdm::discrete_norm(&self.field(values)?))
    }

    /// `int sqrt(eps^2 + |grad_D v|^2)`.
    fn total_variation(&self, values: Vec<f64>, epsilon: f64) -> PyResult<f64> {
        let params = FluxParams::new(epsilon, 0.0).map_err(value_err)?;
        let u = self.field(values)?;
        Ok(assembly::total_variation(&self.gd, u.values(), params))
    }

    fn __repr__(&self) -> String {
        format!(
            "Mesh(num_vertices={}, num_cells={}, h_mesh={})",
            self.num_vertices(),
            self.num_cells(),
            self.h_mesh()
        )
    }
}

/// `mu / sqrt(eps^2 + |mu|^2)`.
#[pyfunction]
fn flux(mu: (f64, f64), epsilon: f64) -> PyResult<(f64, f64)> {
    let f = assembly::flux([mu.0, mu.1], epsilon).map_err(value_err)?;
    Ok((f[0], f[1]))
}

/// One implicit step from `u_prev` with constant fidelity target `g`.
/// Returns the new nodal values and the number of Newton iterations.
#[pyfunction]
#[pyo3(signature = (mesh, u_prev, dt, epsilon, lam = 1.0, g = 0.0))]
fn solve_step(mesh: &PyMesh, u_prev: Vec<f64>, dt: f64, epsilon: f64, lam: f64, g: f64) -> PyResult<(Vec<f64>, usize)> {
    let params = FluxParams::new(epsilon, lam).map_err(value_err)?;
    let prev = mesh.field(u_prev)?;
    let (u, stats) = newton_solve_step(&prev, dt, params, &ConstantFidelity(g), dt, &NewtonConfig::default())
        .map_err(runtime_err)?;
    Ok((u.into_values(), stats.iterations))
}

/// Result of projecting `amplitude * cos(pi x) cos(pi y)`.
#[pyclass(frozen, get_all)]
struct Projection {
    values: Vec<f64>,
    grad_l2_error: f64,
    value_l2_error: f64,
    max_cell_gradient: f64,
    newton_iterations: usize,
}

/// Nonlinear projection `P_D` of the cosine datum onto the mesh.
#[pyfunction]
#[pyo3(signature = (mesh, epsilon, amplitude = 1.0))]
fn project_cosine(mesh: &PyMesh, epsilon: f64, amplitude: f64) -> PyResult<Projection> {
    let ms = CosineSolution { amplitude };
    let rule = QuadratureRule::degree4();
    let u = |p| ms.value(p, 0.0);
    let grad = |p| ms.gradient(p, 0.0);
    let problem = ProjectionProblem::new(mesh.gd.clone(), epsilon, u, grad, &rule).map_err(value_err)?;
    let (v, stats) = project(&problem, &NewtonConfig::default()).map_err(runtime_err)?;
    let d = projection_diagnostics(u, grad, &v, &rule);
    Ok(Projection {
        values: v.into_values(),
        grad_l2_error: d.grad_l2_error,
        value_l2_error: d.value_l2_error,
        max_cell_gradient: d.max_cell_gradient,
        newton_iterations: stats.iterations,
    })
}

/// Errors and solver statistics of one manufactured run.
#[pyclass(frozen, get_all)]
struct ManufacturedRun {
    h: f64,
    dt: f64,
    steps: usize,
    e1: f64,
    e2: f64,
    max_newton_iterations: usize,
    final_values: Vec<f64>,
}

/// Solves the problem with exact solution `cos(t) cos(pi x) cos(pi y)` on `mesh`.
#[pyfunction]
#[pyo3(signature = (mesh, epsilon = 2e-5, lam = 1.0, final_time = 1e-2, dt = 2e-5, initial = "nodal"))]
fn run_manufactured(
    mesh: &PyMesh,
    epsilon: f64,
    lam: f64,
    final_time: f64,
    dt: f64,
    initial: &str,
) -> PyResult<ManufacturedRun> {
    let initial = match initial {
        "nodal" => InitialPolicy::Nodal,
        "projected" => InitialPolicy::Projected,
        other => return Err(PyValueError::new_err(format!("unknown initial policy {other:?}"))),
    };
    let case = ManufacturedCase {
        epsilon,
        lambda: lam,
        final_time,
        step: StepRule::Fixed(dt),
        initial,
        ..Default::default()
    };
    let r = run_case(mesh.gd.clone(), &case, &CosineSolution::default()).map_err(runtime_err)?;
    Ok(ManufacturedRun {
        h: r.h,
        dt: r.grid.dt_max(),
        steps: r.grid.num_steps(),
        e1: r.e1,
        e2: r.e2,
        max_newton_iterations: r.report.max_newton_iterations(),
        final_values: r.trajectory.last().map(|u| u.values().to_vec()).unwrap_or_default(),
    })
}

/// Log-log slopes between consecutive `(h, error)` rows with decreasing `h`.
#[pyfunction]
fn observed_order(rows: Vec<(f64, f64)>) -> PyResult<Vec<f64>> {
    order_rows(&rows).map_err(value_err)
}

#[pymodule]
fn pytvflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMesh>()?;
    m.add_class::<Projection>()?;
    m.add_class::<ManufacturedRun>()?;
    m.add_function(wrap_pyfunction!(flux, m)?)?;
    m.add_function(wrap_pyfunction!(solve_step, m)?)?;
    m.add_function(wrap_pyfunction!(project_cosine, m)?)?;
    m.add_function(wrap_pyfunction!(run_manufactured, m)?)?;
    m.add_function(wrap_pyfunction!(observed_order, m)?)?;
    Ok(())
}
