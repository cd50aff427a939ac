//! Conforming triangular meshes of polygonal domains.
//!
//! A [`TriMesh`] is validated and its per-cell geometry (area, diameter,
//! inradius, P1 basis gradients) is computed once at construction.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use thiserror::Error;

pub type Point = [f64; 2];

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("geometry error in triangle {cell}: {message}")]
    Geometry { cell: usize, message: String },
    #[error("topology error: {0}")]
    Topology(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Geometric quantities of one triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellGeometry {
    pub area: f64,
    pub diameter: f64,
    pub inradius: f64,
    /// Constant gradients of the three barycentric basis functions, in local vertex order.
    pub basis_gradients: [[f64; 2]; 3],
}

impl CellGeometry {
    fn from_vertices(p: [Point; 3]) -> (f64, Option<Self>) {
        let e1 = [p[1][0] - p[0][0], p[1][1] - p[0][1]];
        let e2 = [p[2][0] - p[0][0], p[2][1] - p[0][1]];
        let det = e1[0] * e2[1] - e1[1] * e2[0];
        let signed_area = 0.5 * det;
        if !(signed_area > 0.0) {
            return (signed_area, None);
        }
        let len = |a: Point, b: Point| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let l01 = len(p[0], p[1]);
        let l12 = len(p[1], p[2]);
        let l20 = len(p[2], p[0]);
        let diameter = l01.max(l12).max(l20);
        let inradius = 2.0 * signed_area / (l01 + l12 + l20);
        // grad(lambda_i) = rot(opposite edge) / (2|T|)
        let mut basis_gradients = [[0.0; 2]; 3];
        for (i, g) in basis_gradients.iter_mut().enumerate() {
            let a = p[(i + 1) % 3];
            let b = p[(i + 2) % 3];
            *g = [(a[1] - b[1]) / det, (b[0] - a[0]) / det];
        }
        (
            signed_area,
            Some(Self {
                area: signed_area,
                diameter,
                inradius,
                basis_gradients,
            }),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    cells: Vec<CellGeometry>,
    edges: Vec<[usize; 2]>,
    boundary_edges: Vec<[usize; 2]>,
}

/// Shape-regularity ratios of a mesh. Every ratio lies in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuasiUniformityReport {
    pub h_mesh: f64,
    pub rho_inradius: f64,
    pub rho_area: f64,
    pub rho_size: f64,
    pub rho: f64,
}

impl TriMesh {
    /// Builds and validates a mesh. Triangles must be listed counter-clockwise.
    pub fn new(vertices: Vec<Point>, triangles: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        if triangles.is_empty() {
            return Err(MeshError::Topology("mesh has no triangles".into()));
        }
        for (v, p) in vertices.iter().enumerate() {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(MeshError::Geometry {
                    cell: usize::MAX,
                    message: format!("vertex {v} has non-finite coordinates"),
                });
            }
        }
        let mut cells = Vec::with_capacity(triangles.len());
        for (c, tri) in triangles.iter().enumerate() {
            for &i in tri {
                if i >= vertices.len() {
                    return Err(MeshError::Geometry {
                        cell: c,
                        message: format!("vertex index {i} out of range ({} vertices)", vertices.len()),
                    });
                }
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(MeshError::Geometry {
                    cell: c,
                    message: format!("repeated vertex index in {tri:?}"),
                });
            }
            let pts = [vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]];
            match CellGeometry::from_vertices(pts) {
                (_, Some(geom)) => cells.push(geom),
                (signed, None) => {
                    return Err(MeshError::Geometry {
                        cell: c,
                        message: format!("non-positive signed area {signed:e} (clockwise or degenerate)"),
                    })
                }
            }
        }

        let mut edge_count: HashMap<[usize; 2], usize> = HashMap::new();
        for tri in &triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *edge_count.entry([a.min(b), a.max(b)]).or_default() += 1;
            }
        }
        let mut edges: Vec<[usize; 2]> = edge_count.keys().copied().collect();
        edges.sort_unstable();
        let mut boundary_edges = Vec::new();
        for e in &edges {
            match edge_count[e] {
                1 => boundary_edges.push(*e),
                2 => {}
                k => {
                    return Err(MeshError::Topology(format!(
                        "edge {e:?} is shared by {k} triangles"
                    )))
                }
            }
        }

        let mut referenced = vec![false; vertices.len()];
        for tri in &triangles {
            for &i in tri {
                referenced[i] = true;
            }
        }
        if let Some(v) = referenced.iter().position(|r| !r) {
            return Err(MeshError::Topology(format!("vertex {v} belongs to no triangle")));
        }

        // A vertex strictly inside a boundary edge is a hanging node.
        for e in &boundary_edges {
            let (a, b) = (vertices[e[0]], vertices[e[1]]);
            let d = [b[0] - a[0], b[1] - a[1]];
            let len2 = d[0] * d[0] + d[1] * d[1];
            for (v, p) in vertices.iter().enumerate() {
                if v == e[0] || v == e[1] {
                    continue;
                }
                let w = [p[0] - a[0], p[1] - a[1]];
                let cross = d[0] * w[1] - d[1] * w[0];
                let t = (d[0] * w[0] + d[1] * w[1]) / len2;
                if cross.abs() <= 1e-12 * len2 && t > 1e-12 && t < 1.0 - 1e-12 {
                    return Err(MeshError::Topology(format!(
                        "hanging vertex {v} on edge {e:?}"
                    )));
                }
            }
        }

        let euler = vertices.len() as i64 - edges.len() as i64 + triangles.len() as i64;
        if euler != 1 {
            return Err(MeshError::Topology(format!(
                "Euler characteristic V - E + F = {euler}, expected 1 for a simply connected domain"
            )));
        }

        Ok(Self {
            vertices,
            triangles,
            cells,
            edges,
            boundary_edges,
        })
    }

    /// Unit square split into `n x n` squares, each cut along its lower-left to upper-right diagonal.
    pub fn generate_structured(n: usize) -> Result<Self, MeshError> {
        if n == 0 {
            return Err(MeshError::InvalidArgument("n must be at least 1".into()));
        }
        let idx = |i: usize, j: usize| j * (n + 1) + i;
        let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
        for j in 0..=n {
            for i in 0..=n {
                vertices.push([i as f64 / n as f64, j as f64 / n as f64]);
            }
        }
        let mut triangles = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let (v00, v10, v01, v11) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }
        Self::new(vertices, triangles)
    }

    pub fn load<R: Read>(source: R) -> Result<Self, MeshError> {
        let reader = BufReader::new(source);
        let mut rows = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            rows.push((i + 1, trimmed.to_string()));
        }
        let mut rows = rows.into_iter();
        let (hline, header) = rows.next().ok_or(MeshError::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let counts = parse_fields::<usize>(&header, 2, hline)?;
        let (nv, nt) = (counts[0], counts[1]);

        let mut vertices = Vec::with_capacity(nv);
        for k in 0..nv {
            let (line, text) = rows.next().ok_or(MeshError::Parse {
                line: hline,
                message: format!("expected {nv} vertex rows, found {k}"),
            })?;
            let xy = parse_fields::<f64>(&text, 2, line)?;
            vertices.push([xy[0], xy[1]]);
        }
        let mut triangles = Vec::with_capacity(nt);
        for k in 0..nt {
            let (line, text) = rows.next().ok_or(MeshError::Parse {
                line: hline,
                message: format!("expected {nt} triangle rows, found {k}"),
            })?;
            let ids = parse_fields::<usize>(&text, 3, line)?;
            triangles.push([ids[0], ids[1], ids[2]]);
        }
        if let Some((line, _)) = rows.next() {
            return Err(MeshError::Parse {
                line,
                message: "unexpected trailing data".into(),
            });
        }
        Self::new(vertices, triangles)
    }

    pub fn load_file(path: impl AsRef<Path>) -> Result<Self, MeshError> {
        Self::load(std::fs::File::open(path)?)
    }

    /// Text form readable by [`TriMesh::load`]; coordinates carry 17 significant digits.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.vertices.len(), self.triangles.len());
        for p in &self.vertices {
            let _ = writeln!(out, "{:.16e} {:.16e}", p[0], p[1]);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "{} {} {}", t[0], t[1], t[2]);
        }
        out
    }

    pub fn save_file(&self, path: impl AsRef<Path>) -> Result<(), MeshError> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_cells(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn cells(&self) -> &[CellGeometry] {
        &self.cells
    }

    pub fn cell(&self, c: usize) -> &CellGeometry {
        &self.cells[c]
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn boundary_edges(&self) -> &[[usize; 2]] {
        &self.boundary_edges
    }

    pub fn cell_vertices(&self, c: usize) -> [Point; 3] {
        let t = self.triangles[c];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    /// Maps barycentric coordinates on cell `c` to a physical point.
    pub fn map_point(&self, c: usize, bary: [f64; 3]) -> Point {
        let p = self.cell_vertices(c);
        [
            bary[0] * p[0][0] + bary[1] * p[1][0] + bary[2] * p[2][0],
            bary[0] * p[0][1] + bary[1] * p[1][1] + bary[2] * p[2][1],
        ]
    }

    /// Largest cell diameter `h_T`.
    pub fn h_mesh(&self) -> f64 {
        self.cells.iter().map(|c| c.diameter).fold(0.0, f64::max)
    }

    pub fn total_area(&self) -> f64 {
        self.cells.iter().map(|c| c.area).sum()
    }

    /// `#V - #E + #F` with faces counted without the outer region.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edges.len() as i64 + self.triangles.len() as i64
    }

    pub fn quasi_uniformity(&self) -> QuasiUniformityReport {
        let h_mesh = self.h_mesh();
        let mut rho_inradius = f64::INFINITY;
        let mut rho_area = f64::INFINITY;
        let mut rho_size = f64::INFINITY;
        for c in &self.cells {
            rho_inradius = rho_inradius.min(c.inradius / c.diameter);
            rho_area = rho_area.min(c.area / (c.diameter * c.diameter));
            rho_size = rho_size.min(c.diameter / h_mesh);
        }
        QuasiUniformityReport {
            h_mesh,
            rho_inradius,
            rho_area,
            rho_size,
            rho: rho_inradius.min(rho_area).min(rho_size),
        }
    }

    /// Same mesh with cells listed in the order given by `order`.
    pub fn permute_cells(&self, order: &[usize]) -> Result<Self, MeshError> {
        if order.len() != self.triangles.len() {
            return Err(MeshError::InvalidArgument("permutation length mismatch".into()));
        }
        let triangles = order.iter().map(|&c| self.triangles[c]).collect();
        Self::new(self.vertices.clone(), triangles)
    }
}

fn parse_fields<T: std::str::FromStr>(text: &str, expected: usize, line: usize) -> Result<Vec<T>, MeshError> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != expected {
        return Err(MeshError::Parse {
            line,
            message: format!("expected {expected} fields, found {}", fields.len()),
        });
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<T>().map_err(|_| MeshError::Parse {
                line,
                message: format!("cannot parse '{f}'"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFERENCE: &str = "3 1\n0 0\n1 0\n0 1\n0 1 2\n";

    #[test]
    fn reference_triangle_geometry() {
        let mesh = TriMesh::load(REFERENCE.as_bytes()).unwrap();
        assert_eq!(mesh.num_cells(), 1);
        let c = mesh.cell(0);
        assert_eq!(c.area, 0.5);
        assert!((c.diameter - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(c.basis_gradients, [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn clockwise_triangle_is_rejected() {
        let err = TriMesh::load("3 1\n0 0\n1 0\n0 1\n0 2 1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, MeshError::Geometry { cell: 0, .. }), "{err}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = TriMesh::load("# comment\n3 1\n0 0\n1 x\n0 1\n0 1 2\n".as_bytes()).unwrap_err();
        match err {
            MeshError::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other}"),
        }
        let err = TriMesh::load("3 1 7\n".as_bytes()).unwrap_err();
        assert!(matches!(err, MeshError::Parse { line: 1, .. }));
        let err = TriMesh::load("3 2\n0 0\n1 0\n0 1\n0 1 2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, MeshError::Parse { .. }));
    }

    #[test]
    fn out_of_range_and_repeated_indices() {
        assert!(TriMesh::load("3 1\n0 0\n1 0\n0 1\n0 1 3\n".as_bytes()).is_err());
        assert!(TriMesh::load("3 1\n0 0\n1 0\n0 1\n0 1 1\n".as_bytes()).is_err());
    }

    #[test]
    fn non_conforming_connectivity() {
        // Three triangles sharing edge (0,1).
        let verts = vec![[0.0, 0.0], [1.0, 0.0], [0.5, 1.0], [0.5, 2.0], [0.5, 3.0]];
        let tris = vec![[0, 1, 2], [0, 1, 3], [0, 1, 4]];
        assert!(matches!(TriMesh::new(verts, tris), Err(MeshError::Topology(_))));

        // Hanging vertex 4 at the midpoint of edge (1,2) of the left triangle.
        let verts = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [2.0, 0.0], [1.0, 0.5], [2.0, 1.0]];
        let tris = vec![[0, 1, 2], [1, 3, 4], [4, 3, 5], [4, 5, 2]];
        assert!(matches!(TriMesh::new(verts, tris), Err(MeshError::Topology(_))));
    }

    #[test]
    fn structured_counts() {
        let m1 = TriMesh::generate_structured(1).unwrap();
        assert_eq!((m1.num_cells(), m1.num_vertices()), (2, 4));
        assert!((m1.h_mesh() - 2f64.sqrt()).abs() < 1e-15);

        let m4 = TriMesh::generate_structured(4).unwrap();
        assert_eq!((m4.num_cells(), m4.num_vertices()), (32, 25));
        assert!((m4.h_mesh() - 2f64.sqrt() / 4.0).abs() < 1e-15);

        let m2 = TriMesh::generate_structured(2).unwrap();
        assert_eq!((m2.num_vertices(), m2.edges().len(), m2.num_cells()), (9, 16, 8));
        assert_eq!(m2.euler_characteristic(), 1);

        assert!(matches!(TriMesh::generate_structured(0), Err(MeshError::InvalidArgument(_))));
    }

    #[test]
    fn quasi_uniformity_values() {
        for n in [1, 3, 8] {
            let q = TriMesh::generate_structured(n).unwrap().quasi_uniformity();
            assert!((q.rho_size - 1.0).abs() < 1e-14);
            assert!(q.rho > 0.0 && q.rho <= 1.0);
        }
        let q = TriMesh::load(REFERENCE.as_bytes()).unwrap().quasi_uniformity();
        assert!((q.rho_area - 0.25).abs() < 1e-15);

        let s3 = 3f64.sqrt();
        let eq = TriMesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.5, s3 / 2.0]], vec![[0, 1, 2]]).unwrap();
        let q = eq.quasi_uniformity();
        assert!((q.rho_inradius - 1.0 / (2.0 * s3)).abs() < 1e-14);
    }

    #[test]
    fn basis_gradients_sum_to_zero_and_area_adds_up() {
        let mesh = TriMesh::generate_structured(7).unwrap();
        assert!((mesh.total_area() - 1.0).abs() < 1e-12);
        for c in mesh.cells() {
            let s = c.basis_gradients.iter().fold([0.0, 0.0], |a, g| [a[0] + g[0], a[1] + g[1]]);
            assert!(s[0].abs() < 1e-12 && s[1].abs() < 1e-12);
        }
    }

    #[test]
    fn serialize_round_trip_is_bit_identical() {
        let mesh = TriMesh::generate_structured(6).unwrap();
        let back = TriMesh::load(mesh.serialize().as_bytes()).unwrap();
        assert_eq!(back.triangles(), mesh.triangles());
        for (a, b) in back.vertices().iter().zip(mesh.vertices()) {
            assert_eq!(a[0].to_bits(), b[0].to_bits());
            assert_eq!(a[1].to_bits(), b[1].to_bits());
        }
    }
}
