use crate::mesh::{Point, TriMesh};

/// Symmetric quadrature rule on triangles in barycentric coordinates.
/// Weights sum to one and are scaled by the cell area when used.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    points: Vec<[f64; 3]>,
    weights: Vec<f64>,
    degree: usize,
}

const THIRD: f64 = 1.0 / 3.0;

// Dunavant degree-4 rule, two orbits of three points.
const D4_A1: f64 = 0.445_948_490_915_964_886_318_33;
const D4_W1: f64 = 0.223_381_589_678_011_465_944_83;
const D4_A2: f64 = 0.091_576_213_509_770_743_459_57;
const D4_W2: f64 = 0.109_951_743_655_321_867_388_51;

impl QuadratureRule {
    pub fn centroid() -> Self {
        Self {
            points: vec![[THIRD, THIRD, THIRD]],
            weights: vec![1.0],
            degree: 1,
        }
    }

    pub fn degree2() -> Self {
        let (a, b) = (1.0 / 6.0, 2.0 / 3.0);
        Self {
            points: vec![[b, a, a], [a, b, a], [a, a, b]],
            weights: vec![THIRD; 3],
            degree: 2,
        }
    }

    pub fn degree4() -> Self {
        let b1 = 1.0 - 2.0 * D4_A1;
        let b2 = 1.0 - 2.0 * D4_A2;
        Self {
            points: vec![
                [b1, D4_A1, D4_A1],
                [D4_A1, b1, D4_A1],
                [D4_A1, D4_A1, b1],
                [b2, D4_A2, D4_A2],
                [D4_A2, b2, D4_A2],
                [D4_A2, D4_A2, b2],
            ],
            weights: vec![D4_W1, D4_W1, D4_W1, D4_W2, D4_W2, D4_W2],
            degree: 4,
        }
    }

    /// Cheapest available rule exact for polynomials of degree `degree`.
    pub fn for_degree(degree: usize) -> Option<Self> {
        match degree {
            0 | 1 => Some(Self::centroid()),
            2 => Some(Self::degree2()),
            3 | 4 => Some(Self::degree4()),
            _ => None,
        }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ([f64; 3], f64)> + '_ {
        self.points.iter().copied().zip(self.weights.iter().copied())
    }

    /// Integral of `f` over cell `c`.
    pub fn integrate_cell(&self, mesh: &TriMesh, c: usize, mut f: impl FnMut(Point, [f64; 3]) -> f64) -> f64 {
        let area = mesh.cell(c).area;
        area * self
            .iter()
            .map(|(bary, w)| w * f(mesh.map_point(c, bary), bary))
            .sum::<f64>()
    }

    pub fn integrate(&self, mesh: &TriMesh, mut f: impl FnMut(usize, Point, [f64; 3]) -> f64) -> f64 {
        (0..mesh.num_cells())
            .map(|c| self.integrate_cell(mesh, c, |p, b| f(c, p, b)))
            .sum()
    }
}
