//! Sparse symmetric matrices on a fixed pattern and SPD linear solves.
//!
//! Direct solves use a sparse Cholesky factorisation behind a reverse
//! Cuthill-McKee ordering; above [`DIRECT_SOLVE_LIMIT`] unknowns a
//! Jacobi-preconditioned conjugate gradient is used instead.

use std::collections::VecDeque;

use nalgebra::DVector;
use nalgebra_sparse::factorization::{CscCholesky, CscSymbolicCholesky};
use nalgebra_sparse::pattern::SparsityPattern;
use thiserror::Error;

pub const DIRECT_SOLVE_LIMIT: usize = 100_000;
pub const CG_RELATIVE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearSolveError {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("conjugate gradient broke down at iteration {0}")]
    Breakdown(usize),
    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Square sparse matrix in CSR form with sorted column indices and a structurally
/// symmetric pattern that always contains the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Zero matrix whose pattern holds the diagonal plus both orientations of each pair.
    pub fn from_pairs(n: usize, pairs: &[[usize; 2]]) -> Self {
        let mut rows: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for &[a, b] in pairs {
            if a != b {
                rows[a].push(b);
                rows[b].push(a);
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            col_idx.extend(r);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        Self {
            n,
            row_ptr,
            col_idx,
            values: vec![0.0; nnz],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    /// Storage position of entry `(i, j)`, if it is in the pattern.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[lo..hi].binary_search(&j).ok().map(|k| lo + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    pub fn fill_zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(j, a)| a * x[j]).sum())
            .collect()
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// `self + alpha * other`; both must share the pattern.
    pub fn add_scaled(&mut self, alpha: f64, other: &CsrMatrix) {
        debug_assert_eq!(self.col_idx, other.col_idx);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    /// Largest `|a_ij - a_ji|` over stored entries.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for (j, a) in self.row(i) {
                worst = worst.max((a - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Replaces row and column `k` by the identity row, for pinning one unknown.
    pub fn pin_unknown(&mut self, k: usize) {
        for p in self.row_ptr[k]..self.row_ptr[k + 1] {
            let j = self.col_idx[p];
            self.values[p] = if j == k { 1.0 } else { 0.0 };
            if j != k {
                let q = self.position(j, k).expect("pattern is symmetric");
                self.values[q] = 0.0;
            }
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, a) in self.row(i) {
                row[j] = a;
            }
        }
        d
    }
}

/// Reverse Cuthill-McKee ordering of the pattern. Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.dim();
    let degree: Vec<usize> = (0..n).map(|i| a.row_ptr[i + 1] - a.row_ptr[i]).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| (degree[i], i));
    for &start in &by_degree {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = a.col_idx[a.row_ptr[v]..a.row_ptr[v + 1]]
                .iter()
                .copied()
                .filter(|&w| !visited[w])
                .collect();
            nbrs.sort_by_key(|&w| (degree[w], w));
            for w in nbrs {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

enum Backend {
    Direct {
        perm: Vec<usize>,
        value_map: Vec<usize>,
        permuted_values: Vec<f64>,
        symbolic: Option<CscSymbolicCholesky>,
        factor: Option<CscCholesky<f64>>,
    },
    ConjugateGradient,
}

/// Reusable SPD solver bound to one sparsity pattern.
pub struct SpdSolver {
    n: usize,
    backend: Backend,
}

impl SpdSolver {
    pub fn new(pattern: &CsrMatrix) -> Self {
        if pattern.dim() > DIRECT_SOLVE_LIMIT {
            return Self::iterative(pattern);
        }
        let n = pattern.dim();
        let perm = reverse_cuthill_mckee(pattern);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        // Column `new` of the permuted matrix is row `perm[new]` of the original.
        let mut offsets = Vec::with_capacity(n + 1);
        let mut indices = Vec::with_capacity(pattern.nnz());
        let mut value_map = vec![0; pattern.nnz()];
        offsets.push(0);
        for &old in &perm {
            let (lo, hi) = (pattern.row_ptr[old], pattern.row_ptr[old + 1]);
            let mut col: Vec<(usize, usize)> = (lo..hi).map(|p| (inv[pattern.col_idx[p]], p)).collect();
            col.sort_unstable();
            for (row, p) in col {
                value_map[p] = indices.len();
                indices.push(row);
            }
            offsets.push(indices.len());
        }
        let sparsity = SparsityPattern::try_from_offsets_and_indices(n, n, offsets, indices)
            .expect("permuted pattern is valid");
        Self {
            n,
            backend: Backend::Direct {
                perm,
                value_map,
                permuted_values: vec![0.0; pattern.nnz()],
                symbolic: Some(CscSymbolicCholesky::factor(sparsity)),
                factor: None,
            },
        }
    }

    pub fn iterative(pattern: &CsrMatrix) -> Self {
        Self {
            n: pattern.dim(),
            backend: Backend::ConjugateGradient,
        }
    }

    pub fn solve(&mut self, a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>, LinearSolveError> {
        if a.dim() != self.n || b.len() != self.n {
            return Err(LinearSolveError::DimensionMismatch {
                expected: self.n,
                found: if a.dim() != self.n { a.dim() } else { b.len() },
            });
        }
        match &mut self.backend {
            Backend::ConjugateGradient => conjugate_gradient(a, b, CG_RELATIVE_TOLERANCE, 10 * self.n + 100),
            Backend::Direct {
                perm,
                value_map,
                permuted_values,
                symbolic,
                factor,
            } => {
                for (p, &q) in value_map.iter().enumerate() {
                    permuted_values[q] = a.values[p];
                }
                match factor {
                    Some(f) => f
                        .refactor(permuted_values)
                        .map_err(|_| LinearSolveError::NotPositiveDefinite)?,
                    None => {
                        let sym = symbolic.take().expect("symbolic factorisation present");
                        *factor = Some(
                            CscCholesky::factor_numerical(sym, permuted_values)
                                .map_err(|_| LinearSolveError::NotPositiveDefinite)?,
                        );
                    }
                }
                let f = factor.as_ref().expect("factorised");
                let mut rhs = DVector::from_iterator(self.n, perm.iter().map(|&old| b[old]));
                f.solve_mut(&mut rhs);
                let mut x = vec![0.0; self.n];
                for (new, &old) in perm.iter().enumerate() {
                    x[old] = rhs[new];
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(LinearSolveError::NotPositiveDefinite);
                }
                Ok(x)
            }
        }
    }
}

/// Jacobi-preconditioned conjugate gradient, stopped at `||r|| <= rel_tol * ||b||`.
pub fn conjugate_gradient(
    a: &CsrMatrix,
    b: &[f64],
    rel_tol: f64,
    max_iterations: usize,
) -> Result<Vec<f64>, LinearSolveError> {
    let n = a.dim();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let diag = a.diagonal();
    if diag.iter().any(|&d| !(d > 0.0)) {
        return Err(LinearSolveError::NotPositiveDefinite);
    }
    let b_norm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 0..max_iterations {
        let ap = a.mul_vec(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(LinearSolveError::Breakdown(it));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= rel_tol * b_norm {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(LinearSolveError::NotConverged {
        iterations: max_iterations,
        residual: dot(&r, &r).sqrt() / b_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 1D Laplacian plus identity on a path graph, with scrambled labels.
    fn test_matrix(n: usize) -> CsrMatrix {
        let label = |i: usize| (i * 7) % n;
        let pairs: Vec<[usize; 2]> = (0..n - 1).map(|i| [label(i), label(i + 1)]).collect();
        let mut a = CsrMatrix::from_pairs(n, &pairs);
        for &[i, j] in &pairs {
            let pij = a.position(i, j).unwrap();
            let pji = a.position(j, i).unwrap();
            a.values_mut()[pij] -= 1.0;
            a.values_mut()[pji] -= 1.0;
            let pii = a.position(i, i).unwrap();
            a.values_mut()[pii] += 1.0;
            let pjj = a.position(j, j).unwrap();
            a.values_mut()[pjj] += 1.0;
        }
        for i in 0..n {
            let p = a.position(i, i).unwrap();
            a.values_mut()[p] += 1.0;
        }
        a
    }

    #[test]
    fn direct_and_iterative_agree() {
        let a = test_matrix(50);
        let b: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let x = SpdSolver::new(&a).solve(&a, &b).unwrap();
        let y = conjugate_gradient(&a, &b, 1e-14, 1000).unwrap();
        let r = a.mul_vec(&x);
        for i in 0..50 {
            assert!((r[i] - b[i]).abs() < 1e-12);
            assert!((x[i] - y[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn refactorisation_reuses_pattern() {
        let mut a = test_matrix(20);
        let mut solver = SpdSolver::new(&a);
        let b = vec![1.0; 20];
        let x1 = solver.solve(&a, &b).unwrap();
        a.scale(2.0);
        let x2 = solver.solve(&a, &b).unwrap();
        for (p, q) in x1.iter().zip(&x2) {
            assert!((p - 2.0 * q).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_matrix_is_reported() {
        let mut a = test_matrix(10);
        a.scale(-1.0);
        let err = SpdSolver::new(&a).solve(&a, &[1.0; 10]).unwrap_err();
        assert_eq!(err, LinearSolveError::NotPositiveDefinite);
    }

    #[test]
    fn rcm_is_a_permutation() {
        let a = test_matrix(31);
        let mut p = reverse_cuthill_mckee(&a);
        p.sort_unstable();
        assert_eq!(p, (0..31).collect::<Vec<_>>());
    }

    #[test]
    fn pinning_keeps_symmetry() {
        let mut a = test_matrix(12);
        a.pin_unknown(3);
        assert_eq!(a.max_asymmetry(), 0.0);
        assert_eq!(a.get(3, 3), 1.0);
    }
}
