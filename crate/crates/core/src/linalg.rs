//! The killed precision form `L_U` and the two ways of solving against it.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::graph::{DomainMask, WeightedGraph};

/// Largest system that may be factorized densely.
pub const DENSE_LIMIT: usize = 4000;
/// `Auto` factorizes densely up to this size and uses conjugate gradients beyond.
pub const AUTO_DENSE_LIMIT: usize = 1000;
pub const DEFAULT_TOLERANCE: f64 = 1e-10;

/// `L_U` in compressed rows over local indices: diagonal `λ_x`, off-diagonal `-λ_xy`.
#[derive(Clone, Debug)]
pub struct KilledLaplacian {
    diag: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl KilledLaplacian {
    pub fn new(graph: &WeightedGraph, domain: &DomainMask) -> Self {
        let members = domain.members();
        let mut diag = Vec::with_capacity(members.len());
        let mut row_ptr = Vec::with_capacity(members.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for &x in members {
            diag.push(graph.mass(x));
            for nb in graph.neighbors(x) {
                if let Some(j) = domain.local(nb.vertex as usize) {
                    cols.push(j as u32);
                    vals.push(-graph.edge(nb.edge as usize).weight);
                }
            }
            row_ptr.push(cols.len());
        }
        Self { diag, row_ptr, cols, vals }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.diag.len() {
            let mut s = self.diag[i] * x[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.cols[k] as usize];
            }
            out[i] = s;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.cols[k] as usize)] = self.vals[k];
            }
        }
        m
    }
}

/// Jacobi-preconditioned conjugate gradients. Stops when `|r| <= tol |b|`.
pub fn conjugate_gradient(a: &KilledLaplacian, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = a.dim();
    let mut x = vec![0.0; n];
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(a.diag()).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for iter in 0..max_iter {
        a.matvec(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let res = norm(&r) / b_norm;
        if res <= tol {
            return Ok(x);
        }
        if !res.is_finite() {
            return Err(Error::NotConverged { residual: res, iterations: iter + 1 });
        }
        for i in 0..n {
            z[i] = r[i] / a.diag()[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NotConverged { residual: norm(&r) / b_norm, iterations: max_iter })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SolverChoice {
    #[default]
    Auto,
    Dense,
    Iterative,
}

enum Backend {
    Dense(Cholesky<f64, Dyn>),
    Iterative { tol: f64, max_iter: usize },
}

/// A factorized (or iteratively solvable) `L_U` for a fixed transient domain.
pub struct KilledSystem {
    matrix: KilledLaplacian,
    backend: Backend,
}

impl KilledSystem {
    pub fn new(graph: &WeightedGraph, domain: &DomainMask, choice: SolverChoice, tol: f64) -> Result<Self> {
        domain.check_transient(graph)?;
        let matrix = KilledLaplacian::new(graph, domain);
        let dense = match choice {
            SolverChoice::Auto => matrix.dim() <= AUTO_DENSE_LIMIT,
            SolverChoice::Dense => {
                if matrix.dim() > DENSE_LIMIT {
                    return Err(Error::TooLarge { what: "dense factorization", size: matrix.dim(), limit: DENSE_LIMIT });
                }
                true
            }
            SolverChoice::Iterative => false,
        };
        let backend = if dense {
            let chol = Cholesky::new(matrix.to_dense())
                .ok_or(Error::RecurrentDomain { vertex: domain.members()[0] })?;
            Backend::Dense(chol)
        } else {
            Backend::Iterative { tol, max_iter: 50 * matrix.dim().max(200) }
        };
        Ok(Self { matrix, backend })
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn matrix(&self) -> &KilledLaplacian {
        &self.matrix
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.backend, Backend::Dense(_))
    }

    /// Lower Cholesky factor `C` with `L_U = C Cᵀ`, when factorized densely.
    pub fn dense_factor(&self) -> Option<DMatrix<f64>> {
        match &self.backend {
            Backend::Dense(chol) => Some(chol.l()),
            Backend::Iterative { .. } => None,
        }
    }

    pub fn tolerance(&self) -> f64 {
        match self.backend {
            Backend::Dense(_) => 0.0,
            Backend::Iterative { tol, .. } => tol,
        }
    }

    /// Solves `L_U x = b` over local indices.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        match &self.backend {
            Backend::Dense(chol) => Ok(chol.solve(&DVector::from_column_slice(b)).as_slice().to_vec()),
            Backend::Iterative { tol, max_iter } => conjugate_gradient(&self.matrix, b, *tol, *max_iter),
        }
    }

    /// Solves against every column of `b`.
    pub fn solve_many(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &self.backend {
            Backend::Dense(chol) => Ok(chol.solve(b)),
            Backend::Iterative { .. } => {
                let mut out = DMatrix::zeros(b.nrows(), b.ncols());
                for j in 0..b.ncols() {
                    let col = self.solve(b.column(j).as_slice())?;
                    out.set_column(j, &DVector::from_vec(col));
                }
                Ok(out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_lattice_box;

    #[test]
    fn cg_matches_dense_on_a_box() {
        let (g, u) = build_lattice_box(3, 6).unwrap();
        let dense = KilledSystem::new(&g, &u, SolverChoice::Dense, DEFAULT_TOLERANCE).unwrap();
        let cg = KilledSystem::new(&g, &u, SolverChoice::Iterative, 1e-12).unwrap();
        let b: Vec<f64> = (0..u.len()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let x = dense.solve(&b).unwrap();
        let y = cg.solve(&b).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cg_reports_stall() {
        let (g, u) = build_lattice_box(2, 10).unwrap();
        let a = KilledLaplacian::new(&g, &u);
        let b = vec![1.0; a.dim()];
        let err = conjugate_gradient(&a, &b, 1e-14, 2).unwrap_err();
        assert!(matches!(err, Error::NotConverged { iterations: 2, .. }));
    }

    #[test]
    fn dense_limit_enforced() {
        let (g, u) = build_lattice_box(3, 16).unwrap();
        assert!(matches!(
            KilledSystem::new(&g, &u, SolverChoice::Dense, DEFAULT_TOLERANCE),
            Err(Error::TooLarge { .. })
        ));
    }
}
