use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 10_000;

/// Real symmetric matrix; only the upper triangle is stored.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    upper: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            upper: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    /// Builds from a generator evaluated on the upper triangle only.
    pub fn from_fn(dim: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// Symmetrizes a dense row-major matrix as `(A + Aᵀ)/2`.
    pub fn from_dense(dim: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != dim * dim {
            return Err(Error::Shape(format!("{} entries for a {dim}x{dim} matrix", dense.len())));
        }
        Ok(Self::from_fn(dim, |i, j| 0.5 * (dense[i * dim + j] + dense[j * dim + i])))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn index(&self, i: usize, j: usize) -> usize {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        // rows 0..r hold dim, dim-1, ... entries
        r * self.dim - r * (r + 1) / 2 + c
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.upper[self.index(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.index(i, j);
        self.upper[k] = v;
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.dim;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = self.get(i, j);
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(i, j) * v[j]).sum())
            .collect()
    }

    pub fn frobenius(&self) -> f64 {
        self.to_dense().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `a·self + b·other`.
    pub fn lincomb(&self, a: f64, other: &SymMatrix, b: f64) -> SymMatrix {
        SymMatrix {
            dim: self.dim,
            upper: self
                .upper
                .iter()
                .zip(&other.upper)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        }
    }
}

/// Eigendecomposition `m = V·diag(λ)·Vᵀ` with eigenvalues sorted descending.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub values: Vec<f64>,
    /// Column `k` (entries `vectors[i*dim + k]`) is the eigenvector for `values[k]`.
    pub vectors: Vec<f64>,
    dim: usize,
}

impl SymEig {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, k: usize) -> Vec<f64> {
        (0..self.dim).map(|i| self.vectors[i * self.dim + k]).collect()
    }

    /// `V·diag(f(λ))·Vᵀ`.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.dim;
        let fv: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        SymMatrix::from_fn(n, |i, j| {
            (0..n)
                .map(|k| self.vectors[i * n + k] * fv[k] * self.vectors[j * n + k])
                .sum()
        })
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.map_spectrum(|l| l)
    }
}

/// Symmetric eigendecomposition (implicit QR on the tridiagonal form).
pub fn sym_eig(m: &SymMatrix) -> Result<SymEig> {
    let n = m.dim();
    if n == 0 {
        return Ok(SymEig {
            values: vec![],
            vectors: vec![],
            dim: 0,
        });
    }
    let dense = DMatrix::from_row_slice(n, n, &m.to_dense());
    let eig = dense
        .try_symmetric_eigen(f64::EPSILON, MAX_SWEEPS)
        .ok_or(Error::NonConvergence(MAX_SWEEPS))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &k) in order.iter().enumerate() {
        for i in 0..n {
            vectors[i * n + col] = eig.eigenvectors[(i, k)];
        }
    }
    Ok(SymEig {
        values,
        vectors,
        dim: n,
    })
}
