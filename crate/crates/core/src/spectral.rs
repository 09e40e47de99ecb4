//! Spectral graph filtering, from exact eigenbasis filtering through the
//! Chebyshev truncation to the single-parameter linear rule.
//!
//! The three routes agree exactly in exact arithmetic:
//!
//! * `U diag(θ) Uᵀ x` with `θ_k = Σ_m θ'_m T_m(λ̂_k)` equals the Chebyshev
//!   filter `Σ_m θ'_m T_m(L̂) x`, where `L̂ = (2 / λ_max) L - I`;
//! * with order 1, `λ_max = 2` and `θ' = (θ, -θ)`, the Chebyshev filter is
//!   `θ (I + D^{-1/2} A D^{-1/2}) x`.
//!
//! Only the last two are meant for production use; the eigendecomposition is
//! a reference for small graphs.

use crate::error::{Error, Result};
use crate::graph::WeightedAdjacency;
use crate::linalg::Matrix;

/// Largest graph [`SpectralDecomposition`] accepts.
pub const MAX_DECOMPOSITION_SIZE: usize = 64;

/// `D^{-1/2} A D^{-1/2}`. A lone joint (`N = 1`) maps to `[[0]]`; any other
/// zero-degree joint is an error.
pub fn normalized_adjacency(adj: &WeightedAdjacency) -> Result<Matrix> {
    let n = adj.len();
    let degrees = adj.degrees();
    if n > 1 {
        if let Some(i) = degrees.iter().position(|&d| d <= 0.0) {
            return Err(Error::IsolatedNode(i));
        }
    }
    let inv_sqrt: Vec<f64> = degrees
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let a = adj.matrix();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = inv_sqrt[i] * a[(i, j)] * inv_sqrt[j];
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok(s)
}

/// Symmetric normalized Laplacian `I - D^{-1/2} A D^{-1/2}`.
pub fn laplacian(adj: &WeightedAdjacency) -> Result<Matrix> {
    let s = normalized_adjacency(adj)?;
    Ok(Matrix::identity(adj.len()).sub(&s).expect("same shape"))
}

#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    /// Orthonormal eigenvectors as columns, matching `lambda`.
    pub u: Matrix,
    /// Eigenvalues, ascending.
    pub lambda: Vec<f64>,
    pub lambda_max: f64,
}

impl SpectralDecomposition {
    pub fn new(laplacian: &Matrix) -> Result<Self> {
        let n = laplacian.rows();
        if !laplacian.is_square() || n == 0 {
            return Err(Error::DimensionMismatch("laplacian must be square".into()));
        }
        if n > MAX_DECOMPOSITION_SIZE {
            return Err(Error::DimensionMismatch(format!(
                "eigendecomposition limited to {MAX_DECOMPOSITION_SIZE} nodes, got {n}"
            )));
        }
        let eig = nalgebra::SymmetricEigen::new(laplacian.to_nalgebra());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let lambda: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let u = Matrix::from_fn(n, n, |i, k| eig.eigenvectors[(i, order[k])]);
        let lambda_max = *lambda.last().expect("n > 0");
        Ok(SpectralDecomposition { u, lambda, lambda_max })
    }

    /// `U diag(values) Uᵀ`.
    pub fn reconstruct(&self, values: &[f64]) -> Matrix {
        let n = self.lambda.len();
        Matrix::from_fn(n, n, |i, j| (0..n).map(|k| self.u[(i, k)] * values[k] * self.u[(j, k)]).sum())
    }
}

/// `z = U diag(θ) Uᵀ x`.
pub fn spectral_conv_exact(decomp: &SpectralDecomposition, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let n = decomp.lambda.len();
    if theta.len() != n || x.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "graph of {n} nodes, {} filter values, signal of {}",
            theta.len(),
            x.len()
        )));
    }
    let u = &decomp.u;
    let spectrum: Vec<f64> = (0..n)
        .map(|k| theta[k] * (0..n).map(|i| u[(i, k)] * x[i]).sum::<f64>())
        .collect();
    Ok((0..n).map(|i| (0..n).map(|k| u[(i, k)] * spectrum[k]).sum()).collect())
}

/// Chebyshev polynomial of the first kind, `T_m(x)`, by the three-term recurrence.
pub fn chebyshev_t(m: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    match m {
        0 => prev,
        _ => {
            for _ in 1..m {
                let next = 2.0 * x * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// `T_m(X)` for a square matrix argument.
pub fn chebyshev_t_matrix(m: usize, x: &Matrix) -> Result<Matrix> {
    if !x.is_square() {
        return Err(Error::DimensionMismatch("matrix argument must be square".into()));
    }
    let eye = Matrix::identity(x.rows());
    if m == 0 {
        return Ok(eye);
    }
    let (mut prev, mut cur) = (eye, x.clone());
    for _ in 1..m {
        let next = x.matmul(&cur)?.scale(2.0).sub(&prev)?;
        prev = cur;
        cur = next;
    }
    Ok(cur)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChebyshevFilter {
    /// `θ'_0 ..= θ'_M`.
    pub coeffs: Vec<f64>,
    pub lambda_max: f64,
}

impl ChebyshevFilter {
    /// Filter with the conventional `λ_max = 2`.
    pub fn new(coeffs: Vec<f64>) -> Self {
        ChebyshevFilter {
            coeffs,
            lambda_max: 2.0,
        }
    }

    pub fn with_lambda_max(coeffs: Vec<f64>, lambda_max: f64) -> Self {
        ChebyshevFilter { coeffs, lambda_max }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    /// Scalar response `Σ_m θ'_m T_m(2λ / λ_max - 1)` at eigenvalue `λ`.
    pub fn response(&self, lambda: f64) -> f64 {
        let scaled = 2.0 * lambda / self.lambda_max - 1.0;
        self.coeffs
            .iter()
            .enumerate()
            .map(|(m, c)| c * chebyshev_t(m, scaled))
            .sum()
    }
}

/// Nonzero pattern of a square matrix, row by row.
struct SparseRows(Vec<Vec<(usize, f64)>>);

impl SparseRows {
    fn from_dense(m: &Matrix) -> Self {
        SparseRows(
            (0..m.rows())
                .map(|i| {
                    m.row(i)
                        .iter()
                        .enumerate()
                        .filter(|(_, v)| **v != 0.0)
                        .map(|(j, &v)| (j, v))
                        .collect()
                })
                .collect(),
        )
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.0.iter().map(|row| row.iter().map(|&(j, v)| v * x[j]).sum()).collect()
    }
}

/// `Σ_m θ'_m T_m(L̂) x` by the vector recurrence, touching only the nonzeros of `L̂`.
pub fn chebyshev_conv(filter: &ChebyshevFilter, laplacian: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    let n = laplacian.rows();
    if !laplacian.is_square() || x.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} laplacian with signal of {}",
            laplacian.rows(),
            laplacian.cols(),
            x.len()
        )));
    }
    if filter.lambda_max.is_nan() || filter.lambda_max <= 0.0 {
        return Err(Error::DimensionMismatch("lambda_max must be positive".into()));
    }
    let scale = 2.0 / filter.lambda_max;
    let scaled = Matrix::from_fn(n, n, |i, j| {
        scale * laplacian[(i, j)] - if i == j { 1.0 } else { 0.0 }
    });
    let op = SparseRows::from_dense(&scaled);

    let mut z = vec![0.0; n];
    let mut accumulate = |coeff: f64, t: &[f64]| {
        for (zi, ti) in z.iter_mut().zip(t) {
            *zi += coeff * ti;
        }
    };
    let Some((&first, rest)) = filter.coeffs.split_first() else {
        return Ok(z);
    };
    accumulate(first, x);
    let mut prev = x.to_vec();
    let mut cur = op.apply(x);
    for (m, &coeff) in rest.iter().enumerate() {
        if m > 0 {
            let next: Vec<f64> = op.apply(&cur).iter().zip(&prev).map(|(a, b)| 2.0 * a - b).collect();
            prev = std::mem::replace(&mut cur, next);
        }
        accumulate(coeff, &cur);
    }
    Ok(z)
}

/// `θ (I + D^{-1/2} A D^{-1/2}) x`.
pub fn linear_conv(adj: &WeightedAdjacency, theta: f64, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != adj.len() {
        return Err(Error::DimensionMismatch(format!(
            "graph of {} nodes with signal of {}",
            adj.len(),
            x.len()
        )));
    }
    let s = normalized_adjacency(adj)?;
    let sx = s.matvec(x)?;
    Ok(x.iter().zip(sx).map(|(xi, si)| theta * (xi + si)).collect())
}
