//! Randomized truncated SVD: Gaussian range finder, power iteration with
//! re-orthonormalization at every half step, then an exact SVD of the small
//! projected matrix.

use nalgebra::DMatrix;

use super::{CsrMatrix, Matrix, Rng};
use crate::{Error, Result};

/// Oversampling added to the requested rank.
pub const OVERSAMPLING: usize = 8;
/// Default number of power iterations.
pub const DEFAULT_POWER_ITERS: usize = 7;

/// Anything that can multiply a dense block from the left, with and without
/// transposition.
pub trait LinearOperator {
    fn shape(&self) -> (usize, usize);
    fn apply(&self, x: &Matrix) -> Matrix;
    fn apply_t(&self, x: &Matrix) -> Matrix;
}

impl LinearOperator for Matrix {
    fn shape(&self) -> (usize, usize) {
        self.dim()
    }
    fn apply(&self, x: &Matrix) -> Matrix {
        self.dot(x)
    }
    fn apply_t(&self, x: &Matrix) -> Matrix {
        self.t().dot(x)
    }
}

impl LinearOperator for CsrMatrix {
    fn shape(&self) -> (usize, usize) {
        CsrMatrix::shape(self)
    }
    fn apply(&self, x: &Matrix) -> Matrix {
        self.matmul_dense(x).expect("operator shape")
    }
    fn apply_t(&self, x: &Matrix) -> Matrix {
        self.t_matmul_dense(x).expect("operator shape")
    }
}

/// `M ≈ U · diag(S) · Vᵀ` with `q` retained components.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd {
    /// m×q, orthonormal columns.
    pub u: Matrix,
    /// Nonincreasing, nonnegative.
    pub s: Vec<f64>,
    /// n×q, orthonormal columns.
    pub v: Matrix,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U · diag(S)`.
    pub fn us(&self) -> Matrix {
        let mut us = self.u.clone();
        for (mut col, &s) in us.columns_mut().into_iter().zip(&self.s) {
            col *= s;
        }
        us
    }

    pub fn reconstruct(&self) -> Matrix {
        self.us().dot(&self.v.t())
    }
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Orthonormal basis of the column space (thin Householder Q).
fn orthonormalize(y: &Matrix) -> Matrix {
    from_na(&to_na(y).qr().q())
}

/// Rank-`q` randomized SVD of `m` with `iters` power iterations.
pub fn truncated_svd<M: LinearOperator + ?Sized>(m: &M, q: usize, iters: usize, seed: u64) -> Result<TruncatedSvd> {
    let (rows, cols) = m.shape();
    let min_dim = rows.min(cols);
    if q == 0 || q > min_dim {
        return Err(Error::InvalidArgument(format!(
            "svd rank {q} must lie in [1, {min_dim}]"
        )));
    }
    if iters == 0 {
        return Err(Error::InvalidArgument("svd needs at least one power iteration".into()));
    }
    let l = (q + OVERSAMPLING).min(min_dim);
    let mut rng = Rng::new(seed);
    let omega = Matrix::from_shape_simple_fn((cols, l), || rng.normal());
    let mut basis = orthonormalize(&m.apply(&omega));
    for _ in 0..iters {
        let z = orthonormalize(&m.apply_t(&basis));
        basis = orthonormalize(&m.apply(&z));
    }
    // B = Qᵀ M, computed as (Mᵀ Q)ᵀ; decompose its transpose (n×l, tall).
    let bt = to_na(&m.apply_t(&basis));
    let svd = bt.svd(true, true);
    let (vb, sv, ubt) = (
        svd.u.expect("requested U"),
        svd.singular_values,
        svd.v_t.expect("requested V"),
    );
    // Bᵀ = Vb Σ Ubᵀ  ⇒  B = Ub Σ Vbᵀ.
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    order.truncate(q);
    let ub = from_na(&ubt.transpose());
    let vb = from_na(&vb);
    let u_small = ub.select(ndarray::Axis(1), &order);
    let v = vb.select(ndarray::Axis(1), &order);
    let u = basis.dot(&u_small);
    let s = order.iter().map(|&k| sv[k].max(0.0)).collect();
    Ok(TruncatedSvd { u, s, v })
}
