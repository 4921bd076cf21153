//! Rank-revealing least squares.
//!
//! Householder QR processed in column order. A column whose remaining norm
//! after projecting out the already-accepted columns is below
//! `tol * max_column_norm` is declared collinear and skipped, so the drop
//! order is deterministic: a later column is always dropped in favor of an
//! earlier one. `max_column_norm` is the first pivot a fully pivoted QR
//! would select.

use nalgebra::{DMatrix, DVector};

/// Relative pivot tolerance for declaring a column collinear.
pub const COLLINEARITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LeastSquares {
    /// Indices of the columns that entered the solve, ascending.
    pub kept: Vec<usize>,
    /// Indices of the columns dropped as collinear, ascending.
    pub dropped: Vec<usize>,
    /// Coefficients for `kept`, same order.
    pub coef: Vec<f64>,
    pub residuals: Vec<f64>,
    /// `(X_kept' X_kept)^{-1}`.
    pub xtx_inv: DMatrix<f64>,
}

impl LeastSquares {
    /// Position of original column `col` within `kept`.
    pub fn position(&self, col: usize) -> Option<usize> {
        self.kept.iter().position(|&c| c == col)
    }
}

/// Solves `min ||y - X b||` over the columns of `x` that are not collinear
/// with earlier columns.
pub fn least_squares(x: &DMatrix<f64>, y: &[f64], tol: f64) -> LeastSquares {
    let (n, p) = x.shape();
    assert_eq!(y.len(), n, "response length must match design rows");

    let scale = (0..p).map(|j| x.column(j).norm()).fold(0.0_f64, f64::max);
    let mut a = x.clone();
    let mut reflectors: Vec<(usize, DVector<f64>, f64)> = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();

    for j in 0..p {
        let k = kept.len();
        if k >= n {
            dropped.push(j);
            continue;
        }
        let norm = a.view((k, j), (n - k, 1)).norm();
        if scale == 0.0 || norm <= tol * scale {
            dropped.push(j);
            continue;
        }
        // v = x + sign(x0)*||x|| e1, H = I - beta v v'
        let mut v: DVector<f64> = a.view((k, j), (n - k, 1)).column(0).into_owned();
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vtv = v.norm_squared();
        let beta = if vtv > 0.0 { 2.0 / vtv } else { 0.0 };
        for c in j..p {
            let mut col = a.view_mut((k, c), (n - k, 1));
            let s = beta * v.dot(&col.column(0));
            col.column_mut(0).axpy(-s, &v, 1.0);
        }
        reflectors.push((k, v, beta));
        kept.push(j);
    }

    let r = kept.len();
    let mut qty = DVector::from_column_slice(y);
    for (k, v, beta) in &reflectors {
        let mut seg = qty.rows_mut(*k, n - k);
        let s = beta * v.dot(&seg);
        seg.axpy(-s, v, 1.0);
    }

    let mut rmat = DMatrix::zeros(r, r);
    for (ci, &c) in kept.iter().enumerate() {
        for ri in 0..=ci {
            rmat[(ri, ci)] = a[(ri, c)];
        }
    }
    let coef = back_substitute(&rmat, qty.rows(0, r).as_slice());
    let rinv = upper_triangular_inverse(&rmat);
    let xtx_inv = symmetrize(&rinv * rinv.transpose());

    let mut residuals = y.to_vec();
    for (ci, &c) in kept.iter().enumerate() {
        let b = coef[ci];
        for (res, xv) in residuals.iter_mut().zip(x.column(c).iter()) {
            *res -= b * xv;
        }
    }

    LeastSquares { kept, dropped, coef, residuals, xtx_inv }
}

fn back_substitute(r: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let m = r.nrows();
    let mut x = vec![0.0; m];
    for i in (0..m).rev() {
        let mut s = b[i];
        for j in i + 1..m {
            s -= r[(i, j)] * x[j];
        }
        x[i] = s / r[(i, i)];
    }
    x
}

pub fn upper_triangular_inverse(r: &DMatrix<f64>) -> DMatrix<f64> {
    let m = r.nrows();
    let mut inv = DMatrix::zeros(m, m);
    for col in 0..m {
        for i in (0..=col).rev() {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for j in i + 1..=col {
                s -= r[(i, j)] * inv[(j, col)];
            }
            inv[(i, col)] = s / r[(i, i)];
        }
    }
    inv
}

pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Inverse of a symmetric positive definite matrix, or `None` if the
/// Cholesky factorization fails.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| symmetrize(c.inverse()))
}

/// Sorted indices of columns `x` keeps under [`least_squares`] rank
/// detection, without solving.
pub fn independent_columns(x: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    least_squares(x, &vec![0.0; x.nrows()], tol).kept
}
