//! Cholesky factorization with diagonal jitter escalation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter used for inducing Gram matrices: each diagonal entry is
/// scaled by `1 + KVV_JITTER`.
pub const KVV_JITTER: f64 = 1e-6;

/// Jitter levels tried, in order, by [`robust_cholesky`].
pub const JITTER_LADDER: [f64; 5] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// A Cholesky factor together with the relative jitter `c` that was needed:
/// the factored matrix is `K + c·diag(K)`.
#[derive(Clone, Debug)]
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn log_det(&self) -> f64 {
        self.chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum()
    }
}

fn with_jitter(k: &DMatrix<f64>, c: f64) -> DMatrix<f64> {
    let mut out = k.clone();
    if c > 0.0 {
        for i in 0..out.nrows() {
            let d = out[(i, i)];
            out[(i, i)] = d + c * d.abs().max(f64::MIN_POSITIVE);
        }
    }
    out
}

/// Factor `K + c·diag(K)` starting from relative jitter `start` and moving up
/// the ladder until the factorization succeeds; fails past `1e-4`.
pub fn robust_cholesky(k: &DMatrix<f64>, start: f64) -> Result<Factor> {
    if k.nrows() != k.ncols() {
        return Err(Error::Dimension(format!("cholesky of a {}x{} matrix", k.nrows(), k.ncols())));
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite entry in matrix to factor"));
    }
    let mut levels = vec![start];
    levels.extend(JITTER_LADDER.iter().copied().filter(|&c| c > start));
    for c in levels {
        if let Some(chol) = Cholesky::new(with_jitter(k, c)) {
            if chol.l_dirty().diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
                return Ok(Factor { chol, jitter: c });
            }
        }
    }
    Err(Error::numerical(format!(
        "cholesky failed for a {0}x{0} matrix even with relative jitter {1:e}",
        k.nrows(),
        JITTER_LADDER[JITTER_LADDER.len() - 1]
    )))
}

/// Lower-triangular part of `a` (strict upper part zeroed).
pub fn lower_triangle(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for j in 0..out.ncols() {
        for i in 0..j.min(out.nrows()) {
            out[(i, j)] = 0.0;
        }
    }
    out
}
