use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Diagonal jitter tried, in order, when a plain factorization fails.
pub const JITTER_LADDER: [f64; 3] = [1e-10, 1e-8, 1e-6];

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(Error::dim("cholesky", a.rows(), a.cols()));
    }
    if let Some(l) = try_cholesky(a, 0.0) {
        return Ok(l);
    }
    for jitter in JITTER_LADDER {
        if let Some(l) = try_cholesky(a, jitter) {
            return Ok(l);
        }
    }
    Err(Error::NotPositiveDefinite {
        jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
    })
}

fn try_cholesky(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j) + jitter;
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Some(l)
}

/// Solve `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l.get(i, k) * x[k]).sum();
        x[i] = (b[i] - s) / l.get(i, i);
    }
    x
}

/// Solve `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_upper_t(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l.get(k, i) * x[k]).sum();
        x[i] = (b[i] - s) / l.get(i, i);
    }
    x
}
