use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Result, SpaceError};

/// Cholesky factorization with escalating diagonal jitter: 1e−10·(mean
/// diagonal), ×10 per retry, up to 1e−6, then a conditioning error.
pub fn cholesky_jittered(m: &DMatrix<f64>, what: &str) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = m.clone().cholesky() {
        return Ok((c, 0.0));
    }
    let n = m.nrows();
    let scale = (m.trace() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut rel = 1e-10;
    while rel <= 1e-6 * (1.0 + 1e-9) {
        let mut j = m.clone();
        for i in 0..n {
            j[(i, i)] += rel * scale;
        }
        if let Some(c) = j.cholesky() {
            return Ok((c, rel * scale));
        }
        rel *= 10.0;
    }
    Err(SpaceError::Conditioning(format!(
        "{what} ({n}×{n}) is not positive definite even with 1e-6 relative jitter"
    )))
}

/// Moore–Penrose pseudo-inverse of a symmetric matrix.
pub fn symmetric_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = max * 1e-10 * m.nrows().max(1) as f64;
    let inv: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&v| if v.abs() > tol { 1.0 / v } else { 0.0 })
        .collect();
    let v = &eig.eigenvectors;
    let scaled = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * inv[j]);
    scaled * v.transpose()
}

/// Numerical rank from singular values.
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let max = sv.iter().fold(0.0f64, |a, v| a.max(*v));
    let tol = max * 1e-10 * m.nrows().max(m.ncols()) as f64;
    sv.iter().filter(|&&v| v > tol).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_semidefinite() {
        let v = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let m = &v * v.transpose();
        let (_, j) = cholesky_jittered(&m, "test").unwrap();
        assert!(j > 0.0);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky_jittered(&bad, "test"), Err(SpaceError::Conditioning(_))));
    }

    #[test]
    fn pinv_of_projector() {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let q = symmetric_pinv(&p);
        assert!((&q - &p).abs().max() < 1e-12);
        assert_eq!(rank(&p), 1);
    }
}
