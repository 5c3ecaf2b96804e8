//! Dense Gaussian algebra helpers built on nalgebra.
//!
//! Every factorization goes through [`robust_cholesky`], which adds a diagonal
//! jitter relative to a caller-supplied scale and escalates it tenfold on
//! failure, from `1e-8·scale` up to `1e-2·scale`. A clean factorization with
//! no tiny pivots is used as is.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub const JITTER_START: f64 = 1e-8;
pub const JITTER_MAX: f64 = 1e-2;
const PIVOT_FLOOR: f64 = 1e-10;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A Cholesky factor together with the jitter that was needed to obtain it.
#[derive(Clone, Debug)]
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// log |A| of the (jittered) matrix.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// xᵀ A⁻¹ x
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        let half = self
            .chol
            .l_dirty()
            .solve_lower_triangular(x)
            .expect("cholesky factor has a non-zero diagonal");
        half.norm_squared()
    }
}

/// Cholesky with escalating jitter. `scale` sets the magnitude the jitter is
/// relative to (usually σ_f² or the mean diagonal).
pub fn robust_cholesky(a: &DMatrix<f64>, scale: f64, context: &'static str) -> Result<Factor> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "{context}: expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { context, jitter: 0.0 });
    }
    let scale = if scale.is_finite() && scale > 0.0 { scale } else { 1.0 };
    // exact factorization first, accepted only if no pivot is negligibly small
    if let Some(chol) = Cholesky::new(symmetrize(a)) {
        let l = chol.l_dirty();
        if (0..l.nrows()).all(|i| l[(i, i)] * l[(i, i)] > PIVOT_FLOOR * scale) {
            return Ok(Factor { chol, jitter: 0.0 });
        }
    }
    let mut rel = JITTER_START;
    loop {
        let jitter = rel * scale;
        let mut m = symmetrize(a);
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(Factor { chol, jitter });
        }
        rel *= 10.0;
        if rel > JITTER_MAX * (1.0 + 1e-9) {
            return Err(Error::NotPositiveDefinite { context, jitter });
        }
    }
}

/// Cholesky where the jitter scale is the mean absolute diagonal.
pub fn cholesky_auto(a: &DMatrix<f64>, context: &'static str) -> Result<Factor> {
    robust_cholesky(a, mean_diag(a), context)
}

pub fn mean_diag(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows().min(a.ncols());
    if n == 0 {
        return 1.0;
    }
    (0..n).map(|i| a[(i, i)].abs()).sum::<f64>() / n as f64
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// log N(x | mean, cov) evaluated through a factor of `cov`.
pub fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &Factor) -> f64 {
    let d = x - mean;
    -0.5 * (cov.quad_form(&d) + cov.log_det() + x.len() as f64 * LN_2PI)
}

/// tr(A⁻¹ B) via a Cholesky factor of A.
pub fn trace_solve(a: &Factor, b: &DMatrix<f64>) -> f64 {
    a.solve(b).trace()
}

/// Entropy of a multivariate normal with the given covariance factor.
pub fn gaussian_entropy(cov: &Factor) -> f64 {
    0.5 * (cov.dim() as f64 * (1.0 + LN_2PI) + cov.log_det())
}

pub fn outer(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    a * b.transpose()
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    symmetrize(a)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_det_and_quad_form_match_dense() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let f = cholesky_auto(&a, "test").unwrap();
        let det = a.determinant();
        assert!((f.log_det() - det.ln()).abs() < 1e-7);
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let dense = (x.transpose() * a.clone().try_inverse().unwrap() * &x)[(0, 0)];
        assert!((f.quad_form(&x) - dense).abs() < 1e-7);
    }

    #[test]
    fn jitter_rescues_singular_psd() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = outer(&v, &v);
        let f = robust_cholesky(&a, 1.0, "rank one").unwrap();
        assert!(f.jitter > 0.0);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            robust_cholesky(&a, 1.0, "indefinite"),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }
}
