//! Thin Cholesky wrapper used everywhere a covariance matrix is factored.
//!
//! Every application of an inverse covariance in this crate goes through
//! triangular solves against a factor held here; explicit inverses are only
//! formed where a full matrix is genuinely needed (natural-gradient
//! precisions), and then via the factor.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `L` of a symmetric positive definite
/// matrix `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    l: DMatrix<f64>,
}

impl CholFactor {
    /// Factors `a`. Fails with a diagnostic naming `context` when the matrix
    /// is not positive definite.
    pub fn new(a: DMatrix<f64>, context: &str) -> Result<Self> {
        let dim = a.nrows();
        let min_diag = a.diagonal().min();
        let max_diag = a.diagonal().max();
        match Cholesky::<f64, Dyn>::new(a) {
            Some(c) => Ok(CholFactor { l: c.unpack() }),
            None => Err(Error::numerical(format!(
                "Cholesky factorization of {context} ({dim}x{dim}) failed; \
                 diagonal range [{min_diag:.3e}, {max_diag:.3e}]. \
                 Consider increasing the jitter or checking for duplicate rows."
            ))),
        }
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// The lower factor `L`.
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Forward substitution: `L⁻¹ b`.
    pub fn forward_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.l
            .solve_lower_triangular(b)
            .expect("Cholesky factor has positive diagonal")
    }

    /// Forward substitution on a matrix right-hand side: `L⁻¹ B`.
    pub fn forward_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.l
            .solve_lower_triangular(b)
            .expect("Cholesky factor has positive diagonal")
    }

    /// Full solve `A⁻¹ b` via forward then backward substitution.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self.forward_vec(b);
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has positive diagonal")
    }

    /// Full solve `A⁻¹ B`.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.forward_mat(b);
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has positive diagonal")
    }

    /// Explicit inverse `A⁻¹ = L⁻ᵀ L⁻¹`, symmetrized against round-off.
    pub fn inverse(&self) -> DMatrix<f64> {
        let eye = DMatrix::identity(self.dim(), self.dim());
        let linv = self.forward_mat(&eye);
        symmetrize(&linv.tr_mul(&linv))
    }

    /// Reconstructs `A = L Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Sum of squared entries (squared Frobenius norm).
pub fn frob_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd3() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0])
    }

    #[test]
    fn factor_reconstructs() {
        let a = spd3();
        let c = CholFactor::new(a.clone(), "test").unwrap();
        let r = c.reconstruct();
        assert!((r - a).abs().max() < 1e-12);
    }

    #[test]
    fn solve_matches_direct() {
        let a = spd3();
        let b = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        let c = CholFactor::new(a.clone(), "test").unwrap();
        let x = c.solve_vec(&b);
        assert!((a * x - b).abs().max() < 1e-12);
    }

    #[test]
    fn logdet_matches_lu() {
        let a = spd3();
        let c = CholFactor::new(a.clone(), "test").unwrap();
        let det = a.lu().determinant();
        assert!((c.logdet() - det.ln()).abs() < 1e-12);
    }

    #[test]
    fn inverse_is_symmetric_and_correct() {
        let a = spd3();
        let c = CholFactor::new(a.clone(), "test").unwrap();
        let inv = c.inverse();
        assert!((&inv - inv.transpose()).abs().max() == 0.0);
        assert!((a * inv - DMatrix::identity(3, 3)).abs().max() < 1e-12);
    }

    #[test]
    fn non_pd_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = CholFactor::new(a, "bad matrix").unwrap_err();
        assert!(err.to_string().contains("bad matrix"));
    }
}
