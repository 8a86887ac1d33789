//! Cholesky factorization with a bounded jitter fallback.

use faer::linalg::solvers::{DenseSolveCore, Llt, Solve};
use faer::{Mat, MatRef, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const JITTER_BASE: f64 = 1e-8;
const JITTER_RETRIES: usize = 6;

fn view(m: &DMatrix<f64>) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(m.as_slice(), m.nrows(), m.ncols())
}

fn to_dmatrix(m: &Mat<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for j in 0..m.ncols() {
        out.column_mut(j).copy_from_slice(m.col_as_slice(j));
    }
    out
}

/// Cholesky factor of a symmetric positive definite matrix.
///
/// When the plain factorization fails, `1e-8 * mean(diag)` is added to the
/// diagonal and doubled on each retry, up to six times.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    llt: Llt<f64>,
    jitter: f64,
}

impl SpdFactor {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance matrix"));
        }
        if !m.is_square() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        if let Ok(llt) = view(&m).llt(Side::Lower) {
            return Ok(Self { llt, jitter: 0.0 });
        }
        let n = m.nrows().max(1);
        let mean_diag = m.diagonal().iter().sum::<f64>() / n as f64;
        let mut jitter = JITTER_BASE * mean_diag.abs().max(f64::MIN_POSITIVE);
        let mut mj = m;
        let mut added = 0.0;
        for _ in 0..JITTER_RETRIES {
            for i in 0..mj.nrows() {
                mj[(i, i)] += jitter - added;
            }
            added = jitter;
            if let Ok(llt) = view(&mj).llt(Side::Lower) {
                return Ok(Self { llt, jitter });
            }
            jitter *= 2.0;
        }
        Err(Error::NotPositiveDefinite {
            retries: JITTER_RETRIES,
            jitter: jitter / 2.0,
        })
    }

    /// Diagonal jitter that was needed (0 when none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.llt.L();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let x = self
            .llt
            .solve(MatRef::from_column_major_slice(b.as_slice(), b.len(), 1));
        DVector::from_column_slice(x.col_as_slice(0))
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        to_dmatrix(&self.llt.solve(view(b)))
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        to_dmatrix(&self.llt.inverse())
    }

    /// `L z` for the lower Cholesky factor `L`.
    pub fn lower_mul(&self, z: &DVector<f64>) -> DVector<f64> {
        let l = self.llt.L();
        DVector::from_fn(z.len(), |i, _| (0..=i).map(|k| l[(i, k)] * z[k]).sum())
    }

    /// `b' M^-1 b` through one triangular solve.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        let l = self.llt.L();
        let n = b.len();
        let mut z = b.clone();
        for i in 0..n {
            let mut v = z[i];
            for k in 0..i {
                v -= l[(i, k)] * z[k];
            }
            z[i] = v / l[(i, i)];
        }
        z.norm_squared()
    }
}

/// `tr(A B)` for symmetric `A`, `B` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn log_det_and_solve() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let f = SpdFactor::new(m.clone()).unwrap();
        assert_relative_eq!(f.log_det(), 11f64.ln(), max_relative = 1e-14);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let x = f.solve(&b);
        assert_relative_eq!((&m * &x - &b).norm(), 0.0, epsilon = 1e-14);
        assert_relative_eq!(f.quad_form(&b), b.dot(&x), max_relative = 1e-14);
        assert_eq!(f.jitter(), 0.0);
    }

    #[test]
    fn singular_matrix_gets_jitter() {
        let m = DMatrix::from_element(3, 3, 1.0);
        let f = SpdFactor::new(m).unwrap();
        assert!(f.jitter() > 0.0 && f.jitter() < 1e-6);
    }

    #[test]
    fn indefinite_matrix_fails() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            SpdFactor::new(m),
            Err(Error::NotPositiveDefinite { retries: 6, .. })
        ));
    }
}
