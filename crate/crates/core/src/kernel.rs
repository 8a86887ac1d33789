//! Stationary correlation functions.
//!
//! Both families are separable products over input dimensions. The squared
//! exponential divides the *squared* distance by the lengthscale,
//! `exp(-(x - x')^2 / theta)`, while the Matérn 5/2 divides the absolute
//! distance, `r = |x - x'| / theta`. A Gaussian kernel written as
//! `exp(-(x - x')^2 / (2 ell^2))` corresponds to `theta = 2 ell^2` here.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
    Matern52,
}

impl KernelFamily {
    /// One-dimensional correlation at signed distance `diff`.
    #[inline]
    fn corr_1d(self, diff: f64, theta: f64) -> f64 {
        match self {
            KernelFamily::SquaredExponential => (-diff * diff / theta).exp(),
            KernelFamily::Matern52 => {
                let r = diff.abs() / theta;
                (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * (-SQRT5 * r).exp()
            }
        }
    }

    /// Derivative of the one-dimensional correlation with respect to `theta`.
    #[inline]
    fn dcorr_1d(self, diff: f64, theta: f64) -> f64 {
        match self {
            KernelFamily::SquaredExponential => {
                let d2 = diff * diff;
                (-d2 / theta).exp() * d2 / (theta * theta)
            }
            KernelFamily::Matern52 => {
                let r = diff.abs() / theta;
                5.0 / 3.0 * r * r * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp() / theta
            }
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sqexp" | "gaussian" | "squared_exponential" | "se" => {
                Ok(KernelFamily::SquaredExponential)
            }
            "matern52" | "matern5_2" | "matern" => Ok(KernelFamily::Matern52),
            other => Err(Error::InvalidParameter(format!("unknown kernel `{other}`"))),
        }
    }
}

/// A correlation family together with one lengthscale per input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    family: KernelFamily,
    lengthscales: Vec<f64>,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, lengthscales: Vec<f64>) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(&bad) = lengthscales.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::InvalidLengthscale(bad));
        }
        Ok(Self {
            family,
            lengthscales,
        })
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Same family, new lengthscales.
    pub fn with_lengthscales(&self, lengthscales: Vec<f64>) -> Result<Self> {
        if lengthscales.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: lengthscales.len(),
            });
        }
        Self::new(self.family, lengthscales)
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found,
            });
        }
        Ok(())
    }

    #[inline]
    fn corr_unchecked<'a>(
        &self,
        x: impl Iterator<Item = &'a f64>,
        xp: impl Iterator<Item = &'a f64>,
    ) -> f64 {
        match self.family {
            // a single exponential keeps the product from underflowing early
            KernelFamily::SquaredExponential => {
                let s: f64 = x
                    .zip(xp)
                    .zip(&self.lengthscales)
                    .map(|((a, b), t)| (a - b) * (a - b) / t)
                    .sum();
                (-s).exp()
            }
            KernelFamily::Matern52 => x
                .zip(xp)
                .zip(&self.lengthscales)
                .map(|((a, b), &t)| self.family.corr_1d(a - b, t))
                .product(),
        }
    }

    /// Correlation `c(x - xp)` between two points.
    pub fn corr(&self, x: &[f64], xp: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        self.check_dim(xp.len())?;
        Ok(self.corr_unchecked(x.iter(), xp.iter()))
    }

    /// Cross-correlation matrix between the rows of `x1` and the rows of `x2`.
    pub fn corr_matrix(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(x1.ncols())?;
        self.check_dim(x2.ncols())?;
        Ok(DMatrix::from_fn(x1.nrows(), x2.nrows(), |i, j| {
            self.corr_unchecked(x1.row(i).iter(), x2.row(j).iter())
        }))
    }

    /// Symmetric correlation matrix of the rows of `x` (unit diagonal).
    pub fn corr_matrix_sym(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(x.ncols())?;
        let n = x.nrows();
        let mut c = DMatrix::identity(n, n);
        for j in 0..n {
            for i in (j + 1)..n {
                let v = self.corr_unchecked(x.row(i).iter(), x.row(j).iter());
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        Ok(c)
    }

    /// Elementwise derivative of `corr_matrix_sym(x)` with respect to lengthscale `k`.
    pub fn corr_matrix_dtheta(&self, x: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
        self.check_dim(x.ncols())?;
        if k >= self.dim() {
            return Err(Error::InvalidParameter(format!(
                "lengthscale index {k} out of range for dimension {}",
                self.dim()
            )));
        }
        let c = self.corr_matrix_sym(x)?;
        Ok(self.dtheta_from_corr(x, &c, k))
    }

    /// Correlation matrix and all lengthscale derivatives in one pass.
    pub fn corr_matrix_with_grads(
        &self,
        x: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        let c = self.corr_matrix_sym(x)?;
        let grads = (0..self.dim())
            .map(|k| self.dtheta_from_corr(x, &c, k))
            .collect();
        Ok((c, grads))
    }

    fn dtheta_from_corr(&self, x: &DMatrix<f64>, c: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
        let n = x.nrows();
        let theta = self.lengthscales[k];
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in (j + 1)..n {
                let diff = x[(i, k)] - x[(j, k)];
                let v = match self.family {
                    KernelFamily::SquaredExponential => c[(i, j)] * diff * diff / (theta * theta),
                    KernelFamily::Matern52 => {
                        // product over the other dimensions times the 1-d derivative
                        let others: f64 = (0..self.dim())
                            .filter(|&m| m != k)
                            .map(|m| {
                                self.family
                                    .corr_1d(x[(i, m)] - x[(j, m)], self.lengthscales[m])
                            })
                            .product();
                        others * self.family.dcorr_1d(diff, theta)
                    }
                };
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }
}
