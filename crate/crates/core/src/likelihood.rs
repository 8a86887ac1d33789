//! Concentrated Gaussian log-likelihood on unique sites.
//!
//! With per-site nuggets `lambda_i` the full covariance `nu (C_N + Lambda_N)`
//! collapses to `Upsilon = C_n + A^-1 Lambda_n` on the `n` unique inputs, and
//! the raw responses enter only through site means and variances.

use std::f64::consts::PI;

use nalgebra::DVector;

use crate::design::ReplicatedDesign;
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::linalg::{trace_of_product, SpdFactor};

/// Likelihood value, plug-in scale and (optionally) gradients at one parameter.
#[derive(Debug, Clone)]
pub struct MeanFieldEval {
    /// Negative concentrated log-likelihood.
    pub nll: f64,
    /// `N nu_hat = sum a_i s_i^2 / lambda_i + ybar' Upsilon^-1 ybar`.
    pub psi: f64,
    pub nu_hat: f64,
    pub factor: SpdFactor,
    /// `Upsilon^-1 ybar`.
    pub alpha: DVector<f64>,
    /// Derivatives with respect to each lengthscale (empty without gradients).
    pub grad_theta: Vec<f64>,
    /// Derivatives with respect to each `lambda_i` (empty without gradients).
    pub grad_lambda: DVector<f64>,
}

/// Evaluates the negative log-likelihood for nuggets `lambda`.
pub fn mean_field(
    kernel: &KernelSpec,
    lambda: &DVector<f64>,
    design: &ReplicatedDesign,
    with_grad: bool,
) -> Result<MeanFieldEval> {
    let n = design.n_unique();
    if lambda.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: lambda.len(),
        });
    }
    if lambda.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Error::InvalidParameter(
            "nuggets must be positive and finite".into(),
        ));
    }
    let x0 = design.x0();
    let (c, dcs) = if with_grad {
        kernel.corr_matrix_with_grads(x0)?
    } else {
        (kernel.corr_matrix_sym(x0)?, Vec::new())
    };
    let a = design.mult_f64();
    let mut ups = c;
    for i in 0..n {
        ups[(i, i)] += lambda[i] / a[i];
    }
    let factor = SpdFactor::new(ups)?;
    let z0 = design.z0();
    let alpha = factor.solve(z0);
    let big_n = design.n_total() as f64;
    let s2 = design.s2();
    let rep_term: f64 = (0..n).map(|i| a[i] * s2[i] / lambda[i]).sum();
    let psi = rep_term + z0.dot(&alpha);
    let nu_hat = psi / big_n;
    let log_det_rest: f64 = (0..n)
        .map(|i| (a[i] - 1.0) * lambda[i].ln() + a[i].ln())
        .sum();
    let nll = 0.5 * big_n * nu_hat.ln()
        + 0.5 * log_det_rest
        + 0.5 * factor.log_det()
        + 0.5 * big_n * (1.0 + (2.0 * PI).ln());
    if !nll.is_finite() {
        return Err(Error::NonFinite("log-likelihood"));
    }

    let (grad_theta, grad_lambda) = if with_grad {
        let ups_inv = factor.inverse();
        let grad_theta = dcs
            .iter()
            .map(|dc| {
                -0.5 * big_n * alpha.dot(&(dc * &alpha)) / psi
                    + 0.5 * trace_of_product(&ups_inv, dc)
            })
            .collect();
        let grad_lambda = DVector::from_fn(n, |i, _| {
            let l = lambda[i];
            0.5 * big_n * (-a[i] * s2[i] / (l * l) - alpha[i] * alpha[i] / a[i]) / psi
                + 0.5 * (a[i] - 1.0) / l
                + 0.5 * ups_inv[(i, i)] / a[i]
        });
        (grad_theta, grad_lambda)
    } else {
        (Vec::new(), DVector::zeros(0))
    };

    Ok(MeanFieldEval {
        nll,
        psi,
        nu_hat,
        factor,
        alpha,
        grad_theta,
        grad_lambda,
    })
}
