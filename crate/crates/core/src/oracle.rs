//! Dense full-N reference computations.
//!
//! These build the `N x N` covariance explicitly from raw observations and are
//! meant for small problems only: they exist to cross-check the unique-site
//! formulas and to drive the identity report.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::{find_reps, ReplicatedDesign};
use crate::error::{Error, Result};
use crate::kernel::{KernelFamily, KernelSpec};
use crate::likelihood::mean_field;

fn dense_cov(x: &DMatrix<f64>, kernel: &KernelSpec, lambda: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if lambda.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: lambda.len(),
        });
    }
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            let xj: Vec<f64> = x.row(j).iter().copied().collect();
            k[(i, j)] = kernel.corr(&xi, &xj)?;
        }
        k[(i, i)] += lambda[i];
    }
    Ok(k)
}

fn chol(k: DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(k).ok_or(Error::NotPositiveDefinite {
        retries: 0,
        jitter: 0.0,
    })
}

/// Negative concentrated log-likelihood of raw data with per-observation nuggets.
pub fn dense_nll(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    kernel: &KernelSpec,
    lambda: &DVector<f64>,
) -> Result<f64> {
    let n = y.len() as f64;
    let ch = chol(dense_cov(x, kernel, lambda)?)?;
    let nu = y.dot(&ch.solve(y)) / n;
    let log_det = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(0.5 * n * nu.ln() + 0.5 * log_det + 0.5 * n * (1.0 + (2.0 * PI).ln()))
}

/// [`dense_nll`] with a constant nugget.
pub fn dense_hom_nll(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    kernel: &KernelSpec,
    g: f64,
) -> Result<f64> {
    dense_nll(x, y, kernel, &DVector::from_element(y.len(), g))
}

/// Kriging mean and latent variance from the full covariance.
pub fn dense_predict(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    kernel: &KernelSpec,
    lambda: &DVector<f64>,
    xnew: &DMatrix<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ch = chol(dense_cov(x, kernel, lambda)?)?;
    let kinv_y = ch.solve(y);
    let nu = y.dot(&kinv_y) / y.len() as f64;
    let mut mean = Vec::with_capacity(xnew.nrows());
    let mut sd2 = Vec::with_capacity(xnew.nrows());
    for r in 0..xnew.nrows() {
        let xr: Vec<f64> = xnew.row(r).iter().copied().collect();
        let c = DVector::from_iterator(
            x.nrows(),
            (0..x.nrows()).map(|i| {
                let xi: Vec<f64> = x.row(i).iter().copied().collect();
                kernel.corr(&xr, &xi).unwrap_or(f64::NAN)
            }),
        );
        mean.push(c.dot(&kinv_y));
        sd2.push(nu * (1.0 - c.dot(&ch.solve(&c))));
    }
    Ok((mean, sd2))
}

/// A small random replicated problem with raw observations kept.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub design: ReplicatedDesign,
    pub kernel: KernelSpec,
    /// One nugget per unique site.
    pub lambda: DVector<f64>,
    pub xnew: DMatrix<f64>,
}

impl RandomInstance {
    /// Draws `n <= 8` sites in `[0,1]^d`, `d <= 2`, with 1 to 4 replicates each.
    pub fn draw(rng: &mut impl Rng) -> Self {
        let d = rng.random_range(1..=2);
        let n = rng.random_range(1..=8);
        let family = if rng.random_bool(0.5) {
            KernelFamily::SquaredExponential
        } else {
            KernelFamily::Matern52
        };
        let sites: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random::<f64>()).collect())
            .collect();
        let mult: Vec<usize> = (0..n).map(|_| rng.random_range(1..=4)).collect();
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for (s, &a) in sites.iter().zip(&mult) {
            let centre: f64 = rng.sample(StandardNormal);
            for _ in 0..a {
                rows.extend_from_slice(s);
                ys.push(centre + 0.5 * rng.sample::<f64, _>(StandardNormal));
            }
        }
        let x = DMatrix::from_row_slice(ys.len(), d, &rows);
        let y = DVector::from_vec(ys);
        let design = find_reps(&x, &y, 0.0).expect("random instance is well formed");
        let theta = (0..d).map(|_| rng.random_range(0.1..2.0)).collect();
        let kernel = KernelSpec::new(family, theta).expect("positive lengthscales");
        let lambda = DVector::from_fn(design.n_unique(), |_, _| rng.random_range(0.01..1.0));
        let xnew = DMatrix::from_fn(3, d, |_, _| rng.random::<f64>());
        Self {
            x,
            y,
            design,
            kernel,
            lambda,
            xnew,
        }
    }

    /// Site nuggets repeated for each raw row.
    pub fn lambda_full(&self) -> DVector<f64> {
        let rows = self.design.expanded_rows();
        // raw rows are grouped by site in the same order as `design`
        DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.lambda[i]))
    }
}

/// One comparison in the identity report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    pub instance: usize,
    pub unique_n: f64,
    pub full_n: f64,
    pub rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub seed: u64,
    pub instances: usize,
    pub tolerance: f64,
    pub checks: Vec<IdentityCheck>,
}

impl IdentityReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn max_rel_err(&self, prefix: &str) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.name.starts_with(prefix))
            .map(|c| c.rel_err)
            .fold(0.0, f64::max)
    }
}

/// `|a - b|` relative to `scale`, which should bound the magnitude of the
/// terms that were combined to produce either side.
pub fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.abs().max(a.abs()).max(b.abs()).max(f64::MIN_POSITIVE)
    }
}

/// Compares unique-site and full-N computations on random instances.
pub fn identity_suite(seed: u64, instances: usize, tolerance: f64) -> Result<IdentityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for inst in 0..instances {
        let ri = RandomInstance::draw(&mut rng);
        let d = &ri.design;
        let a = d.mult_f64();
        let lam_full = ri.lambda_full();
        let mut push = |name: &str, u: f64, f: f64, scale: f64| {
            let e = rel_err(u, f, scale);
            checks.push(IdentityCheck {
                name: name.into(),
                instance: inst,
                unique_n: u,
                full_n: f,
                rel_err: e,
                pass: e <= tolerance,
            });
        };

        let k_full = dense_cov(&ri.x, &ri.kernel, &lam_full)?;
        let ch_full = chol(k_full)?;
        let mut ups = ri.kernel.corr_matrix_sym(d.x0())?;
        for i in 0..d.n_unique() {
            ups[(i, i)] += ri.lambda[i] / a[i];
        }
        let ch_ups = chol(ups)?;

        let y_lam_y: f64 = (0..ri.y.len())
            .map(|r| ri.y[r] * ri.y[r] / lam_full[r])
            .sum();
        let ybar_a_lam_ybar: f64 = (0..d.n_unique())
            .map(|i| a[i] * d.z0()[i] * d.z0()[i] / ri.lambda[i])
            .sum();
        let ups_quad = d.z0().dot(&ch_ups.solve(d.z0()));
        let full_quad = ri.y.dot(&ch_full.solve(&ri.y));
        let lhs = y_lam_y - ybar_a_lam_ybar + ups_quad;
        push("quad_form", lhs, full_quad, y_lam_y.max(ybar_a_lam_ybar));

        let rep: f64 = (0..d.n_unique())
            .map(|i| a[i] * d.s2()[i] / ri.lambda[i])
            .sum();
        let big_n = ri.y.len() as f64;
        push(
            "variance_correction",
            rep / big_n,
            (y_lam_y - ybar_a_lam_ybar) / big_n,
            y_lam_y / big_n,
        );

        let ld_full = 2.0 * ch_full.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let ld_ups = 2.0 * ch_ups.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let extra: f64 = (0..d.n_unique())
            .map(|i| (a[i] - 1.0) * ri.lambda[i].ln() + a[i].ln())
            .sum();
        push(
            "log_det",
            ld_ups + extra,
            ld_full,
            ld_ups.abs() + extra.abs(),
        );

        let mf = mean_field(&ri.kernel, &ri.lambda, d, false)?;
        push(
            "nll",
            mf.nll,
            dense_nll(&ri.x, &ri.y, &ri.kernel, &lam_full)?,
            0.0,
        );

        let (dm, dv) = dense_predict(&ri.x, &ri.y, &ri.kernel, &lam_full, &ri.xnew)?;
        let kx = ri.kernel.corr_matrix(&ri.xnew, d.x0())?;
        for j in 0..ri.xnew.nrows() {
            let c = kx.row(j).transpose();
            let um = c.dot(&mf.alpha);
            let uv = mf.nu_hat * (1.0 - c.dot(&mf.factor.solve(&c)));
            push("pred_mean", um, dm[j], 0.0);
            // the latent variance is a difference of terms of size nu_hat
            push("pred_var", uv, dv[j], mf.nu_hat);
        }
    }
    Ok(IdentityReport {
        seed,
        instances,
        tolerance,
        checks,
    })
}
