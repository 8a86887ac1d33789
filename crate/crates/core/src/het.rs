//! Heteroskedastic GP with GP-smoothed latent log-variances.
//!
//! Per-site latent values `delta` are smoothed by a second, zero-mean GP with
//! correlation `C_g` (lengthscales `phi`) and nugget `g`:
//! `log Lambda = C_g (C_g + g A^-1)^-1 delta`. The mean-field likelihood then
//! uses `lambda_i = exp(log Lambda_i)` as site nuggets, and the latent GP adds
//! its own concentrated likelihood as a penalty.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{DesignDoc, ReplicatedDesign};
use crate::error::{Error, Result};
use crate::hom::{
    check_header, default_bounds, hom_fit, FitInfo, HomDoc, HomFitOptions, HomModel, Prediction,
    MODEL_FORMAT, MODEL_VERSION,
};
use crate::kernel::{KernelFamily, KernelSpec};
use crate::likelihood::{mean_field, MeanFieldEval};
use crate::linalg::{trace_of_product, SpdFactor};
use crate::optim::{minimize, OptProblem, OptStatus};

/// Fixed diagonal term added to the latent correlation matrix.
pub const LATENT_NUGGET: f64 = 1.490_116_119_384_765_6e-8;

/// Lower end of the latent log-variance initialization.
const LOG_EPS: f64 = -36.043_653_389_117_15;

/// How the noise lengthscales relate to the mean lengthscales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiMode {
    /// `phi` is free but bounded below by the priming fit's `theta`.
    LowerBound,
    /// `phi = k theta` with a scalar `k >= 1`.
    Proportional,
    /// `phi` has the same box as `theta`.
    Free,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HetSettings {
    pub family: KernelFamily,
    pub phi_mode: PhiMode,
    pub max_iter: usize,
    pub tol_f: f64,
    pub tol_g: f64,
    /// Box for `theta`; defaults to the homoskedastic default box.
    pub theta_lower: Option<Vec<f64>>,
    pub theta_upper: Option<Vec<f64>>,
    pub g_upper: f64,
    /// Half-width added around the initial latent values to form their box.
    pub delta_margin: f64,
    /// Compare against the homoskedastic fit and return it when it is better.
    pub allow_fallback: bool,
}

impl Default for HetSettings {
    fn default() -> Self {
        Self {
            family: KernelFamily::SquaredExponential,
            phi_mode: PhiMode::LowerBound,
            max_iter: 100,
            tol_f: 1e-8,
            tol_g: 1e-5,
            theta_lower: None,
            theta_upper: None,
            g_upper: 1.0,
            delta_margin: 5.0,
            allow_fallback: true,
        }
    }
}

impl HetSettings {
    pub fn new(family: KernelFamily) -> Self {
        Self {
            family,
            ..Self::default()
        }
    }
}

fn a_inv(design: &ReplicatedDesign) -> DVector<f64> {
    DVector::from_iterator(
        design.n_unique(),
        design.mult().iter().map(|&a| 1.0 / a as f64),
    )
}

/// `C_g + eps I + g A^-1`, and `C_g + eps I` alone.
fn latent_matrices(
    kernel_noise: &KernelSpec,
    g: f64,
    design: &ReplicatedDesign,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut c = kernel_noise.corr_matrix_sym(design.x0())?;
    let ainv = a_inv(design);
    for i in 0..c.nrows() {
        c[(i, i)] += LATENT_NUGGET;
    }
    let mut ups = c.clone();
    for i in 0..ups.nrows() {
        ups[(i, i)] += g * ainv[i];
    }
    Ok((c, ups))
}

fn check_latent_args(g: f64, delta: &DVector<f64>, design: &ReplicatedDesign) -> Result<()> {
    if !(g >= 0.0 && g.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "smoothing nugget must be >= 0, got {g}"
        )));
    }
    if delta.len() != design.n_unique() {
        return Err(Error::DimensionMismatch {
            expected: design.n_unique(),
            found: delta.len(),
        });
    }
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent values"));
    }
    Ok(())
}

/// Smoothed log-nuggets `C_g (C_g + g A^-1)^-1 delta`.
pub fn smooth_latents(
    delta: &DVector<f64>,
    kernel_noise: &KernelSpec,
    g: f64,
    design: &ReplicatedDesign,
) -> Result<DVector<f64>> {
    check_latent_args(g, delta, design)?;
    let (_, ups) = latent_matrices(kernel_noise, g, design)?;
    let beta = SpdFactor::new(ups)?.solve(delta);
    Ok(delta - (beta.component_mul(&a_inv(design)) * g))
}

/// Objective pieces and optional gradient at one parameter.
#[derive(Debug, Clone)]
pub struct HetEval {
    pub nll: f64,
    /// Mean-field part alone (negative log-likelihood of the data).
    pub mean_field: MeanFieldEval,
    pub log_lambda: DVector<f64>,
    pub nu_g: f64,
    pub latent_factor: SpdFactor,
    /// `(C_g + g A^-1)^-1 delta`.
    pub beta: DVector<f64>,
    pub grad: Option<HetGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HetGrad {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub g: f64,
    pub delta: DVector<f64>,
}

impl HetGrad {
    /// `[theta, phi, g, delta]` as one vector.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.theta.clone();
        v.extend_from_slice(&self.phi);
        v.push(self.g);
        v.extend(self.delta.iter());
        v
    }
}

pub fn het_eval(
    kernel_mean: &KernelSpec,
    kernel_noise: &KernelSpec,
    g: f64,
    delta: &DVector<f64>,
    design: &ReplicatedDesign,
    with_grad: bool,
) -> Result<HetEval> {
    check_latent_args(g, delta, design)?;
    let n = design.n_unique();
    let nf = n as f64;
    let ainv = a_inv(design);
    let (_, ups_g) = latent_matrices(kernel_noise, g, design)?;
    let latent_factor = SpdFactor::new(ups_g)?;
    let beta = latent_factor.solve(delta);
    let log_lambda = delta - beta.component_mul(&ainv) * g;
    let lambda = log_lambda.map(f64::exp);
    let mf = mean_field(kernel_mean, &lambda, design, with_grad)?;
    let nu_g = delta.dot(&beta) / nf;
    let penalty =
        0.5 * nf * nu_g.ln() + 0.5 * latent_factor.log_det() + 0.5 * nf * (1.0 + (2.0 * PI).ln());
    let nll = mf.nll + penalty;
    if !nll.is_finite() {
        return Err(Error::NonFinite("joint log-likelihood"));
    }

    let grad = if with_grad {
        let ups_inv = latent_factor.inverse();
        let q = mf.grad_lambda.component_mul(&lambda);
        let ainv_q = q.component_mul(&ainv);
        let d_delta = &q - (&ups_inv * &ainv_q) * g + &beta / nu_g;
        // u = g Upsilon_g^-1 A^-1 q, so q' g A^-1 Upsilon_g^-1 M beta = u' M beta
        let u = &ups_inv * &ainv_q * g;
        let dcs = kernel_noise.corr_matrix_with_grads(design.x0())?.1;
        let phi = dcs
            .iter()
            .map(|dc| {
                let dcb = dc * &beta;
                u.dot(&dcb) - beta.dot(&dcb) / (2.0 * nu_g) + 0.5 * trace_of_product(&ups_inv, dc)
            })
            .collect();
        let ainv_beta = beta.component_mul(&ainv);
        let tr_ainv: f64 = (0..n).map(|i| ups_inv[(i, i)] * ainv[i]).sum();
        let d_g = -q.dot(&ainv_beta) + u.dot(&ainv_beta) - beta.dot(&ainv_beta) / (2.0 * nu_g)
            + 0.5 * tr_ainv;
        Some(HetGrad {
            theta: mf.grad_theta.clone(),
            phi,
            g: d_g,
            delta: d_delta,
        })
    } else {
        None
    };

    Ok(HetEval {
        nll,
        mean_field: mf,
        log_lambda,
        nu_g,
        latent_factor,
        beta,
        grad,
    })
}

/// Negative joint concentrated log-likelihood.
pub fn het_njll(
    kernel_mean: &KernelSpec,
    kernel_noise: &KernelSpec,
    g: f64,
    delta: &DVector<f64>,
    design: &ReplicatedDesign,
) -> Result<f64> {
    Ok(het_eval(kernel_mean, kernel_noise, g, delta, design, false)?.nll)
}

/// Gradient of [`het_njll`] ordered as `[theta, phi, g, delta]`.
pub fn het_njll_grad(
    kernel_mean: &KernelSpec,
    kernel_noise: &KernelSpec,
    g: f64,
    delta: &DVector<f64>,
    design: &ReplicatedDesign,
) -> Result<Vec<f64>> {
    let ev = het_eval(kernel_mean, kernel_noise, g, delta, design, true)?;
    Ok(ev.grad.expect("gradient requested").to_vec())
}

/// Point in the heteroskedastic parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HetParams {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub g: f64,
    pub delta: Vec<f64>,
}

/// Output of the priming stage: a starting point, the optimizer box and the
/// homoskedastic fit used both for priming and for the fallback comparison.
#[derive(Debug, Clone)]
pub struct HetStart {
    pub params: HetParams,
    pub hom: HomModel,
    /// Box in optimizer coordinates (see [`HetStart::pack`]).
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub phi_mode: PhiMode,
}

impl HetStart {
    fn d(&self) -> usize {
        self.params.theta.len()
    }

    /// Optimizer coordinates: `[theta, phi | k, g, delta]`.
    pub fn pack(&self, p: &HetParams) -> Vec<f64> {
        let mut v = p.theta.clone();
        match self.phi_mode {
            PhiMode::Proportional => {
                let k = p.phi.iter().zip(&p.theta).map(|(f, t)| f / t).sum::<f64>()
                    / p.theta.len() as f64;
                v.push(k);
            }
            _ => v.extend_from_slice(&p.phi),
        }
        v.push(p.g);
        v.extend_from_slice(&p.delta);
        v
    }

    pub fn unpack(&self, v: &[f64]) -> HetParams {
        let d = self.d();
        let theta = v[..d].to_vec();
        let (phi, rest) = match self.phi_mode {
            PhiMode::Proportional => (theta.iter().map(|t| t * v[d]).collect(), &v[d + 1..]),
            _ => (v[d..2 * d].to_vec(), &v[2 * d..]),
        };
        HetParams {
            theta,
            phi,
            g: rest[0],
            delta: rest[1..].to_vec(),
        }
    }

    /// Converts a `[theta, phi, g, delta]` gradient to optimizer coordinates.
    fn pack_grad(&self, p: &HetParams, gr: &HetGrad) -> Vec<f64> {
        let mut v = gr.theta.clone();
        match self.phi_mode {
            PhiMode::Proportional => {
                let k = p.phi[0] / p.theta[0];
                for (j, gt) in v.iter_mut().enumerate() {
                    *gt += k * gr.phi[j];
                }
                v.push(gr.phi.iter().zip(&p.theta).map(|(a, b)| a * b).sum());
            }
            _ => v.extend_from_slice(&gr.phi),
        }
        v.push(gr.g);
        v.extend(gr.delta.iter());
        v
    }
}

/// `log((s_i^2 + (ybar_i - mu_i)^2) / nu)`, floored at `log(eps)`.
fn residual_latents(design: &ReplicatedDesign, mu: &[f64], nu: f64) -> Vec<f64> {
    (0..design.n_unique())
        .map(|i| {
            let r = design.z0()[i] - mu[i];
            ((design.s2()[i] + r * r) / nu).ln().max(LOG_EPS)
        })
        .collect()
}

/// Priming stage: homoskedastic fit, residual-based latent values, and a
/// homoskedastic fit to those latents for the noise lengthscales and nugget.
pub fn het_init(design: &ReplicatedDesign, settings: &HetSettings) -> Result<HetStart> {
    let d = design.dim();
    let family = settings.family;
    let (mut lo, mut hi) = default_bounds(design, family);
    if let Some(l) = &settings.theta_lower {
        lo[..d].copy_from_slice(check_len(l, d)?);
    }
    if let Some(u) = &settings.theta_upper {
        hi[..d].copy_from_slice(check_len(u, d)?);
    }
    let hom_opts = HomFitOptions {
        family,
        lower: Some(lo.clone()),
        upper: Some(hi.clone()),
        max_iter: settings.max_iter,
        ..HomFitOptions::default()
    };
    let hom = hom_fit(design, &hom_opts)?;
    let mu = hom.predict(design.x0())?.mean;
    let delta0 = residual_latents(design, &mu, hom.nu_hat());

    let latent_design =
        ReplicatedDesign::unreplicated(design.x0().clone(), DVector::from_vec(delta0.clone()))?;
    let noise_fit = hom_fit(
        &latent_design,
        &HomFitOptions {
            family,
            max_iter: settings.max_iter,
            ..HomFitOptions::default()
        },
    );
    let theta0 = hom.theta().to_vec();
    let (phi_fit, g0, smoothed) = match noise_fit {
        Ok(m) => {
            let sm = m.predict(design.x0())?.mean;
            (m.theta().to_vec(), m.g(), sm)
        }
        // constant latents (e.g. all at the floor) leave nothing to fit
        Err(_) => (theta0.clone(), 1.0, delta0.clone()),
    };

    let phi_hi: Vec<f64> = hi[..d].to_vec();
    let (phi0, phi_lo) = match settings.phi_mode {
        PhiMode::LowerBound => {
            let lo_b: Vec<f64> = theta0
                .iter()
                .zip(&lo[..d])
                .zip(&phi_hi)
                .map(|((t, l), u)| t.max(*l).min(0.5 * u))
                .collect();
            let p0 = phi_fit.iter().zip(&lo_b).map(|(p, l)| p.max(*l)).collect();
            (p0, lo_b)
        }
        PhiMode::Free | PhiMode::Proportional => (phi_fit.clone(), lo[..d].to_vec()),
    };
    let (dmin, dmax) = delta0
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let g_upper = settings.g_upper;
    let g0 = g0.min(0.5 * g_upper);

    let mut lower = lo[..d].to_vec();
    let mut upper = hi[..d].to_vec();
    let phi0 = match settings.phi_mode {
        PhiMode::Proportional => {
            lower.push(1.0);
            upper.push(100.0);
            let k = (phi_fit.iter().zip(&theta0).map(|(p, t)| p / t).sum::<f64>() / d as f64)
                .clamp(1.0, 100.0);
            theta0.iter().map(|t| t * k).collect()
        }
        _ => {
            lower.extend_from_slice(&phi_lo);
            upper.extend_from_slice(&phi_hi);
            phi0
        }
    };
    lower.push(0.0);
    upper.push(g_upper);
    lower.extend(std::iter::repeat_n(
        dmin - settings.delta_margin,
        delta0.len(),
    ));
    upper.extend(std::iter::repeat_n(
        dmax + settings.delta_margin,
        delta0.len(),
    ));

    let params = HetParams {
        theta: theta0,
        phi: phi0,
        g: g0,
        delta: smoothed,
    };
    Ok(HetStart {
        params,
        hom,
        lower,
        upper,
        phi_mode: settings.phi_mode,
    })
}

fn check_len(v: &[f64], d: usize) -> Result<&[f64]> {
    if v.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: v.len(),
        });
    }
    Ok(v)
}

/// Heteroskedastic state at fixed parameters, with caches for prediction.
#[derive(Debug, Clone)]
struct HetState {
    kernel_mean: KernelSpec,
    kernel_noise: KernelSpec,
    g: f64,
    delta: DVector<f64>,
    eval: HetEval,
}

impl HetState {
    fn new(p: &HetParams, family: KernelFamily, design: &ReplicatedDesign) -> Result<Self> {
        let kernel_mean = KernelSpec::new(family, p.theta.clone())?;
        let kernel_noise = KernelSpec::new(family, p.phi.clone())?;
        let delta = DVector::from_column_slice(&p.delta);
        let eval = het_eval(&kernel_mean, &kernel_noise, p.g, &delta, design, false)?;
        Ok(Self {
            kernel_mean,
            kernel_noise,
            g: p.g,
            delta,
            eval,
        })
    }
}

/// Fitted heteroskedastic GP, or the homoskedastic fit when that won.
#[derive(Debug, Clone)]
pub struct HetModel {
    state: HetState,
    hom: HomModel,
    fallback: bool,
    design: ReplicatedDesign,
    info: Option<FitInfo>,
}

impl HetModel {
    /// Model at given parameters; `hom` is the comparison fit.
    pub fn from_params(
        params: &HetParams,
        family: KernelFamily,
        design: ReplicatedDesign,
        hom: HomModel,
        fallback: bool,
    ) -> Result<Self> {
        let state = HetState::new(params, family, &design)?;
        Ok(Self {
            state,
            hom,
            fallback,
            design,
            info: None,
        })
    }

    /// True when predictions come from the homoskedastic fit.
    pub fn fallback(&self) -> bool {
        self.fallback
    }

    pub fn hom(&self) -> &HomModel {
        &self.hom
    }

    pub fn kernel_mean(&self) -> &KernelSpec {
        &self.state.kernel_mean
    }

    pub fn kernel_noise(&self) -> &KernelSpec {
        &self.state.kernel_noise
    }

    pub fn theta(&self) -> &[f64] {
        self.state.kernel_mean.lengthscales()
    }

    pub fn phi(&self) -> &[f64] {
        self.state.kernel_noise.lengthscales()
    }

    pub fn g(&self) -> f64 {
        self.state.g
    }

    pub fn delta(&self) -> &DVector<f64> {
        &self.state.delta
    }

    pub fn log_lambda(&self) -> &DVector<f64> {
        &self.state.eval.log_lambda
    }

    pub fn nu_hat(&self) -> f64 {
        self.state.eval.mean_field.nu_hat
    }

    pub fn nu_g(&self) -> f64 {
        self.state.eval.nu_g
    }

    /// Negative joint log-likelihood of the heteroskedastic parameters.
    pub fn joint_nll(&self) -> f64 {
        self.state.eval.nll
    }

    /// Negative log-likelihood of the data alone (no latent penalty).
    pub fn mean_field_nll(&self) -> f64 {
        self.state.eval.mean_field.nll
    }

    pub fn design(&self) -> &ReplicatedDesign {
        &self.design
    }

    pub fn info(&self) -> Option<&FitInfo> {
        self.info.as_ref()
    }

    pub fn params(&self) -> HetParams {
        HetParams {
            theta: self.theta().to_vec(),
            phi: self.phi().to_vec(),
            g: self.g(),
            delta: self.delta().as_slice().to_vec(),
        }
    }

    /// Predictions from the heteroskedastic parameters, ignoring the fallback flag.
    pub fn predict_het(&self, xnew: &DMatrix<f64>) -> Result<Prediction> {
        let st = &self.state;
        let mf = &st.eval.mean_field;
        let x0 = self.design.x0();
        let kx = st.kernel_mean.corr_matrix(xnew, x0)?;
        let mean = &kx * &mf.alpha;
        let v = mf.factor.solve_mat(&kx.transpose());
        let mut kg = st.kernel_noise.corr_matrix(xnew, x0)?;
        // the latent covariance carries the fixed nugget at coincident inputs
        for r in 0..xnew.nrows() {
            for i in 0..x0.nrows() {
                if xnew.row(r) == x0.row(i) {
                    kg[(r, i)] += LATENT_NUGGET;
                }
            }
        }
        let log_nug = &kg * &st.eval.beta;
        let nu = mf.nu_hat;
        Ok(Prediction {
            mean: mean.as_slice().to_vec(),
            sd2: (0..xnew.nrows())
                .map(|j| (nu * (1.0 - kx.row(j).dot(&v.column(j).transpose()))).max(0.0))
                .collect(),
            nugs: log_nug.iter().map(|l| nu * l.exp()).collect(),
        })
    }

    pub fn predict(&self, xnew: &DMatrix<f64>) -> Result<Prediction> {
        if self.fallback {
            self.hom.predict(xnew)
        } else {
            self.predict_het(xnew)
        }
    }

    pub fn to_doc(&self) -> HetDoc {
        HetDoc {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: "het".into(),
            family: self.state.kernel_mean.family(),
            params: self.params(),
            nu_hat: self.nu_hat(),
            nu_g: self.nu_g(),
            fallback: self.fallback,
            design: DesignDoc::from(&self.design),
            hom: self.hom.to_doc(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_doc(doc: HetDoc) -> Result<Self> {
        check_header(&doc.format, doc.version, &doc.model, "het")?;
        let hom = HomModel::from_doc(doc.hom)?;
        Self::from_params(
            &doc.params,
            doc.family,
            doc.design.try_into()?,
            hom,
            doc.fallback,
        )
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_doc(serde_json::from_str(s)?)
    }
}

/// Serialized form of a [`HetModel`]; caches are rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HetDoc {
    pub format: String,
    pub version: u32,
    pub model: String,
    pub family: KernelFamily,
    pub params: HetParams,
    pub nu_hat: f64,
    pub nu_g: f64,
    pub fallback: bool,
    pub design: DesignDoc,
    pub hom: HomDoc,
}

/// Runs the optimizer from `x0` (optimizer coordinates of `start`).
pub fn het_fit_from(
    design: &ReplicatedDesign,
    start: &HetStart,
    x0: &[f64],
    settings: &HetSettings,
) -> Result<HetModel> {
    let family = settings.family;
    let problem = OptProblem::new(start.lower.clone(), start.upper.clone())?
        .with_max_iter(settings.max_iter)
        .with_tolerances(settings.tol_f, settings.tol_g);
    let np = start.lower.len();
    let objective = |v: &[f64]| -> (f64, Vec<f64>) {
        let p = start.unpack(v);
        let ev = KernelSpec::new(family, p.theta.clone()).and_then(|km| {
            let kn = KernelSpec::new(family, p.phi.clone())?;
            het_eval(
                &km,
                &kn,
                p.g,
                &DVector::from_column_slice(&p.delta),
                design,
                true,
            )
        });
        match ev {
            Ok(ev) => {
                let gr = ev.grad.as_ref().expect("gradient requested");
                (ev.nll, start.pack_grad(&p, gr))
            }
            Err(_) => (f64::INFINITY, vec![f64::NAN; np]),
        }
    };
    let res = minimize(&problem, x0, objective)?;
    if res.status == OptStatus::LineSearchFail && res.iterations == 0 {
        return Err(Error::Optimizer {
            status: res.status,
            x_best: res.x_opt,
            f_best: res.f_opt,
        });
    }
    let params = start.unpack(&res.x_opt);
    let mut model =
        HetModel::from_params(&params, family, design.clone(), start.hom.clone(), false)?;
    model.info = Some(FitInfo {
        status: res.status,
        iterations: res.iterations,
        evaluations: res.evaluations,
        grad_norm: res.grad_norm,
    });
    if settings.allow_fallback && start.hom.nll() < model.mean_field_nll() {
        model.fallback = true;
    }
    Ok(model)
}

/// Priming, joint optimization and the homoskedastic comparison.
pub fn het_fit(design: &ReplicatedDesign, settings: &HetSettings) -> Result<HetModel> {
    let start = het_init(design, settings)?;
    let x0 = start.pack(&start.params);
    het_fit_from(design, &start, &x0, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::find_reps;
    use crate::hom::hom_nll;
    use approx::assert_relative_eq;

    fn small_design() -> ReplicatedDesign {
        let x = DMatrix::from_column_slice(7, 1, &[0.0, 0.0, 0.3, 0.5, 0.5, 0.5, 0.9]);
        let y = DVector::from_vec(vec![0.1, 0.5, -0.2, 1.0, 1.4, 0.7, 0.3]);
        find_reps(&x, &y, 0.0).unwrap()
    }

    fn se(t: f64) -> KernelSpec {
        KernelSpec::new(KernelFamily::SquaredExponential, vec![t]).unwrap()
    }

    #[test]
    fn no_smoothing_at_zero_nugget() {
        let d = small_design();
        let delta = DVector::from_vec(vec![-1.0, 0.3, 2.0, 0.0]);
        let out = smooth_latents(&delta, &se(0.2), 0.0, &d).unwrap();
        for i in 0..4 {
            assert_relative_eq!(out[i], delta[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn independent_sites_halve_at_unit_nugget() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 10.0, 20.0]);
        let d = ReplicatedDesign::unreplicated(x, DVector::zeros(3)).unwrap();
        let out = smooth_latents(&DVector::from_element(3, 1.0), &se(1e-3), 1.0, &d).unwrap();
        for v in out.iter() {
            assert_relative_eq!(*v, 0.5, epsilon = 1e-7);
        }
    }

    #[test]
    fn constant_latents_reduce_to_homoskedastic() {
        let d = small_design();
        let c: f64 = -0.7;
        let ev = het_eval(
            &se(0.3),
            &se(0.2),
            0.0,
            &DVector::from_element(4, c),
            &d,
            false,
        )
        .unwrap();
        let hom = hom_nll(&se(0.3), c.exp(), &d).unwrap();
        assert_relative_eq!(ev.mean_field.nll, hom, max_relative = 1e-10);
    }

    #[test]
    fn prediction_consistency() {
        let d = small_design();
        let p = HetParams {
            theta: vec![0.3],
            phi: vec![0.4],
            g: 0.2,
            delta: vec![-1.0, 0.5, 0.2, -0.4],
        };
        let hom = HomModel::from_params(se(0.3), 0.1, d.clone()).unwrap();
        let m = HetModel::from_params(&p, KernelFamily::SquaredExponential, d.clone(), hom, false)
            .unwrap();
        let pr = m.predict(d.x0()).unwrap();
        for i in 0..4 {
            assert_relative_eq!(
                (pr.nugs[i] / m.nu_hat()).ln(),
                m.log_lambda()[i],
                epsilon = 1e-10
            );
        }
        let far = m.predict(&DMatrix::from_element(1, 1, 50.0)).unwrap();
        assert_relative_eq!(far.nugs[0], m.nu_hat(), max_relative = 1e-12);

        let back = HetModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_relative_eq!(back.joint_nll(), m.joint_nll(), max_relative = 1e-14);
    }

    #[test]
    fn log_det_derivative_in_g_is_positive() {
        let d = small_design();
        let (_, ups) = latent_matrices(&se(0.2), 0.3, &d).unwrap();
        let f = SpdFactor::new(ups).unwrap();
        let inv = f.inverse();
        let ainv = a_inv(&d);
        let tr: f64 = (0..4).map(|i| inv[(i, i)] * ainv[i]).sum();
        assert!(tr > 0.0);
    }

    #[test]
    fn exact_fit_puts_latents_at_floor() {
        let d = small_design();
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 0.5, 1.0]);
        let exact =
            ReplicatedDesign::unreplicated(x, DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let lat = residual_latents(&exact, &[1.0, 2.0, 3.0], 1.0);
        assert!(lat.iter().all(|&v| v == LOG_EPS));
        assert_relative_eq!(LOG_EPS, f64::EPSILON.ln(), max_relative = 1e-15);
        // replicated sites keep their spread even when the mean is exact
        let lat = residual_latents(&d, d.z0().as_slice(), 1.0);
        assert_relative_eq!(lat[0], d.s2()[0].ln(), max_relative = 1e-14);
    }

    #[test]
    fn proportional_packing_round_trips() {
        let d = small_design();
        let settings = HetSettings {
            phi_mode: PhiMode::Proportional,
            ..HetSettings::default()
        };
        let start = het_init(&d, &settings).unwrap();
        let v = start.pack(&start.params);
        assert_eq!(v.len(), 1 + 1 + 1 + 4);
        let p = start.unpack(&v);
        assert_relative_eq!(p.phi[0], start.params.phi[0], max_relative = 1e-12);
        assert!(p.phi[0] >= p.theta[0]);
    }

    fn fd_check(family: KernelFamily) {
        let d = {
            let x = DMatrix::from_row_slice(
                9,
                2,
                &[
                    0.1, 0.2, 0.1, 0.2, 0.5, 0.9, 0.8, 0.4, 0.8, 0.4, 0.8, 0.4, 0.3, 0.6, 0.9, 0.1,
                    0.9, 0.1,
                ],
            );
            let y = DVector::from_vec(vec![0.3, -0.1, 1.2, 0.4, 0.9, 0.1, -0.5, 2.0, 1.1]);
            find_reps(&x, &y, 0.0).unwrap()
        };
        let theta = vec![0.4, 0.7];
        let phi = vec![0.6, 0.9];
        let g = 0.35;
        let delta = DVector::from_vec(vec![-0.5, 0.2, 0.8, -1.1, 0.3]);
        let km = KernelSpec::new(family, theta.clone()).unwrap();
        let kn = KernelSpec::new(family, phi.clone()).unwrap();
        let grad = het_njll_grad(&km, &kn, g, &delta, &d).unwrap();
        let mut v = theta.clone();
        v.extend_from_slice(&phi);
        v.push(g);
        v.extend(delta.iter());
        let f = |v: &[f64]| {
            let km = KernelSpec::new(family, v[0..2].to_vec()).unwrap();
            let kn = KernelSpec::new(family, v[2..4].to_vec()).unwrap();
            het_njll(&km, &kn, v[4], &DVector::from_column_slice(&v[5..]), &d).unwrap()
        };
        for j in 0..v.len() {
            let h = 1e-6 * v[j].abs().max(1.0);
            let mut up = v.clone();
            let mut dn = v.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!(
                (fd - grad[j]).abs() <= 1e-5 * fd.abs().max(1.0),
                "coordinate {j}: fd {fd} analytic {}",
                grad[j]
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        fd_check(KernelFamily::SquaredExponential);
        fd_check(KernelFamily::Matern52);
    }

    #[test]
    fn objective_grows_with_smoothing_at_fixed_nuggets() {
        let d = small_design();
        let target = DVector::from_vec(vec![-1.0, 0.4, 0.1, -0.3]);
        let kn = se(0.25);
        let mut prev = f64::NEG_INFINITY;
        for g in [0.0, 0.01, 0.1, 1.0] {
            let (c, ups) = latent_matrices(&kn, g, &d).unwrap();
            let delta = ups * SpdFactor::new(c).unwrap().solve(&target);
            let ev = het_eval(&se(0.3), &kn, g, &delta, &d, false).unwrap();
            for i in 0..4 {
                assert_relative_eq!(ev.log_lambda[i], target[i], epsilon = 1e-8);
            }
            assert!(ev.nll > prev);
            prev = ev.nll;
        }
    }
}
