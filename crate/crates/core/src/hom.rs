//! Homoskedastic GP: a single scaled nugget `g` shared by all sites.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{DesignDoc, ReplicatedDesign};
use crate::error::{Error, Result};
use crate::kernel::{KernelFamily, KernelSpec};
use crate::likelihood::{mean_field, MeanFieldEval};
use crate::linalg::SpdFactor;
use crate::optim::{minimize, OptProblem, OptStatus};

pub(crate) const MODEL_FORMAT: &str = "hetgp-model";
pub(crate) const MODEL_VERSION: u32 = 1;

/// Predictive summaries at a batch of locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: Vec<f64>,
    /// Variance of the latent mean function.
    pub sd2: Vec<f64>,
    /// Noise variance.
    pub nugs: Vec<f64>,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Variance of a new observation, `sd2 + nugs`.
    pub fn total_var(&self) -> Vec<f64> {
        self.sd2
            .iter()
            .zip(&self.nugs)
            .map(|(a, b)| a + b)
            .collect()
    }
}

/// Optimizer outcome kept alongside a fitted model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub status: OptStatus,
    pub iterations: usize,
    pub evaluations: usize,
    pub grad_norm: f64,
}

/// Negative log-likelihood at lengthscales `kernel` and nugget `g`.
pub fn hom_nll(kernel: &KernelSpec, g: f64, design: &ReplicatedDesign) -> Result<f64> {
    let lambda = DVector::from_element(design.n_unique(), g);
    Ok(mean_field(kernel, &lambda, design, false)?.nll)
}

/// Gradient of [`hom_nll`]: one entry per lengthscale, then the nugget.
pub fn hom_nll_grad(kernel: &KernelSpec, g: f64, design: &ReplicatedDesign) -> Result<Vec<f64>> {
    let lambda = DVector::from_element(design.n_unique(), g);
    let ev = mean_field(kernel, &lambda, design, true)?;
    let mut grad = ev.grad_theta;
    grad.push(ev.grad_lambda.sum());
    Ok(grad)
}

/// Settings for [`hom_fit`]; unset fields fall back to data-driven defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct HomFitOptions {
    pub family: KernelFamily,
    /// Lower bounds for `(theta_1, .., theta_d, g)`.
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub init: Option<Vec<f64>>,
    /// Hold the nugget at this value and optimize lengthscales only.
    pub fix_g: Option<f64>,
    pub max_iter: usize,
    pub tol_f: f64,
    pub tol_g: f64,
}

impl Default for HomFitOptions {
    fn default() -> Self {
        Self {
            family: KernelFamily::SquaredExponential,
            lower: None,
            upper: None,
            init: None,
            fix_g: None,
            max_iter: 100,
            tol_f: 1e-8,
            tol_g: 1e-5,
        }
    }
}

impl HomFitOptions {
    pub fn new(family: KernelFamily) -> Self {
        Self {
            family,
            ..Self::default()
        }
    }
}

fn input_ranges(design: &ReplicatedDesign) -> Vec<f64> {
    let x0 = design.x0();
    (0..design.dim())
        .map(|k| {
            let col = x0.column(k);
            let r = col.max() - col.min();
            if r > 0.0 {
                r
            } else {
                1.0
            }
        })
        .collect()
}

fn lengthscale_unit(family: KernelFamily, range: f64) -> f64 {
    match family {
        KernelFamily::SquaredExponential => range * range,
        KernelFamily::Matern52 => range,
    }
}

fn population_var(v: &DVector<f64>) -> f64 {
    let m = v.mean();
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// Default box `(lower, upper)` over `(theta, g)`.
///
/// Lengthscales span `[0.01, 2]` times the squared input range (the plain
/// range for Matérn); the nugget spans `[sqrt(eps), 100]`.
pub fn default_bounds(design: &ReplicatedDesign, family: KernelFamily) -> (Vec<f64>, Vec<f64>) {
    let units: Vec<f64> = input_ranges(design)
        .into_iter()
        .map(|r| lengthscale_unit(family, r))
        .collect();
    let g_lo = f64::EPSILON.sqrt();
    let g_hi = 100.0;
    let mut lower: Vec<f64> = units.iter().map(|u| 0.01 * u).collect();
    let mut upper: Vec<f64> = units.iter().map(|u| 2.0 * u).collect();
    lower.push(g_lo);
    upper.push(g_hi);
    (lower, upper)
}

/// Default starting point over `(theta, g)`, inside `[lower, upper]`.
pub fn default_init(
    design: &ReplicatedDesign,
    family: KernelFamily,
    lower: &[f64],
    upper: &[f64],
) -> Vec<f64> {
    let var = population_var(design.z0());
    let g0 = if design.mult().iter().any(|&a| a > 1) && var > 0.0 {
        design.s2().mean() / var
    } else {
        0.1
    };
    let mut init: Vec<f64> = input_ranges(design)
        .into_iter()
        .map(|r| 0.1 * lengthscale_unit(family, r))
        .collect();
    init.push(g0);
    init.iter()
        .zip(lower.iter().zip(upper))
        .map(|(v, (l, u))| v.clamp(*l, *u))
        .collect()
}

/// Fitted homoskedastic GP with cached factorization of `Upsilon = C + g A^-1`.
#[derive(Debug, Clone)]
pub struct HomModel {
    kernel: KernelSpec,
    g: f64,
    nu_hat: f64,
    nll: f64,
    design: ReplicatedDesign,
    factor: SpdFactor,
    alpha: DVector<f64>,
    info: Option<FitInfo>,
}

impl HomModel {
    /// Builds a model at given parameters without optimizing.
    pub fn from_params(kernel: KernelSpec, g: f64, design: ReplicatedDesign) -> Result<Self> {
        if design.dim() != kernel.dim() {
            return Err(Error::DimensionMismatch {
                expected: kernel.dim(),
                found: design.dim(),
            });
        }
        let lambda = DVector::from_element(design.n_unique(), g);
        let MeanFieldEval {
            nll,
            nu_hat,
            factor,
            alpha,
            ..
        } = mean_field(&kernel, &lambda, &design, false)?;
        Ok(Self {
            kernel,
            g,
            nu_hat,
            nll,
            design,
            factor,
            alpha,
            info: None,
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn theta(&self) -> &[f64] {
        self.kernel.lengthscales()
    }

    pub fn g(&self) -> f64 {
        self.g
    }

    pub fn nu_hat(&self) -> f64 {
        self.nu_hat
    }

    /// Negative log-likelihood at the stored parameters.
    pub fn nll(&self) -> f64 {
        self.nll
    }

    pub fn log_lik(&self) -> f64 {
        -self.nll
    }

    pub fn design(&self) -> &ReplicatedDesign {
        &self.design
    }

    pub fn info(&self) -> Option<&FitInfo> {
        self.info.as_ref()
    }

    /// Predictive mean, latent variance and noise variance at the rows of `xnew`.
    pub fn predict(&self, xnew: &DMatrix<f64>) -> Result<Prediction> {
        let kx = self.kernel.corr_matrix(xnew, self.design.x0())?;
        let mean = &kx * &self.alpha;
        let v = self.factor.solve_mat(&kx.transpose());
        let sd2 = (0..xnew.nrows())
            .map(|j| (self.nu_hat * (1.0 - kx.row(j).dot(&v.column(j).transpose()))).max(0.0))
            .collect();
        Ok(Prediction {
            mean: mean.as_slice().to_vec(),
            sd2,
            nugs: vec![self.nu_hat * self.g; xnew.nrows()],
        })
    }

    pub fn to_doc(&self) -> HomDoc {
        HomDoc {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: "hom".into(),
            kernel: self.kernel.clone(),
            g: self.g,
            nu_hat: self.nu_hat,
            nll: self.nll,
            design: DesignDoc::from(&self.design),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_doc(doc: HomDoc) -> Result<Self> {
        check_header(&doc.format, doc.version, &doc.model, "hom")?;
        Self::from_params(doc.kernel, doc.g, doc.design.try_into()?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_doc(serde_json::from_str(s)?)
    }
}

pub(crate) fn check_header(format: &str, version: u32, model: &str, want: &str) -> Result<()> {
    if format != MODEL_FORMAT {
        return Err(Error::UnsupportedDocument(format!(
            "unknown format `{format}`"
        )));
    }
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedDocument(format!(
            "unsupported version {version}"
        )));
    }
    if model != want {
        return Err(Error::UnsupportedDocument(format!(
            "expected a `{want}` model, found `{model}`"
        )));
    }
    Ok(())
}

/// Serialized form of a [`HomModel`]; caches are rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomDoc {
    pub format: String,
    pub version: u32,
    pub model: String,
    pub kernel: KernelSpec,
    pub g: f64,
    pub nu_hat: f64,
    pub nll: f64,
    pub design: DesignDoc,
}

/// Best point of a coarse grid: isotropic lengthscale multiples of the
/// default start, crossed with a few nuggets.
fn grid_init(
    design: &ReplicatedDesign,
    opts: &HomFitOptions,
    lower: &[f64],
    upper: &[f64],
) -> Vec<f64> {
    let d = design.dim();
    let base = default_init(design, opts.family, lower, upper);
    let n = design.n_unique();
    let gs: Vec<f64> = match opts.fix_g {
        Some(g) => vec![g],
        None => vec![base[d], 1e-3, 1e-2, 0.1, 1.0],
    };
    let mut best = (f64::INFINITY, base.clone());
    for scale in [0.03, 0.1, 0.3, 1.0, 3.0] {
        let theta: Vec<f64> = (0..d)
            .map(|k| (base[k] * scale).clamp(lower[k], upper[k]))
            .collect();
        let Ok(kernel) = KernelSpec::new(opts.family, theta.clone()) else {
            continue;
        };
        for &g in &gs {
            let g = g.clamp(lower[d], upper[d]);
            if let Ok(ev) = mean_field(&kernel, &DVector::from_element(n, g), design, false) {
                if ev.nll < best.0 {
                    let mut p = theta.clone();
                    p.push(g);
                    best = (ev.nll, p);
                }
            }
        }
    }
    best.1
}

/// Maximum-likelihood fit of lengthscales and nugget.
///
/// Without an explicit start, the optimizer begins at the best point of a
/// small grid around [`default_init`].
pub fn hom_fit(design: &ReplicatedDesign, opts: &HomFitOptions) -> Result<HomModel> {
    let d = design.dim();
    if let Some(g) = opts.fix_g {
        if !(g.is_finite() && g > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "fixed nugget must be positive, got {g}"
            )));
        }
    }
    let (def_lo, def_hi) = default_bounds(design, opts.family);
    let lower = opts.lower.clone().unwrap_or(def_lo);
    let upper = opts.upper.clone().unwrap_or(def_hi);
    for b in [&lower, &upper] {
        if b.len() != d + 1 {
            return Err(Error::DimensionMismatch {
                expected: d + 1,
                found: b.len(),
            });
        }
    }
    let init = match &opts.init {
        Some(v) if v.len() != d + 1 => {
            return Err(Error::DimensionMismatch {
                expected: d + 1,
                found: v.len(),
            })
        }
        Some(v) => v.clone(),
        None => grid_init(design, opts, &lower, &upper),
    };
    let n = design.n_unique();
    let fix_g = opts.fix_g;
    let np = if fix_g.is_some() { d } else { d + 1 };
    let problem = OptProblem::new(lower[..np].to_vec(), upper[..np].to_vec())?
        .with_max_iter(opts.max_iter)
        .with_tolerances(opts.tol_f, opts.tol_g);

    let objective = |p: &[f64]| -> (f64, Vec<f64>) {
        let g = fix_g.unwrap_or_else(|| p[d]);
        let eval = KernelSpec::new(opts.family, p[..d].to_vec())
            .and_then(|k| mean_field(&k, &DVector::from_element(n, g), design, true));
        match eval {
            Ok(ev) => {
                let mut grad = ev.grad_theta;
                if fix_g.is_none() {
                    grad.push(ev.grad_lambda.sum());
                }
                (ev.nll, grad)
            }
            Err(_) => (f64::INFINITY, vec![f64::NAN; np]),
        }
    };
    let res = minimize(&problem, &init[..np], objective)?;
    if res.status == OptStatus::LineSearchFail && res.iterations == 0 {
        return Err(Error::Optimizer {
            status: res.status,
            x_best: res.x_opt,
            f_best: res.f_opt,
        });
    }
    let g = match fix_g {
        Some(g) => g,
        None => res.x_opt[d],
    };
    let kernel = KernelSpec::new(opts.family, res.x_opt[..d].to_vec())?;
    let mut model = HomModel::from_params(kernel, g, design.clone())?;
    model.info = Some(FitInfo {
        status: res.status,
        iterations: res.iterations,
        evaluations: res.evaluations,
        grad_norm: res.grad_norm,
    });
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn se(theta: Vec<f64>) -> KernelSpec {
        KernelSpec::new(KernelFamily::SquaredExponential, theta).unwrap()
    }

    #[test]
    fn scalar_case_closed_form() {
        let y = 1.7;
        let g = 0.3;
        let d = ReplicatedDesign::unreplicated(
            DMatrix::from_element(1, 1, 0.2),
            DVector::from_element(1, y),
        )
        .unwrap();
        let v = hom_nll(&se(vec![1.0]), g, &d).unwrap();
        let expect =
            0.5 * (2.0 * PI).ln() + 0.5 * (y * y / (1.0 + g)).ln() + 0.5 * (1.0 + g).ln() + 0.5;
        assert_relative_eq!(v, expect, max_relative = 1e-14);
    }

    #[test]
    fn prediction_limits() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 1.0]);
        let y = DVector::from_vec(vec![1.0, -0.5, 2.0]);
        let d = ReplicatedDesign::unreplicated(x, y).unwrap();
        let m = HomModel::from_params(se(vec![0.1]), 1e-8, d).unwrap();
        let far = m.predict(&DMatrix::from_element(1, 1, 100.0)).unwrap();
        assert!(far.mean[0].abs() < 1e-12);
        assert_relative_eq!(far.sd2[0], m.nu_hat(), max_relative = 1e-12);
        let at = m.predict(&DMatrix::from_element(1, 1, 0.5)).unwrap();
        assert_relative_eq!(at.mean[0], -0.5, epsilon = 1e-6);
        assert!(at.sd2[0] < 1e-6);
        assert_relative_eq!(at.nugs[0], m.nu_hat() * 1e-8, max_relative = 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 0.0, 0.4, 1.0]);
        let y = DVector::from_vec(vec![1.0, 1.4, -0.5, 2.0]);
        let d = crate::design::find_reps(&x, &y, 0.0).unwrap();
        let m = HomModel::from_params(se(vec![0.3]), 0.05, d).unwrap();
        let back = HomModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.theta(), m.theta());
        assert_eq!(back.g(), m.g());
        assert_relative_eq!(back.nll(), m.nll(), max_relative = 1e-15);
        let mut doc = m.to_doc();
        doc.version = 99;
        assert!(matches!(
            HomModel::from_doc(doc),
            Err(Error::UnsupportedDocument(_))
        ));
    }

    #[test]
    fn gradient_at_interior_fit_vanishes() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64 / 29.0).collect();
        let ys: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| (6.0 * x).sin() + 0.1 * ((i * 7919 % 13) as f64 / 13.0 - 0.5))
            .collect();
        let d = ReplicatedDesign::unreplicated(
            DMatrix::from_column_slice(30, 1, &xs),
            DVector::from_vec(ys),
        )
        .unwrap();
        // run to stationarity rather than stopping on a small relative decrease
        let opts = HomFitOptions {
            tol_f: 0.0,
            max_iter: 500,
            ..HomFitOptions::default()
        };
        let m = hom_fit(&d, &opts).unwrap();
        let (lo, hi) = default_bounds(&d, KernelFamily::SquaredExponential);
        let p = [m.theta()[0], m.g()];
        let interior = p
            .iter()
            .zip(lo.iter().zip(&hi))
            .all(|(v, (l, u))| v > l && v < u);
        assert!(interior, "{p:?}");
        let grad = hom_nll_grad(m.kernel(), m.g(), &d).unwrap();
        let inf = grad.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(inf < 1e-4, "{grad:?} {:?} {p:?}", m.info());
    }

    #[test]
    fn fixed_nugget_is_kept() {
        let x = DMatrix::from_row_slice(5, 1, &[0.0, 0.2, 0.4, 0.6, 0.8]);
        let y = DVector::from_vec(vec![0.0, 0.5, 0.8, 0.5, 0.1]);
        let d = ReplicatedDesign::unreplicated(x, y).unwrap();
        let opts = HomFitOptions {
            fix_g: Some(1e-6),
            ..HomFitOptions::default()
        };
        let m = hom_fit(&d, &opts).unwrap();
        assert_eq!(m.g(), 1e-6);
    }
}
