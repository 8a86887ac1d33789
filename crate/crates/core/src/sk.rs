//! Stochastic kriging baseline.
//!
//! Empirical replicate variances are plugged into the kriging equations on
//! site means, and interpolated by a separate noiseless GP for prediction.

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
use crate::linalg::{trace_of_product, SpdFactor};
use crate::optim::{minimize, OptProblem, OptStatus};

/// Nugget of the variance interpolator.
const INTERP_NUGGET: f64 = 1.490_116_119_384_765_6e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SkFitOptions {
    pub family: KernelFamily,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub max_iter: usize,
}

impl Default for SkFitOptions {
    fn default() -> Self {
        Self {
            family: KernelFamily::SquaredExponential,
            lower: None,
            upper: None,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SkModel {
    kernel: KernelSpec,
    nu: f64,
    sigma2_hat: DVector<f64>,
    variance_gp: HomModel,
    design: ReplicatedDesign,
    factor: SpdFactor,
    alpha: DVector<f64>,
    nll: f64,
    info: Option<FitInfo>,
}

/// Bias-adjusted replicate variances `a_i s_i^2 / (a_i - 1)`.
pub fn sigma2_hat(design: &ReplicatedDesign) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(design.n_unique());
    for (i, (&a, &s2)) in design.mult().iter().zip(design.s2().iter()).enumerate() {
        if a < 2 {
            return Err(Error::SkRequiresReplication { site: i, mult: a });
        }
        let af = a as f64;
        out[i] = (af * s2 / (af - 1.0)).max(0.0);
    }
    Ok(out)
}

fn sk_matrix(
    kernel: &KernelSpec,
    nu: f64,
    noise: &DVector<f64>,
    design: &ReplicatedDesign,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let c = kernel.corr_matrix_sym(design.x0())?;
    let mut m = &c * nu;
    for i in 0..m.nrows() {
        m[(i, i)] += noise[i];
    }
    Ok((c, m))
}

/// Negative log-likelihood of site means with plug-in noise, and its
/// gradient in `[theta, log nu]`.
pub fn sk_nll(
    kernel: &KernelSpec,
    nu: f64,
    sigma2: &DVector<f64>,
    design: &ReplicatedDesign,
) -> Result<(f64, Vec<f64>)> {
    let noise = sigma2.component_div(&design.mult_f64());
    let (c, m) = sk_matrix(kernel, nu, &noise, design)?;
    let f = SpdFactor::new(m)?;
    let alpha = f.solve(design.z0());
    let n = design.n_unique() as f64;
    let nll = 0.5 * f.log_det() + 0.5 * design.z0().dot(&alpha) + 0.5 * n * (2.0 * PI).ln();
    let minv = f.inverse();
    let dcs = kernel.corr_matrix_with_grads(design.x0())?.1;
    let mut grad: Vec<f64> = dcs
        .iter()
        .map(|dc| 0.5 * nu * (trace_of_product(&minv, dc) - alpha.dot(&(dc * &alpha))))
        .collect();
    grad.push(0.5 * nu * (trace_of_product(&minv, &c) - alpha.dot(&(&c * &alpha))));
    Ok((nll, grad))
}

pub fn sk_fit(design: &ReplicatedDesign, opts: &SkFitOptions) -> Result<SkModel> {
    let sigma2 = sigma2_hat(design)?;
    let d = design.dim();
    let (lo, hi) = default_bounds(design, opts.family);
    let mut lower = opts.lower.clone().unwrap_or_else(|| lo[..d].to_vec());
    let mut upper = opts.upper.clone().unwrap_or_else(|| hi[..d].to_vec());
    for v in [&lower, &upper] {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: v.len(),
            });
        }
    }
    let z = design.z0();
    let n = z.len() as f64;
    let scale = (z.dot(z) / n).max(1e-12);
    lower.push((1e-6 * scale).ln());
    upper.push((1e4 * scale).ln());
    let mut x0: Vec<f64> = lower[..d]
        .iter()
        .zip(&upper[..d])
        .map(|(l, u)| (l + 0.1 * (u - l)).max(*l))
        .collect();
    x0.push(scale.ln());

    let problem = OptProblem::new(lower, upper)?.with_max_iter(opts.max_iter);
    let family = opts.family;
    let res = minimize(&problem, &x0, |v| {
        let r = KernelSpec::new(family, v[..d].to_vec())
            .and_then(|k| sk_nll(&k, v[d].exp(), &sigma2, design));
        match r {
            Ok((f, g)) => (f, g),
            Err(_) => (f64::INFINITY, vec![f64::NAN; d + 1]),
        }
    })?;
    if res.status == OptStatus::LineSearchFail && res.iterations == 0 {
        return Err(Error::Optimizer {
            status: res.status,
            x_best: res.x_opt,
            f_best: res.f_opt,
        });
    }
    let kernel = KernelSpec::new(family, res.x_opt[..d].to_vec())?;

    let var_design = ReplicatedDesign::unreplicated(design.x0().clone(), sigma2.clone())?;
    let variance_gp = hom_fit(
        &var_design,
        &HomFitOptions {
            family,
            fix_g: Some(INTERP_NUGGET),
            ..HomFitOptions::default()
        },
    )?;
    let mut model = SkModel::from_parts(kernel, res.x_opt[d].exp(), variance_gp, design.clone())?;
    model.info = Some(FitInfo {
        status: res.status,
        iterations: res.iterations,
        evaluations: res.evaluations,
        grad_norm: res.grad_norm,
    });
    Ok(model)
}

impl SkModel {
    pub fn from_parts(
        kernel: KernelSpec,
        nu: f64,
        variance_gp: HomModel,
        design: ReplicatedDesign,
    ) -> Result<Self> {
        let sigma2 = sigma2_hat(&design)?;
        let noise = sigma2.component_div(&design.mult_f64());
        let (_, m) = sk_matrix(&kernel, nu, &noise, &design)?;
        let factor = SpdFactor::new(m)?;
        let alpha = factor.solve(design.z0());
        let nll = sk_nll(&kernel, nu, &sigma2, &design)?.0;
        Ok(Self {
            kernel,
            nu,
            sigma2_hat: sigma2,
            variance_gp,
            design,
            factor,
            alpha,
            nll,
            info: None,
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn sigma2_hat(&self) -> &DVector<f64> {
        &self.sigma2_hat
    }

    pub fn variance_gp(&self) -> &HomModel {
        &self.variance_gp
    }

    pub fn nll(&self) -> f64 {
        self.nll
    }

    pub fn info(&self) -> Option<&FitInfo> {
        self.info.as_ref()
    }

    pub fn design(&self) -> &ReplicatedDesign {
        &self.design
    }

    pub fn predict(&self, xnew: &DMatrix<f64>) -> Result<Prediction> {
        let kx = self.kernel.corr_matrix(xnew, self.design.x0())? * self.nu;
        let mean = &kx * &self.alpha;
        let v = self.factor.solve_mat(&kx.transpose());
        let r = self.variance_gp.predict(xnew)?.mean;
        Ok(Prediction {
            mean: mean.as_slice().to_vec(),
            sd2: (0..xnew.nrows())
                .map(|j| (self.nu - kx.row(j).dot(&v.column(j).transpose())).max(0.0))
                .collect(),
            nugs: r.into_iter().map(|v| v.max(0.0)).collect(),
        })
    }

    pub fn to_doc(&self) -> SkDoc {
        SkDoc {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: "sk".into(),
            kernel: self.kernel.clone(),
            nu: self.nu,
            nll: self.nll,
            design: DesignDoc::from(&self.design),
            variance_gp: self.variance_gp.to_doc(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_doc(doc: SkDoc) -> Result<Self> {
        check_header(&doc.format, doc.version, &doc.model, "sk")?;
        let vgp = HomModel::from_doc(doc.variance_gp)?;
        Self::from_parts(doc.kernel, doc.nu, vgp, doc.design.try_into()?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_doc(serde_json::from_str(s)?)
    }
}

/// Serialized form of an [`SkModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkDoc {
    pub format: String,
    pub version: u32,
    pub model: String,
    pub kernel: KernelSpec,
    pub nu: f64,
    pub nll: f64,
    pub design: DesignDoc,
    pub variance_gp: HomDoc,
}
