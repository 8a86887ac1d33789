//! Desk-scale benchmark drivers shared by the CLI and the acceptance tests.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{find_reps, ReplicatedDesign};
use crate::error::{Error, Result};
use crate::het::{het_fit, HetModel, HetSettings};
use crate::hom::{hom_fit, HomFitOptions, HomModel, Prediction};
use crate::kernel::KernelFamily;
use crate::metrics::{nlpd, nmse, score, EvalSet};
use crate::sims::stream_rng;
use crate::sk::{sk_fit, SkFitOptions, SkModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Hom,
    Het,
    Sk,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Hom => "hom",
            ModelKind::Het => "het",
            ModelKind::Sk => "sk",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hom" => Ok(ModelKind::Hom),
            "het" => Ok(ModelKind::Het),
            "sk" => Ok(ModelKind::Sk),
            other => Err(Error::InvalidParameter(format!(
                "unknown model type {other:?}"
            ))),
        }
    }
}

/// Model choice plus the options shared by all three fitters.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSpec {
    pub kind: ModelKind,
    pub family: KernelFamily,
    pub max_iter: usize,
    /// Lengthscale box; `None` uses the data-driven default.
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

impl FitSpec {
    pub fn new(kind: ModelKind, family: KernelFamily) -> Self {
        Self {
            kind,
            family,
            max_iter: 100,
            lower: None,
            upper: None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Fitted {
    Hom(HomModel),
    Het(Box<HetModel>),
    Sk(Box<SkModel>),
}

impl Fitted {
    pub fn predict(&self, xnew: &DMatrix<f64>) -> Result<Prediction> {
        match self {
            Fitted::Hom(m) => m.predict(xnew),
            Fitted::Het(m) => m.predict(xnew),
            Fitted::Sk(m) => m.predict(xnew),
        }
    }

    pub fn fallback(&self) -> bool {
        matches!(self, Fitted::Het(m) if m.fallback())
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Fitted::Hom(_) => ModelKind::Hom,
            Fitted::Het(_) => ModelKind::Het,
            Fitted::Sk(_) => ModelKind::Sk,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        match self {
            Fitted::Hom(m) => m.to_json(),
            Fitted::Het(m) => m.to_json(),
            Fitted::Sk(m) => m.to_json(),
        }
    }

    /// Loads any model document, dispatching on its `model` field.
    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Tag {
            model: String,
        }
        let tag: Tag = serde_json::from_str(s)?;
        match tag.model.as_str() {
            "hom" => Ok(Fitted::Hom(HomModel::from_json(s)?)),
            "het" => Ok(Fitted::Het(Box::new(HetModel::from_json(s)?))),
            "sk" => Ok(Fitted::Sk(Box::new(SkModel::from_json(s)?))),
            other => Err(Error::UnsupportedDocument(format!(
                "unknown model `{other}`"
            ))),
        }
    }
}

pub fn fit_model(design: &ReplicatedDesign, spec: &FitSpec) -> Result<Fitted> {
    let d = design.dim();
    match spec.kind {
        ModelKind::Hom => {
            let (mut lo, mut hi) = crate::hom::default_bounds(design, spec.family);
            if let Some(l) = &spec.lower {
                check_dim(l, d)?;
                lo[..d].copy_from_slice(l);
            }
            if let Some(u) = &spec.upper {
                check_dim(u, d)?;
                hi[..d].copy_from_slice(u);
            }
            let opts = HomFitOptions {
                family: spec.family,
                lower: Some(lo),
                upper: Some(hi),
                max_iter: spec.max_iter,
                ..HomFitOptions::default()
            };
            Ok(Fitted::Hom(hom_fit(design, &opts)?))
        }
        ModelKind::Het => {
            let settings = HetSettings {
                max_iter: spec.max_iter,
                theta_lower: spec.lower.clone(),
                theta_upper: spec.upper.clone(),
                ..HetSettings::new(spec.family)
            };
            Ok(Fitted::Het(Box::new(het_fit(design, &settings)?)))
        }
        ModelKind::Sk => {
            let opts = SkFitOptions {
                family: spec.family,
                lower: spec.lower.clone(),
                upper: spec.upper.clone(),
                max_iter: spec.max_iter,
            };
            Ok(Fitted::Sk(Box::new(sk_fit(design, &opts)?)))
        }
    }
}

fn check_dim(v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: v.len(),
        });
    }
    Ok(())
}

/// Held-out metrics for one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub split: usize,
    pub model: ModelKind,
    pub nmse: f64,
    pub nlpd: f64,
    pub score: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub model: ModelKind,
    pub splits: usize,
    pub nmse_mean: f64,
    pub nmse_sd: f64,
    pub nlpd_mean: f64,
    pub nlpd_sd: f64,
    pub score_mean: f64,
    pub fallback_rate: f64,
}

/// Sample mean and sd (divisor `m - 1`).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let m = v.len() as f64;
    let mean = v.iter().sum::<f64>() / m;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(rows: &[CvRow], model: ModelKind) -> CvSummary {
    let sel: Vec<&CvRow> = rows.iter().filter(|r| r.model == model).collect();
    let (nmse_mean, nmse_sd) = mean_sd(&sel.iter().map(|r| r.nmse).collect::<Vec<_>>());
    let (nlpd_mean, nlpd_sd) = mean_sd(&sel.iter().map(|r| r.nlpd).collect::<Vec<_>>());
    let (score_mean, _) = mean_sd(&sel.iter().map(|r| r.score).collect::<Vec<_>>());
    let fb = sel.iter().filter(|r| r.fallback).count();
    CvSummary {
        model,
        splits: sel.len(),
        nmse_mean,
        nmse_sd,
        nlpd_mean,
        nlpd_sd,
        score_mean,
        fallback_rate: fb as f64 / sel.len().max(1) as f64,
    }
}

fn rows_of(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)])
}

/// Metrics of each model on one train/test partition of raw data.
pub fn evaluate_split(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    train: &[usize],
    test: &[usize],
    specs: &[FitSpec],
    split: usize,
) -> Result<Vec<CvRow>> {
    let design = find_reps(
        &rows_of(x, train),
        &DVector::from_iterator(train.len(), train.iter().map(|&i| y[i])),
        0.0,
    )?;
    let xt = rows_of(x, test);
    let yt: Vec<f64> = test.iter().map(|&i| y[i]).collect();
    specs
        .iter()
        .map(|spec| {
            let m = fit_model(&design, spec)?;
            let e = EvalSet::from_prediction(yt.clone(), &m.predict(&xt)?)?;
            Ok(CvRow {
                split,
                model: spec.kind,
                nmse: nmse(&e)?,
                nlpd: nlpd(&e),
                score: score(&e),
                fallback: m.fallback(),
            })
        })
        .collect()
}

/// Random partitions holding out `ceil(test_frac * N)` raw observations each;
/// split `k` uses stream `k` of `seed`, so results do not depend on threading.
pub fn random_splits(
    n: usize,
    test_frac: f64,
    splits: usize,
    seed: u64,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let m = ((n as f64 * test_frac).round() as usize).clamp(1, n - 1);
    (0..splits)
        .map(|k| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut stream_rng(seed, k as u64));
            let mut test = idx[..m].to_vec();
            let mut train = idx[m..].to_vec();
            test.sort_unstable();
            train.sort_unstable();
            (train, test)
        })
        .collect()
}

/// Cross-validation over random 90/10 partitions.
pub fn cross_validate(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    specs: &[FitSpec],
    splits: usize,
    seed: u64,
) -> Result<Vec<CvRow>> {
    let parts = random_splits(y.len(), 0.1, splits, seed);
    let per: Vec<Result<Vec<CvRow>>> = parts
        .par_iter()
        .enumerate()
        .map(|(k, (train, test))| evaluate_split(x, y, train, test, specs, k))
        .collect();
    let mut rows = Vec::with_capacity(splits * specs.len());
    for r in per {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Seconds spent in `f`, with its result.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

/// Unique-site versus forced full-N fit of the same homoskedastic model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WoodburyReport {
    pub seed: u64,
    pub n_unique: usize,
    pub n_total: usize,
    pub unique_secs: f64,
    pub full_secs: f64,
    pub speedup: f64,
    pub theta_unique: Vec<f64>,
    pub theta_full: Vec<f64>,
    pub g_unique: f64,
    pub g_full: f64,
    pub iterations_unique: usize,
    pub iterations_full: usize,
}

impl WoodburyReport {
    /// Largest relative lengthscale difference between the two paths.
    pub fn theta_rel_diff(&self) -> f64 {
        self.theta_unique
            .iter()
            .zip(&self.theta_full)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()))
            .fold(0.0, f64::max)
    }
}

/// `n` LHS sites on `[-2, 4]^2` with `Unif{1..max_reps}` replicates each and
/// observations of the 2-d test function plus its noise.
pub fn woodbury_data(n: usize, max_reps: usize, seed: u64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    use crate::sims::testfns::TestFunction;
    use rand::Rng;
    use rand_distr::StandardNormal;

    let f = TestFunction::Gramacy2d;
    let mut rng = stream_rng(seed, 0);
    let u = crate::sims::lhs(n, 2, &mut rng);
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for i in 0..n {
        let xi = [-2.0 + 6.0 * u[(i, 0)], -2.0 + 6.0 * u[(i, 1)]];
        let a = rng.random_range(1..=max_reps);
        let mean = f.eval(&xi)?;
        let sd = f.noise_sd(&xi)?;
        for _ in 0..a {
            rows.extend_from_slice(&xi);
            ys.push(mean + sd * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok((
        DMatrix::from_row_slice(ys.len(), 2, &rows),
        DVector::from_vec(ys),
    ))
}

/// Fits the same model on the replicated design and on the raw rows treated
/// as distinct sites.
pub fn woodbury_bench(
    n: usize,
    max_reps: usize,
    seed: u64,
    max_iter: usize,
) -> Result<WoodburyReport> {
    let (x, y) = woodbury_data(n, max_reps, seed)?;
    let unique = find_reps(&x, &y, 0.0)?;
    let full = ReplicatedDesign::unreplicated(x, y)?;
    let eps = f64::EPSILON.sqrt();
    let opts = |d: &ReplicatedDesign| {
        let (_, hi) = crate::hom::default_bounds(d, KernelFamily::SquaredExponential);
        HomFitOptions {
            lower: Some(vec![eps, eps, eps]),
            upper: Some(vec![10.0, 10.0, hi[2]]),
            max_iter,
            ..HomFitOptions::default()
        }
    };
    let (mu, unique_secs) = timed(|| hom_fit(&unique, &opts(&unique)));
    let mu = mu?;
    let (mf, full_secs) = timed(|| hom_fit(&full, &opts(&full)));
    let mf = mf?;
    let iters = |m: &HomModel| m.info().map_or(0, |i| i.iterations);
    Ok(WoodburyReport {
        seed,
        n_unique: unique.n_unique(),
        n_total: unique.n_total(),
        unique_secs,
        full_secs,
        speedup: full_secs / unique_secs,
        theta_unique: mu.theta().to_vec(),
        theta_full: mf.theta().to_vec(),
        g_unique: mu.g(),
        g_full: mf.g(),
        iterations_unique: iters(&mu),
        iterations_full: iters(&mf),
    })
}

/// Final joint objective from the priming start and from random starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub seed: u64,
    /// Negative joint log-likelihood reached from the priming start.
    pub default_nll: f64,
    /// Same from each uniform start; `None` when that fit failed.
    pub random_nll: Vec<Option<f64>>,
}

impl InitReport {
    /// Random starts that the priming start matches or beats (failed fits count).
    pub fn wins(&self) -> usize {
        self.random_nll
            .iter()
            .filter(|r| r.is_none_or(|v| self.default_nll <= v))
            .count()
    }
}

/// Compares the priming start against `restarts` starts drawn uniformly in
/// the optimizer box; start `r` uses stream `r` of `seed`.
pub fn init_robustness(
    design: &ReplicatedDesign,
    settings: &HetSettings,
    restarts: usize,
    seed: u64,
) -> Result<InitReport> {
    use crate::het::{het_fit_from, het_init};
    use rand::Rng;

    let settings = HetSettings {
        allow_fallback: false,
        ..settings.clone()
    };
    let start = het_init(design, &settings)?;
    let x0 = start.pack(&start.params);
    let default_nll = het_fit_from(design, &start, &x0, &settings)?.joint_nll();
    let random_nll = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64);
            let x: Vec<f64> = start
                .lower
                .iter()
                .zip(&start.upper)
                .map(|(l, u)| rng.random_range(*l..=*u))
                .collect();
            het_fit_from(design, &start, &x, &settings)
                .ok()
                .map(|m| m.joint_nll())
        })
        .collect();
    Ok(InitReport {
        seed,
        default_nll,
        random_nll,
    })
}

/// Largest-remainder split of `m` items over `weights`; ties go to later entries.
pub fn allocate(m: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * m as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(b.cmp(&a))
    });
    let left = m - counts.iter().sum::<usize>();
    for &k in order.iter().take(left) {
        counts[k] += 1;
    }
    counts
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SirConfig {
    /// Grid points per axis.
    pub grid: usize,
    pub reference_reps: usize,
    /// Replicate counts for interior sites and their relative frequencies.
    pub rep_levels: Vec<usize>,
    pub rep_weights: Vec<f64>,
    /// Replicates at the `I = 0` boundary.
    pub boundary_reps: usize,
    pub family: KernelFamily,
    pub seed: u64,
}

impl Default for SirConfig {
    fn default() -> Self {
        Self {
            grid: 15,
            reference_reps: 1000,
            rep_levels: vec![5, 10, 50, 100],
            rep_weights: vec![500.0, 250.0, 150.0, 100.0],
            boundary_reps: 100,
            family: KernelFamily::SquaredExponential,
            seed: 1,
        }
    }
}

/// One grid site of the SIR comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SirSite {
    pub s0: u64,
    pub i0: u64,
    pub mult: usize,
    /// Empirical mean and sd over all reference replicates.
    pub ref_mean: f64,
    pub ref_sd: f64,
    /// Empirical mean and variance of the replicates not used for training.
    pub heldout_mean: f64,
    pub heldout_var: f64,
    pub het_mean: f64,
    pub het_sd: f64,
    pub het_var: f64,
    pub sk_mean: f64,
    pub sk_sd: f64,
    pub sk_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SirReport {
    pub config: SirConfig,
    pub sites: Vec<SirSite>,
    /// Largest predicted noise sd on the `I = 0` row over the largest on the grid.
    pub boundary_ratio: f64,
    pub rank_corr_het: f64,
    pub rank_corr_sk: f64,
    /// Mean expected score over sites with `I > 0`.
    pub score_het: f64,
    pub score_sk: f64,
    pub het_fallback: bool,
    pub max_ref_sd: f64,
}

/// Expected proper score when the truth has the given mean and variance.
fn expected_score(ref_mean: f64, ref_var: f64, mean: f64, var: f64) -> f64 {
    -((ref_mean - mean).powi(2) + ref_var) / var - var.ln()
}

/// Grid design over `S in [1200, 1800]`, `I in [0, 200]` with inputs scaled to
/// the unit square; het and SK fits on a replicate subset, scored against the
/// reference Monte Carlo.
pub fn sir_recovery(cfg: &SirConfig) -> Result<SirReport> {
    use crate::sims::sir::{sir_replicates, SirParams, SirState};
    use rand::Rng;

    if cfg.grid < 2 || cfg.rep_levels.len() != cfg.rep_weights.len() {
        return Err(Error::InvalidParameter("bad SIR configuration".into()));
    }
    let need = cfg
        .rep_levels
        .iter()
        .copied()
        .max()
        .unwrap_or(0)
        .max(cfg.boundary_reps);
    if cfg.reference_reps <= need {
        return Err(Error::InvalidParameter(format!(
            "reference replicates must exceed the largest training count {need}"
        )));
    }
    let params = SirParams::default();
    let g = cfg.grid;
    let step =
        |k: usize, lo: f64, hi: f64| (lo + (hi - lo) * k as f64 / (g - 1) as f64).round() as u64;
    let mut sites: Vec<(u64, u64)> = Vec::with_capacity(g * g);
    for i in 0..g {
        for s in 0..g {
            sites.push((step(s, 1200.0, 1800.0), step(i, 0.0, 200.0)));
        }
    }
    let interior: Vec<usize> = (0..sites.len()).filter(|&k| sites[k].1 > 0).collect();
    let counts = allocate(interior.len(), &cfg.rep_weights);
    let mut order = interior.clone();
    order.shuffle(&mut stream_rng(cfg.seed, u64::MAX));
    let mut mult = vec![cfg.boundary_reps; sites.len()];
    let mut pos = 0;
    for (level, &c) in cfg.rep_levels.iter().zip(&counts) {
        for &k in &order[pos..pos + c] {
            mult[k] = *level;
        }
        pos += c;
    }

    let draws: Vec<Vec<u64>> = sites
        .iter()
        .enumerate()
        .map(|(k, &(s0, i0))| {
            let seed = stream_rng(cfg.seed, k as u64).random::<u64>();
            let init = SirState::new(s0, i0, params.m - s0 - i0);
            sir_replicates(&params, init, cfg.reference_reps, seed)
        })
        .collect::<Result<_>>()?;

    let scale = |s0: u64, i0: u64| [(s0 as f64 - 1200.0) / 600.0, i0 as f64 / 200.0];
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for (k, &(s0, i0)) in sites.iter().enumerate() {
        let x = scale(s0, i0);
        for &v in &draws[k][..mult[k]] {
            rows.extend_from_slice(&x);
            ys.push(v as f64);
        }
    }
    let design = find_reps(
        &DMatrix::from_row_slice(ys.len(), 2, &rows),
        &DVector::from_vec(ys),
        0.0,
    )?;
    let xg = DMatrix::from_fn(sites.len(), 2, |r, c| scale(sites[r].0, sites[r].1)[c]);
    let het = het_fit(&design, &HetSettings::new(cfg.family))?;
    log::debug!(
        "sir het fit: theta {:?} phi {:?} g {} info {:?}",
        het.theta(),
        het.phi(),
        het.g(),
        het.info()
    );
    let sk = sk_fit(
        &design,
        &SkFitOptions {
            family: cfg.family,
            ..SkFitOptions::default()
        },
    )?;
    let ph = het.predict(&xg)?;
    let ps = sk.predict(&xg)?;

    let mut out = Vec::with_capacity(sites.len());
    for (k, &(s0, i0)) in sites.iter().enumerate() {
        let all: Vec<f64> = draws[k].iter().map(|&v| v as f64).collect();
        let (ref_mean, ref_var) = sample_mean_var(&all);
        let (heldout_mean, heldout_var) = sample_mean_var(&all[mult[k]..]);
        out.push(SirSite {
            s0,
            i0,
            mult: mult[k],
            ref_mean,
            ref_sd: ref_var.sqrt(),
            heldout_mean,
            heldout_var,
            het_mean: ph.mean[k],
            het_sd: ph.nugs[k].sqrt(),
            het_var: ph.sd2[k] + ph.nugs[k],
            sk_mean: ps.mean[k],
            sk_sd: ps.nugs[k].sqrt(),
            sk_var: ps.sd2[k] + ps.nugs[k],
        });
    }
    let max_het = out.iter().map(|s| s.het_sd).fold(0.0, f64::max);
    let max_boundary = out
        .iter()
        .filter(|s| s.i0 == 0)
        .map(|s| s.het_sd)
        .fold(0.0, f64::max);
    let ref_sd: Vec<f64> = out.iter().map(|s| s.ref_sd).collect();
    let het_sd: Vec<f64> = out.iter().map(|s| s.het_sd).collect();
    let sk_sd: Vec<f64> = out.iter().map(|s| s.sk_sd).collect();
    // the I = 0 reference is a point mass, where the score is unbounded
    let scored: Vec<&SirSite> = out.iter().filter(|s| s.i0 > 0).collect();
    let m = scored.len() as f64;
    let score_het = scored
        .iter()
        .map(|s| expected_score(s.heldout_mean, s.heldout_var, s.het_mean, s.het_var))
        .sum::<f64>()
        / m;
    let score_sk = scored
        .iter()
        .map(|s| expected_score(s.heldout_mean, s.heldout_var, s.sk_mean, s.sk_var))
        .sum::<f64>()
        / m;
    Ok(SirReport {
        config: cfg.clone(),
        boundary_ratio: max_boundary / max_het,
        rank_corr_het: spearman(&het_sd, &ref_sd),
        rank_corr_sk: spearman(&sk_sd, &ref_sd),
        score_het,
        score_sk,
        het_fallback: het.fallback(),
        max_ref_sd: ref_sd.iter().copied().fold(0.0, f64::max),
        sites: out,
    })
}

/// Mean and unbiased variance.
fn sample_mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackRun {
    pub dataset: usize,
    pub fallback: bool,
    pub nlpd_het: f64,
    pub nlpd_hom: f64,
    /// Mean-field log-likelihood gain of the het fit over the hom fit.
    pub loglik_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackConfig {
    pub datasets: usize,
    pub n: usize,
    pub reps: usize,
    pub test: usize,
    pub theta: f64,
    pub noise_var: f64,
    pub seed: u64,
}

impl Default for FallbackConfig {
    fn default() -> Self {
        Self {
            datasets: 20,
            n: 40,
            reps: 2,
            test: 100,
            theta: 0.05,
            noise_var: 0.1,
            seed: 1,
        }
    }
}

/// Draws from a unit-scale homoskedastic GP on `[0, 1]`, jointly at training
/// and test inputs, then compares het and hom fits on held-out NLPD.
pub fn fallback_study(cfg: &FallbackConfig) -> Result<Vec<FallbackRun>> {
    use crate::kernel::KernelSpec;
    use crate::linalg::SpdFactor;
    use rand::Rng;
    use rand_distr::StandardNormal;

    let kernel = KernelSpec::new(KernelFamily::SquaredExponential, vec![cfg.theta])?;
    (0..cfg.datasets)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(cfg.seed, k as u64);
            let xs = crate::sims::lhs(cfg.n, 1, &mut rng);
            let xt = DMatrix::from_fn(cfg.test, 1, |_, _| rng.random::<f64>());
            let all = DMatrix::from_fn(cfg.n + cfg.test, 1, |r, _| {
                if r < cfg.n {
                    xs[(r, 0)]
                } else {
                    xt[(r - cfg.n, 0)]
                }
            });
            let f = SpdFactor::new(kernel.corr_matrix_sym(&all)?)?;
            let z = DVector::from_fn(all.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let latent = f.lower_mul(&z);
            let sd = cfg.noise_var.sqrt();
            let mut rows = Vec::new();
            let mut ys = Vec::new();
            for i in 0..cfg.n {
                for _ in 0..cfg.reps {
                    rows.push(xs[(i, 0)]);
                    ys.push(latent[i] + sd * rng.sample::<f64, _>(StandardNormal));
                }
            }
            let yt: Vec<f64> = (0..cfg.test)
                .map(|j| latent[cfg.n + j] + sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let design = find_reps(
                &DMatrix::from_column_slice(ys.len(), 1, &rows),
                &DVector::from_vec(ys),
                0.0,
            )?;
            let het = het_fit(&design, &HetSettings::default())?;
            let nl = |p: &Prediction| -> Result<f64> {
                Ok(nlpd(&EvalSet::from_prediction(yt.clone(), p)?))
            };
            Ok(FallbackRun {
                dataset: k,
                fallback: het.fallback(),
                nlpd_het: nl(&het.predict(&xt)?)?,
                nlpd_hom: nl(&het.hom().predict(&xt)?)?,
                loglik_gain: het.hom().nll() - het.mean_field_nll(),
            })
        })
        .collect()
}
