//! `hetgp` command-line driver.
//!
//! Every command writes its artifacts plus a `manifest.json` into `--out`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, ValueEnum};
use hetgp::experiments::{
    cross_validate, fit_model, init_robustness, sir_recovery, summarize, woodbury_bench, FitSpec,
    Fitted, ModelKind, SirConfig,
};
use hetgp::oracle::identity_suite;
use hetgp::sims::data::motorcycle_raw;
use hetgp::{find_reps, Error, HetSettings, KernelFamily};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Value};

const EXIT_VALIDATION: u8 = 2;
const EXIT_CONVERGENCE: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    Fit,
    Predict,
    BenchMotorcycle,
    BenchWoodbury,
    BenchInit,
    SirDemo,
    IdentityCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Kernel {
    Sqexp,
    Matern52,
}

impl From<Kernel> for KernelFamily {
    fn from(k: Kernel) -> Self {
        match k {
            Kernel::Sqexp => KernelFamily::SquaredExponential,
            Kernel::Matern52 => KernelFamily::Matern52,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Model {
    Hom,
    Het,
    Sk,
}

impl From<Model> for ModelKind {
    fn from(m: Model) -> Self {
        match m {
            Model::Hom => ModelKind::Hom,
            Model::Het => ModelKind::Het,
            Model::Sk => ModelKind::Sk,
        }
    }
}

/// Fit, predict and benchmark Gaussian process surrogates for replicated
/// stochastic simulations.
#[derive(Debug, Parser, Serialize)]
#[command(name = "hetgp", version)]
struct RunConfig {
    #[arg(long, value_enum)]
    command: Command,
    /// Input CSV with a header row: `fit` and the benchmarks take input
    /// columns plus a response column, `predict` takes input columns only.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Model JSON written by `fit`, read by `predict`.
    #[arg(long)]
    model_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sqexp")]
    kernel: Kernel,
    /// Model type for `fit`; `bench-motorcycle` compares hom and het when unset.
    #[arg(long, value_enum)]
    model: Option<Model>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    splits: usize,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Lower lengthscale bounds, one per input dimension.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    lower: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    upper: Option<Vec<f64>>,
    #[arg(long, default_value_t = 100)]
    restarts: usize,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_IO,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => EXIT_IO,
            Error::Csv(c) if c.is_io_error() => EXIT_IO,
            Error::Json(j) if j.is_io() => EXIT_IO,
            Error::Optimizer { .. } | Error::NotPositiveDefinite { .. } => EXIT_CONVERGENCE,
            _ => EXIT_VALIDATION,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// What a command produced: file names relative to `--out` and a summary.
struct Outcome {
    files: Vec<String>,
    summary: Value,
    /// Exit code when the command ran but its check failed.
    code: u8,
}

impl Outcome {
    fn ok(files: Vec<String>, summary: Value) -> Self {
        Self {
            files,
            summary,
            code: 0,
        }
    }
}

fn main() -> ExitCode {
    let cfg = RunConfig::parse();
    let start = Instant::now();
    if let Err(e) = fs::create_dir_all(&cfg.out) {
        eprintln!("error: {}", Failure::io(&cfg.out, e).message);
        return ExitCode::from(EXIT_IO);
    }
    let result = run(&cfg);
    let wall = start.elapsed().as_secs_f64();
    let (code, manifest) = match &result {
        Ok(o) => (
            o.code,
            json!({"status": if o.code == 0 { "ok" } else { "check_failed" },
                   "outputs": o.files, "summary": o.summary}),
        ),
        Err(f) => (
            f.code,
            json!({"status": "error", "exit_code": f.code, "error": f.message}),
        ),
    };
    let mut manifest = manifest;
    manifest["config"] = json!(cfg);
    manifest["versions"] = json!({"hetgp": hetgp::VERSION, "hetgp-cli": env!("CARGO_PKG_VERSION")});
    manifest["wall_secs"] = json!(wall);
    let path = cfg.out.join("manifest.json");
    let written = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Failure::io(&path, e))
        .and_then(|s| fs::write(&path, s + "\n").map_err(|e| Failure::io(&path, e)));
    if let Err(f) = &result {
        eprintln!("error: {}", f.message);
    }
    if let Err(f) = written {
        eprintln!("error: {}", f.message);
        if code == 0 {
            return ExitCode::from(EXIT_IO);
        }
    }
    ExitCode::from(code)
}

fn run(cfg: &RunConfig) -> CliResult<Outcome> {
    check_bounds(cfg)?;
    match cfg.command {
        Command::Fit => fit(cfg),
        Command::Predict => predict(cfg),
        Command::BenchMotorcycle => bench_motorcycle(cfg),
        Command::BenchWoodbury => bench_woodbury(cfg),
        Command::BenchInit => bench_init(cfg),
        Command::SirDemo => sir_demo(cfg),
        Command::IdentityCheck => identity_check(cfg),
    }
}

fn check_bounds(cfg: &RunConfig) -> CliResult<()> {
    for v in cfg.lower.iter().chain(&cfg.upper).flatten() {
        if !(v.is_finite() && *v > 0.0) {
            return Err(Failure::validation(format!(
                "lengthscale bound {v} must be positive"
            )));
        }
    }
    if let (Some(l), Some(u)) = (&cfg.lower, &cfg.upper) {
        if l.len() != u.len() || l.iter().zip(u).any(|(a, b)| a > b) {
            return Err(Failure::validation(
                "--lower and --upper must match and be ordered",
            ));
        }
    }
    if cfg.max_iter == 0 {
        return Err(Failure::validation("--max-iter must be positive"));
    }
    Ok(())
}

fn spec(cfg: &RunConfig, kind: ModelKind) -> FitSpec {
    FitSpec {
        max_iter: cfg.max_iter,
        lower: cfg.lower.clone(),
        upper: cfg.upper.clone(),
        ..FitSpec::new(kind, cfg.kernel.into())
    }
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Failure::validation(format!("{flag} is required for this command")))
}

/// Raw `(x, y)` from `--data`, or the bundled motorcycle data.
fn xy_or_motorcycle(cfg: &RunConfig) -> CliResult<(DMatrix<f64>, DVector<f64>)> {
    Ok(match &cfg.data {
        Some(p) => hetgp::design::read_xy_csv(p)?,
        None => motorcycle_raw()?,
    })
}

fn write_csv(
    cfg: &RunConfig,
    name: &str,
    header: &[String],
    rows: &[Vec<String>],
) -> CliResult<String> {
    let path = cfg.out.join(name);
    let io = |e: csv::Error| Failure::io(&path, e);
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush().map_err(|e| Failure::io(&path, e))?;
    Ok(name.to_string())
}

fn write_json(cfg: &RunConfig, name: &str, text: &str) -> CliResult<String> {
    let path = cfg.out.join(name);
    fs::write(&path, text).map_err(|e| Failure::io(&path, e))?;
    Ok(name.to_string())
}

fn headers(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn num(v: f64) -> String {
    v.to_string()
}

fn fit(cfg: &RunConfig) -> CliResult<Outcome> {
    let path = require(&cfg.data, "--data")?;
    let kind: ModelKind = cfg.model.unwrap_or(Model::Het).into();
    let design = hetgp::ReplicatedDesign::from_csv(path)?;
    let model = fit_model(&design, &spec(cfg, kind))?;
    let name = cfg
        .model_file
        .as_ref()
        .and_then(|p| p.file_name())
        .map_or("model.json".into(), |s| s.to_string_lossy().into_owned());
    let file = write_json(cfg, &name, &model.to_json()?)?;
    Ok(Outcome::ok(
        vec![file],
        json!({"model": kind, "n_unique": design.n_unique(), "n_total": design.n_total(),
               "fallback": model.fallback()}),
    ))
}

fn read_inputs(path: &Path) -> CliResult<DMatrix<f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Failure::io(path, e))?;
    let d = rdr.headers().map_err(|e| Failure::io(path, e))?.len();
    let mut vals = Vec::new();
    let mut n = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Failure::validation(format!("{} row {}: `{field}`", path.display(), line + 2))
            })?;
            vals.push(v);
        }
        n += 1;
    }
    if n == 0 || d == 0 {
        return Err(Failure::validation(format!(
            "{}: no prediction inputs",
            path.display()
        )));
    }
    Ok(DMatrix::from_row_slice(n, d, &vals))
}

fn predict(cfg: &RunConfig) -> CliResult<Outcome> {
    let mpath = require(&cfg.model_file, "--model-file")?;
    let text = fs::read_to_string(mpath).map_err(|e| Failure::io(mpath, e))?;
    let model = Fitted::from_json(&text)?;
    let x = read_inputs(require(&cfg.data, "--data")?)?;
    let p = model.predict(&x)?;
    let mut header: Vec<String> = (1..=x.ncols()).map(|k| format!("x{k}")).collect();
    header.extend(headers(&["mean", "sd2", "nugs"]));
    let rows: Vec<Vec<String>> = (0..x.nrows())
        .map(|i| {
            let mut r: Vec<String> = x.row(i).iter().map(|&v| num(v)).collect();
            r.extend([num(p.mean[i]), num(p.sd2[i]), num(p.nugs[i])]);
            r
        })
        .collect();
    let file = write_csv(cfg, "predictions.csv", &header, &rows)?;
    Ok(Outcome::ok(
        vec![file],
        json!({"model": model.kind(), "points": x.nrows()}),
    ))
}

fn bench_motorcycle(cfg: &RunConfig) -> CliResult<Outcome> {
    if cfg.splits == 0 {
        return Err(Failure::validation("--splits must be positive"));
    }
    let (x, y) = xy_or_motorcycle(cfg)?;
    let kinds: Vec<ModelKind> = match cfg.model {
        Some(m) => vec![m.into()],
        None => vec![ModelKind::Hom, ModelKind::Het],
    };
    let specs: Vec<FitSpec> = kinds.iter().map(|&k| spec(cfg, k)).collect();
    let rows = cross_validate(&x, &y, &specs, cfg.splits, cfg.seed)?;
    let split_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.split.to_string(),
                r.model.to_string(),
                num(r.nmse),
                num(r.nlpd),
                num(r.score),
                r.fallback.to_string(),
            ]
        })
        .collect();
    let f1 = write_csv(
        cfg,
        "cv_splits.csv",
        &headers(&["split", "model", "nmse", "nlpd", "score", "fallback"]),
        &split_rows,
    )?;
    let sums: Vec<_> = kinds.iter().map(|&k| summarize(&rows, k)).collect();
    let sum_rows: Vec<Vec<String>> = sums
        .iter()
        .map(|s| {
            vec![
                s.model.to_string(),
                s.splits.to_string(),
                num(s.nmse_mean),
                num(s.nmse_sd),
                num(s.nlpd_mean),
                num(s.nlpd_sd),
                num(s.score_mean),
                num(s.fallback_rate),
            ]
        })
        .collect();
    let f2 = write_csv(
        cfg,
        "cv_summary.csv",
        &headers(&[
            "model",
            "splits",
            "nmse_mean",
            "nmse_sd",
            "nlpd_mean",
            "nlpd_sd",
            "score_mean",
            "fallback_rate",
        ]),
        &sum_rows,
    )?;
    Ok(Outcome::ok(vec![f1, f2], json!(sums)))
}

fn bench_woodbury(cfg: &RunConfig) -> CliResult<Outcome> {
    let r = woodbury_bench(100, 50, cfg.seed, cfg.max_iter)?;
    let row = |path: &str, theta: &[f64], g: f64, it: usize| {
        vec![
            path.into(),
            num(theta[0]),
            num(theta[1]),
            num(g),
            it.to_string(),
        ]
    };
    let f1 = write_csv(
        cfg,
        "woodbury.csv",
        &headers(&["path", "theta1", "theta2", "g", "iterations"]),
        &[
            row("unique", &r.theta_unique, r.g_unique, r.iterations_unique),
            row("full", &r.theta_full, r.g_full, r.iterations_full),
        ],
    )?;
    let text = serde_json::to_string_pretty(&r).map_err(Error::from)?;
    let f2 = write_json(cfg, "woodbury_timing.json", &text)?;
    Ok(Outcome::ok(
        vec![f1, f2],
        json!({"n_unique": r.n_unique, "n_total": r.n_total, "unique_secs": r.unique_secs,
               "full_secs": r.full_secs, "speedup": r.speedup,
               "theta_rel_diff": r.theta_rel_diff()}),
    ))
}

fn bench_init(cfg: &RunConfig) -> CliResult<Outcome> {
    let (x, y) = xy_or_motorcycle(cfg)?;
    let design = find_reps(&x, &y, 0.0)?;
    let settings = HetSettings {
        max_iter: cfg.max_iter,
        theta_lower: cfg.lower.clone(),
        theta_upper: cfg.upper.clone(),
        ..HetSettings::new(cfg.kernel.into())
    };
    let r = init_robustness(&design, &settings, cfg.restarts, cfg.seed)?;
    let mut rows = vec![vec!["default".into(), num(r.default_nll), "true".into()]];
    for (k, v) in r.random_nll.iter().enumerate() {
        rows.push(vec![
            k.to_string(),
            v.map_or(String::new(), num),
            v.is_none_or(|v| r.default_nll <= v).to_string(),
        ]);
    }
    let f = write_csv(
        cfg,
        "init.csv",
        &headers(&["start", "nll", "default_at_least_as_good"]),
        &rows,
    )?;
    Ok(Outcome::ok(
        vec![f],
        json!({"restarts": cfg.restarts, "default_nll": r.default_nll, "wins": r.wins(),
               "failed": r.random_nll.iter().filter(|v| v.is_none()).count()}),
    ))
}

fn sir_demo(cfg: &RunConfig) -> CliResult<Outcome> {
    let r = sir_recovery(&SirConfig {
        family: cfg.kernel.into(),
        seed: cfg.seed,
        ..SirConfig::default()
    })?;
    let rows: Vec<Vec<String>> = r
        .sites
        .iter()
        .map(|s| {
            vec![
                s.s0.to_string(),
                s.i0.to_string(),
                s.mult.to_string(),
                num(s.ref_mean),
                num(s.ref_sd),
                num(s.het_mean),
                num(s.het_sd),
                num(s.sk_mean),
                num(s.sk_sd),
            ]
        })
        .collect();
    let f = write_csv(
        cfg,
        "sir_sites.csv",
        &headers(&[
            "s0", "i0", "mult", "ref_mean", "ref_sd", "het_mean", "het_sd", "sk_mean", "sk_sd",
        ]),
        &rows,
    )?;
    Ok(Outcome::ok(
        vec![f],
        json!({"boundary_ratio": r.boundary_ratio, "rank_corr_het": r.rank_corr_het,
               "rank_corr_sk": r.rank_corr_sk, "score_het": r.score_het, "score_sk": r.score_sk,
               "het_fallback": r.het_fallback, "max_ref_sd": r.max_ref_sd}),
    ))
}

fn identity_check(cfg: &RunConfig) -> CliResult<Outcome> {
    let r = identity_suite(cfg.seed, 100, 1e-10)?;
    let text = serde_json::to_string_pretty(&r).map_err(Error::from)?;
    let f = write_json(cfg, "identity.json", &text)?;
    let failed = r.checks.iter().filter(|c| !c.pass).count();
    Ok(Outcome {
        files: vec![f],
        summary: json!({"checks": r.checks.len(), "failed": failed, "all_pass": r.all_pass()}),
        code: if r.all_pass() { 0 } else { 1 },
    })
}
