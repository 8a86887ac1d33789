//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use hetgp::experiments::{
    cross_validate, fallback_study, init_robustness, sir_recovery, summarize, woodbury_bench,
    FallbackConfig, FitSpec, ModelKind, SirConfig,
};
use hetgp::het::het_eval;
use hetgp::linalg::SpdFactor;
use hetgp::oracle::identity_suite;
use hetgp::sims::stream_rng;
use hetgp::{
    find_reps, het_njll, het_njll_grad, hom_nll, hom_nll_grad, HetSettings, KernelFamily,
    KernelSpec, ReplicatedDesign,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: &str, name: &str, started: Instant, out: Result<Outcome, String>) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match out {
        Ok(o) => {
            let tag = if o.pass { "PASS" } else { "FAIL" };
            println!("{tag} [{id}] {name}: {} ({secs:.1}s)", o.detail);
            o.pass
        }
        Err(e) => {
            println!("FAIL [{id}] {name}: error {e} ({secs:.1}s)");
            false
        }
    }
}

fn family(rng: &mut impl Rng) -> KernelFamily {
    if rng.random_bool(0.5) {
        KernelFamily::SquaredExponential
    } else {
        KernelFamily::Matern52
    }
}

/// Replicated design with `n <= 10` sites in `[0, 1]^d`, `d <= 2`.
fn random_design(rng: &mut impl Rng) -> ReplicatedDesign {
    let d = rng.random_range(1..=2);
    let n = rng.random_range(2..=10);
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let centre = rng.random_range(-1.0..1.0);
        for _ in 0..rng.random_range(1..=4) {
            rows.extend_from_slice(&x);
            ys.push(centre + rng.random_range(-0.5..0.5));
        }
    }
    find_reps(
        &DMatrix::from_row_slice(ys.len(), d, &rows),
        &DVector::from_vec(ys),
        0.0,
    )
    .expect("valid random design")
}

fn lengthscales(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(0.2..1.5)).collect()
}

/// Worst `|fd - analytic| / max(|fd|, |analytic|, 1)` over components.
fn fd_worst(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..x.len() {
        let h = 1e-6 * x[j].abs().max(1.0);
        let mut up = x.to_vec();
        let mut dn = x.to_vec();
        up[j] += h;
        dn[j] -= h;
        let fd = (f(&up) - f(&dn)) / (2.0 * h);
        let scale = fd.abs().max(analytic[j].abs()).max(1.0);
        worst = worst.max((fd - analytic[j]).abs() / scale);
    }
    worst
}

fn criterion_1() -> Result<Outcome, String> {
    let rep = identity_suite(1, 100, 1e-10).map_err(|e| e.to_string())?;
    let fails = rep.checks.iter().filter(|c| !c.pass).count();
    Ok(Outcome {
        pass: rep.all_pass(),
        detail: format!(
            "{} checks on 100 instances, {fails} above 1e-10; max rel err nll {:.1e}, mean {:.1e}, var {:.1e}",
            rep.checks.len(),
            rep.max_rel_err("nll"),
            rep.max_rel_err("pred_mean"),
            rep.max_rel_err("pred_var")
        ),
    })
}

fn criterion_2() -> Result<Outcome, String> {
    let mut rng = stream_rng(2, 0);
    let (mut worst_hom, mut worst_het) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let design = random_design(&mut rng);
        let d = design.dim();
        let fam = family(&mut rng);

        let mut x = lengthscales(&mut rng, d);
        x.push(rng.random_range(0.01..1.0));
        let k = KernelSpec::new(fam, x[..d].to_vec()).map_err(|e| e.to_string())?;
        let an = hom_nll_grad(&k, x[d], &design).map_err(|e| e.to_string())?;
        worst_hom = worst_hom.max(fd_worst(&x, &an, |p| {
            hom_nll(
                &KernelSpec::new(fam, p[..d].to_vec()).unwrap(),
                p[d],
                &design,
            )
            .unwrap()
        }));

        let mut x = lengthscales(&mut rng, d);
        x.extend(lengthscales(&mut rng, d));
        x.push(rng.random_range(0.05..1.0));
        x.extend((0..design.n_unique()).map(|_| rng.random_range(-2.0..1.0)));
        let split = |p: &[f64]| {
            (
                KernelSpec::new(fam, p[..d].to_vec()).unwrap(),
                KernelSpec::new(fam, p[d..2 * d].to_vec()).unwrap(),
                p[2 * d],
                DVector::from_column_slice(&p[2 * d + 1..]),
            )
        };
        let (km, kn, g, delta) = split(&x);
        let an = het_njll_grad(&km, &kn, g, &delta, &design).map_err(|e| e.to_string())?;
        worst_het = worst_het.max(fd_worst(&x, &an, |p| {
            let (km, kn, g, delta) = split(p);
            het_njll(&km, &kn, g, &delta, &design).unwrap()
        }));
    }
    Ok(Outcome {
        pass: worst_hom < 1e-5 && worst_het < 1e-5,
        detail: format!(
            "20 instances; worst relative error hom {worst_hom:.1e}, het {worst_het:.1e} (tol 1e-5)"
        ),
    })
}

fn criterion_3() -> Result<Outcome, String> {
    let mut rng = stream_rng(3, 0);
    let gs = [0.0, 0.01, 0.1, 1.0];
    let mut violations = 0;
    let mut min_step = f64::INFINITY;
    for _ in 0..20 {
        let design = random_design(&mut rng);
        let d = design.dim();
        let fam = family(&mut rng);
        let km = KernelSpec::new(fam, lengthscales(&mut rng, d)).map_err(|e| e.to_string())?;
        let phi = (0..d).map(|_| rng.random_range(0.1..0.6)).collect();
        let kn = KernelSpec::new(fam, phi).map_err(|e| e.to_string())?;
        let n = design.n_unique();
        let target = DVector::from_fn(n, |_, _| rng.random_range(-2.0..1.0));
        let mut c = kn.corr_matrix_sym(design.x0()).map_err(|e| e.to_string())?;
        c += DMatrix::identity(n, n) * hetgp::het::LATENT_NUGGET;
        let c_inv_target = SpdFactor::new(c.clone())
            .map_err(|e| e.to_string())?
            .solve(&target);
        let mut prev: Option<f64> = None;
        for &g in &gs {
            let mut ups = c.clone();
            for (i, &a) in design.mult().iter().enumerate() {
                ups[(i, i)] += g / a as f64;
            }
            let delta = &ups * &c_inv_target;
            let nll = het_eval(&km, &kn, g, &delta, &design, false)
                .map_err(|e| e.to_string())?
                .nll;
            if let Some(p) = prev {
                // the log-likelihood must drop strictly once g > 0
                if nll <= p {
                    violations += 1;
                }
                min_step = min_step.min(nll - p);
            }
            prev = Some(nll);
        }
    }
    Ok(Outcome {
        pass: violations == 0,
        detail: format!(
            "20 instances, g in {gs:?}: {violations} non-monotone steps; smallest objective increase {min_step:.2e}"
        ),
    })
}

fn criterion_4() -> Result<Outcome, String> {
    let (x, y) = hetgp::sims::data::motorcycle_raw().map_err(|e| e.to_string())?;
    let specs = [
        FitSpec::new(ModelKind::Het, KernelFamily::SquaredExponential),
        FitSpec::new(ModelKind::Hom, KernelFamily::SquaredExponential),
    ];
    let rows = cross_validate(&x, &y, &specs, 300, 1).map_err(|e| e.to_string())?;
    let het = summarize(&rows, ModelKind::Het);
    let hom = summarize(&rows, ModelKind::Hom);
    let pass = (3.9..=4.6).contains(&het.nlpd_mean)
        && (0.18..=0.38).contains(&het.nmse_mean)
        && (4.3..=4.9).contains(&hom.nlpd_mean);
    Ok(Outcome {
        pass,
        detail: format!(
            "300 splits; het NLPD {:.3} ± {:.3} in [3.9, 4.6], het NMSE {:.3} ± {:.3} in [0.18, 0.38], hom NLPD {:.3} ± {:.3} in [4.3, 4.9]",
            het.nlpd_mean, het.nlpd_sd, het.nmse_mean, het.nmse_sd, hom.nlpd_mean, hom.nlpd_sd
        ),
    })
}

fn criterion_5() -> Result<Outcome, String> {
    let r = woodbury_bench(100, 50, 1, 100).map_err(|e| e.to_string())?;
    let diff = r.theta_rel_diff();
    Ok(Outcome {
        pass: r.speedup >= 50.0 && diff < 5e-4,
        detail: format!(
            "n = {}, N = {}; unique {:.3}s vs full {:.1}s, speedup {:.0}x (>= 50); theta {:.6?} vs {:.6?}, rel diff {diff:.1e} (< 5e-4)",
            r.n_unique, r.n_total, r.unique_secs, r.full_secs, r.speedup, r.theta_unique, r.theta_full
        ),
    })
}

fn criterion_6() -> Result<Outcome, String> {
    let design = hetgp::sims::data::motorcycle().map_err(|e| e.to_string())?;
    let r = init_robustness(&design, &HetSettings::default(), 100, 1).map_err(|e| e.to_string())?;
    let wins = r.wins();
    let failed = r.random_nll.iter().filter(|v| v.is_none()).count();
    Ok(Outcome {
        pass: wins >= 95,
        detail: format!(
            "priming start at or above {wins}/100 random starts (>= 95); joint log-lik {:.2}; {failed} random fits failed",
            -r.default_nll
        ),
    })
}

fn criterion_7() -> Result<Outcome, String> {
    let r = sir_recovery(&SirConfig::default()).map_err(|e| e.to_string())?;
    let a = r.boundary_ratio < 0.05;
    let b = r.rank_corr_het > r.rank_corr_sk;
    let c = r.score_het >= r.score_sk;
    Ok(Outcome {
        pass: a && b && c,
        detail: format!(
            "(a) boundary/max sd {:.4} < 0.05 {}; (b) rank corr het {:.3} vs sk {:.3} {}; (c) score het {:.3} vs sk {:.3} {}; max reference sd {:.1}",
            r.boundary_ratio,
            ok(a),
            r.rank_corr_het,
            r.rank_corr_sk,
            ok(b),
            r.score_het,
            r.score_sk,
            ok(c),
            r.max_ref_sd
        ),
    })
}

fn criterion_8() -> Result<Outcome, String> {
    let runs = fallback_study(&FallbackConfig::default()).map_err(|e| e.to_string())?;
    let rate = runs.iter().filter(|r| r.fallback).count() as f64 / runs.len() as f64;
    let worst = runs
        .iter()
        .map(|r| r.nlpd_het - r.nlpd_hom)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Outcome {
        pass: rate >= 0.5 && worst <= 0.1,
        detail: format!(
            "{} datasets; fallback rate {rate:.2} (>= 0.5); worst NLPD degradation {worst:.3} (<= 0.1)",
            runs.len()
        ),
    })
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "not met"
    }
}

fn main() -> ExitCode {
    type Check = fn() -> Result<Outcome, String>;
    let checks: [(&str, &str, Check); 8] = [
        ("1", "unique-n vs dense full-N identities", criterion_1),
        ("2", "analytic gradients vs finite differences", criterion_2),
        (
            "3",
            "joint objective monotone in smoothing nugget",
            criterion_3,
        ),
        ("4", "motorcycle cross-validation", criterion_4),
        ("5", "unique-n speedup over full-N", criterion_5),
        ("6", "priming initialization vs random starts", criterion_6),
        (
            "7",
            "SIR variance recovery vs stochastic kriging",
            criterion_7,
        ),
        ("8", "homoskedastic fallback", criterion_8),
    ];
    let mut all = true;
    for (id, name, f) in checks {
        let t = Instant::now();
        all &= report(id, name, t, f());
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
