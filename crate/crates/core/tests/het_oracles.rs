use std::f64::consts::PI;

use approx::assert_relative_eq;
use hetgp::het::{het_eval, HetParams, LATENT_NUGGET};
use hetgp::oracle::{dense_nll, dense_predict, RandomInstance};
use hetgp::sims::stream_rng;
use hetgp::{
    find_reps, het_njll, hom_nll, smooth_latents, HetModel, HetSettings, HomModel, KernelFamily,
    KernelSpec,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn random_latents(ri: &RandomInstance, rng: &mut impl Rng) -> (KernelSpec, f64, DVector<f64>) {
    let d = ri.design.dim();
    let phi = (0..d).map(|_| rng.random_range(0.1..1.0)).collect();
    let kn = KernelSpec::new(ri.kernel.family(), phi).unwrap();
    let g = rng.random_range(0.0..1.0);
    let delta = DVector::from_fn(ri.design.n_unique(), |_, _| rng.random_range(-2.0..1.0));
    (kn, g, delta)
}

#[test]
fn smoothing_matches_dense_solve() {
    let mut rng = stream_rng(11, 0);
    for _ in 0..20 {
        let ri = RandomInstance::draw(&mut rng);
        let (kn, g, delta) = random_latents(&ri, &mut rng);
        let mut c = kn.corr_matrix_sym(ri.design.x0()).unwrap();
        c += DMatrix::identity(c.nrows(), c.ncols()) * LATENT_NUGGET;
        let mut ups = c.clone();
        for (i, &a) in ri.design.mult().iter().enumerate() {
            ups[(i, i)] += g / a as f64;
        }
        let expect = &c * ups.lu().solve(&delta).unwrap();
        let got = smooth_latents(&delta, &kn, g, &ri.design).unwrap();
        for i in 0..delta.len() {
            assert_relative_eq!(got[i], expect[i], epsilon = 1e-8, max_relative = 1e-8);
        }
    }
}

#[test]
fn mean_field_part_matches_dense_likelihood() {
    let mut rng = stream_rng(12, 0);
    for _ in 0..30 {
        let ri = RandomInstance::draw(&mut rng);
        let (kn, g, delta) = random_latents(&ri, &mut rng);
        let ev = het_eval(&ri.kernel, &kn, g, &delta, &ri.design, false).unwrap();
        let lam = ev.log_lambda.map(f64::exp);
        let rows = ri.design.expanded_rows();
        let lam_full = DVector::from_iterator(rows.len(), rows.iter().map(|&i| lam[i]));
        let dense = dense_nll(&ri.x, &ri.y, &ri.kernel, &lam_full).unwrap();
        assert_relative_eq!(ev.mean_field.nll, dense, max_relative = 1e-10);
    }
}

#[test]
fn predictions_match_dense_equations() {
    let mut rng = stream_rng(13, 0);
    for _ in 0..30 {
        let ri = RandomInstance::draw(&mut rng);
        let (kn, g, delta) = random_latents(&ri, &mut rng);
        let params = HetParams {
            theta: ri.kernel.lengthscales().to_vec(),
            phi: kn.lengthscales().to_vec(),
            g,
            delta: delta.as_slice().to_vec(),
        };
        let hom = HomModel::from_params(ri.kernel.clone(), 0.1, ri.design.clone()).unwrap();
        let m = HetModel::from_params(&params, ri.kernel.family(), ri.design.clone(), hom, false)
            .unwrap();
        let rows = ri.design.expanded_rows();
        let lam_full =
            DVector::from_iterator(rows.len(), rows.iter().map(|&i| m.log_lambda()[i].exp()));
        let (mean, sd2) = dense_predict(&ri.x, &ri.y, &ri.kernel, &lam_full, &ri.xnew).unwrap();
        let p = m.predict(&ri.xnew).unwrap();
        for j in 0..ri.xnew.nrows() {
            assert_relative_eq!(p.mean[j], mean[j], epsilon = 1e-10, max_relative = 1e-10);
            assert!((p.sd2[j] - sd2[j].max(0.0)).abs() <= 1e-10 * m.nu_hat());
        }
    }
}

#[test]
fn site_permutation_leaves_objective_unchanged() {
    let mut rng = stream_rng(14, 0);
    for _ in 0..10 {
        let ri = RandomInstance::draw(&mut rng);
        let (kn, g, delta) = random_latents(&ri, &mut rng);
        let n = ri.design.n_unique();
        let perm: Vec<usize> = (0..n).rev().collect();
        let pd = ri.design.subset(&perm).unwrap();
        let pdelta = DVector::from_iterator(n, perm.iter().map(|&i| delta[i]));
        let a = het_njll(&ri.kernel, &kn, g, &delta, &ri.design).unwrap();
        let b = het_njll(&ri.kernel, &kn, g, &pdelta, &pd).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-10);
    }
}

#[test]
fn single_site_closed_form() {
    // one site, a = 3, responses 1, 2, 3
    let x = DMatrix::from_element(3, 1, 0.5);
    let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
    let d = find_reps(&x, &y, 0.0).unwrap();
    let km = KernelSpec::new(KernelFamily::SquaredExponential, vec![1.0]).unwrap();
    let kn = KernelSpec::new(KernelFamily::SquaredExponential, vec![1.0]).unwrap();
    let (g, delta) = (0.6, 0.4);
    let (a, big_n, ybar, s2) = (3.0, 3.0, 2.0, 2.0 / 3.0);
    let c = 1.0 + LATENT_NUGGET;
    let ups_g = c + g / a;
    let log_lam = c / ups_g * delta;
    let lam: f64 = log_lam.exp();
    let ups = 1.0 + lam / a;
    let psi = a * s2 / lam + ybar * ybar / ups;
    let nu = psi / big_n;
    let mf = 0.5 * big_n * nu.ln()
        + 0.5 * ((a - 1.0) * lam.ln() + a.ln())
        + 0.5 * ups.ln()
        + 0.5 * big_n * (1.0 + (2.0 * PI).ln());
    let nu_g = delta * delta / ups_g;
    let pen = 0.5 * nu_g.ln() + 0.5 * ups_g.ln() + 0.5 * (1.0 + (2.0 * PI).ln());
    let got = het_njll(&km, &kn, g, &DVector::from_element(1, delta), &d).unwrap();
    assert_relative_eq!(got, mf + pen, max_relative = 1e-13);
}

#[test]
fn constant_latents_give_homoskedastic_likelihood() {
    let mut rng = stream_rng(15, 0);
    for _ in 0..10 {
        let ri = RandomInstance::draw(&mut rng);
        let c: f64 = rng.random_range(-2.0..1.0);
        let kn = KernelSpec::new(ri.kernel.family(), vec![0.5; ri.design.dim()]).unwrap();
        let delta = DVector::from_element(ri.design.n_unique(), c);
        let ev = het_eval(&ri.kernel, &kn, 0.0, &delta, &ri.design, false).unwrap();
        let hom = hom_nll(&ri.kernel, c.exp(), &ri.design).unwrap();
        assert_relative_eq!(ev.mean_field.nll, hom, max_relative = 1e-10);
    }
}

#[test]
fn residual_decomposition() {
    let mut rng = stream_rng(16, 0);
    for _ in 0..20 {
        let a = rng.random_range(1..6);
        let ys: Vec<f64> = (0..a).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mu: f64 = rng.random_range(-3.0..3.0);
        let d = find_reps(&DMatrix::zeros(a, 1), &DVector::from_vec(ys.clone()), 0.0).unwrap();
        let direct = ys.iter().map(|y| (mu - y).powi(2)).sum::<f64>() / a as f64;
        let (ybar, s2) = (d.z0()[0], d.s2()[0]);
        assert_relative_eq!(direct, s2 + (ybar - mu).powi(2), max_relative = 1e-12);
    }
}

#[test]
fn fitted_model_round_trips_through_json() {
    let d = hetgp::sims::data::motorcycle().unwrap();
    let m = hetgp::het_fit(&d, &HetSettings::default()).unwrap();
    let back = HetModel::from_json(&m.to_json().unwrap()).unwrap();
    assert_eq!(back.fallback(), m.fallback());
    let xs = DMatrix::from_fn(5, 1, |i, _| 5.0 + 10.0 * i as f64);
    let (p, q) = (m.predict(&xs).unwrap(), back.predict(&xs).unwrap());
    for j in 0..5 {
        assert_relative_eq!(p.mean[j], q.mean[j], max_relative = 1e-12);
        assert_relative_eq!(p.nugs[j], q.nugs[j], max_relative = 1e-12);
    }
}

#[test]
fn motorcycle_fit_is_fast_and_heteroskedastic() {
    let d = hetgp::sims::data::motorcycle().unwrap();
    let t = std::time::Instant::now();
    let m = hetgp::het_fit(&d, &HetSettings::default()).unwrap();
    assert!(t.elapsed().as_secs_f64() <= 2.0);
    assert!(!m.fallback());
    // the early part of the record is far quieter than the impact region
    let p = m
        .predict(&DMatrix::from_column_slice(2, 1, &[5.0, 35.0]))
        .unwrap();
    assert!(p.nugs[0] * 10.0 < p.nugs[1]);
}
