use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hetgp::{hom_nll, hom_nll_grad};
use hetgp_bench::{kernel, paired_designs};

fn likelihood(c: &mut Criterion) {
    let k = kernel();
    let mut group = c.benchmark_group("hom_likelihood");
    group.sample_size(10);
    for max_reps in [5, 20] {
        let (unique, full) = paired_designs(60, max_reps, 1);
        let label = format!("N={}", full.n_total());
        group.bench_with_input(BenchmarkId::new("unique", &label), &unique, |b, d| {
            b.iter(|| hom_nll(&k, 0.01, d).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("full", &label), &full, |b, d| {
            b.iter(|| hom_nll(&k, 0.01, d).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("unique_grad", &label), &unique, |b, d| {
            b.iter(|| hom_nll_grad(&k, 0.01, d).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, likelihood);
criterion_main!(benches);
