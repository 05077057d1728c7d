use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use fvl_bench::gaussian;
use fvl_core::gaussian::{delta_bound_check, gamma, kl_diag, wasserstein2_diag, DiagGaussian};

fn analytics(c: &mut Criterion) {
    let mut group = c.benchmark_group("gaussian");
    for d in [1, 16, 256] {
        let (q1, q2) = (gaussian(d, 0.0), gaussian(d, 1.0));
        let (p1, p2) = (
            DiagGaussian::standard(d).unwrap(),
            DiagGaussian::isotropic(1.5, d).unwrap(),
        );
        group.bench_with_input(BenchmarkId::new("kl_diag", d), &d, |b, _| {
            b.iter(|| kl_diag(black_box(&q1), black_box(&p1)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("gamma", d), &d, |b, _| {
            b.iter(|| gamma(black_box(&q1), black_box(&q2), &p1, &p2).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("w2", d), &d, |b, _| {
            b.iter(|| wasserstein2_diag(black_box(&q1), black_box(&q2)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("delta_bound", d), &d, |b, _| {
            b.iter(|| delta_bound_check(black_box(&q1), black_box(&q2), 1.0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, analytics);
criterion_main!(benches);
