use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use fvl_bench::matrix;
use fvl_core::Graph;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let (a, b) = (matrix(n, n, 1), matrix(n, n, 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
        });
    }
    group.finish();
}

/// Two-layer relu network on a batch of 32: forward plus reverse sweep.
fn mlp_backward(c: &mut Criterion) {
    let x = matrix(32, 32, 3);
    let (w1, w2) = (matrix(32, 64, 4), matrix(64, 8, 5));
    c.bench_function("mlp_forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let a = g.param(w1.clone());
            let b = g.param(w2.clone());
            let h = g.matmul(xv, a).unwrap();
            let h = g.relu(h).unwrap();
            let y = g.matmul(h, b).unwrap();
            let y = g.log_softmax(y).unwrap();
            let loss = g.mean(y).unwrap();
            black_box(g.backward(loss).unwrap())
        })
    });
}

criterion_group!(benches, matmul, mlp_backward);
criterion_main!(benches);
