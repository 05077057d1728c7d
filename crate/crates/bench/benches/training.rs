use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use fvl_bench::experiment;
use fvl_core::train::Trainer;
use fvl_core::Variant;

fn inference(c: &mut Criterion) {
    let mut group = c.benchmark_group("inference_batch32");
    for v in [Variant::Lora, Variant::Fvae] {
        let (cfg, _, test) = experiment(v);
        let model = cfg.build_model().unwrap();
        let x = test.subset(&(0..32).collect::<Vec<_>>()).features;
        group.bench_function(BenchmarkId::from_parameter(v), |b| {
            b.iter(|| model.logits(black_box(&x)).unwrap())
        });
    }
    group.finish();
}

/// One optimizer step on the default benchmark; the trainer is rebuilt once
/// it reaches the end of its schedule.
fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    for v in Variant::ALL {
        let (cfg, train, _) = experiment(v);
        let fresh = || Trainer::new(cfg.build_model().unwrap(), cfg.train_config(), &train, None).unwrap();
        let mut t = fresh();
        group.bench_function(BenchmarkId::from_parameter(v), |b| {
            b.iter(|| {
                if t.is_done() {
                    t = fresh();
                }
                black_box(t.step_once().unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, inference, train_step);
criterion_main!(benches);
