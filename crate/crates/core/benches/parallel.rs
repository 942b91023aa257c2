use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use droplora::experiments::{run_cell, RecoveryTask, SweepSpec};
use droplora::training::TrainConfig;
use droplora::{par, rng, AdapterConfig, Tensor};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut r = rng::stream(0, &[]);
    for n in [64usize, 256] {
        let a = Tensor::randn(&[n, n], 1.0, &mut r).into_data();
        let b = Tensor::randn(&[n, n], 1.0, &mut r).into_data();
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bench, &n| {
            bench.iter(|| par::matmul_sequential(black_box(&a), black_box(&b), n, n, n))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |bench, &n| {
            bench.iter(|| par::matmul_parallel(black_box(&a), black_box(&b), n, n, n))
        });
    }
    group.finish();
}

fn sweep(c: &mut Criterion) {
    let task = RecoveryTask::reference(0).unwrap();
    let spec = SweepSpec {
        ranks: vec![8, 16],
        pruning_rates: vec![0.1, 0.3],
        repeats: 2,
        ..SweepSpec::default()
    };
    let cells = spec.cells();
    let adapter = AdapterConfig::default();
    let train = TrainConfig {
        batch_size: 32,
        warmup_steps: 2,
        steps: Some(20),
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter(|| par::map_sequential(&cells, |cell| run_cell(&task, cell, &adapter, &train)))
    });
    group.bench_function("parallel", |b| {
        b.iter(|| par::map(&cells, |cell| run_cell(&task, cell, &adapter, &train)))
    });
    group.finish();
}

criterion_group!(benches, matmul, sweep);
criterion_main!(benches);
