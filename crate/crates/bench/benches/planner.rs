use std::hint::black_box;

use accelplug::pipeline::sweep;
use accelplug::{balance_data, plan, BalanceProblem, PipelineCostModel};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn block_size(c: &mut Criterion) {
    let mut group = c.benchmark_group("block_size");
    for d in [1_000u64, 100_000, 1_000_000] {
        let m = PipelineCostModel::new(0.02, 1.0, 0.1, 50.0, d).unwrap();
        group.bench_with_input(BenchmarkId::new("closed_form", d), &m, |b, m| {
            b.iter(|| plan(black_box(m)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sweep", d), &m, |b, m| b.iter(|| sweep(black_box(m))));
    }
    group.finish();
}

fn data_balance(c: &mut Criterion) {
    let mut group = c.benchmark_group("balance_data");
    for m in [4usize, 64, 1024] {
        let p = BalanceProblem {
            total: 10_000_000,
            costs: (0..m).map(|i| 1.0 + (i % 7) as f64 * 0.3).collect(),
        };
        group.bench_with_input(BenchmarkId::from_parameter(m), &p, |b, p| {
            b.iter(|| balance_data(black_box(p)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, block_size, data_balance);
criterion_main!(benches);
