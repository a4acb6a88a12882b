use std::time::Duration;

use accelplug::{
    generate, program_for, run, AlgoKind, CacheConfig, ComputationModel, EngineConfig, GraphKind,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn engine(c: &mut Criterion) {
    let g = generate(GraphKind::Random { p: 0.01 }, 1000, 1).unwrap();
    let mut group = c.benchmark_group("engine_sssp_1000");
    group.sample_size(10).measurement_time(Duration::from_secs(5));
    for (name, cache, skip) in [
        ("plain", None, false),
        ("cache", Some(CacheConfig::with_capacity(256)), false),
        ("cache_skip", Some(CacheConfig::with_capacity(256)), true),
    ] {
        let cfg = EngineConfig {
            nodes: 4,
            cache,
            enable_skip: skip,
            ..EngineConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| {
                let p = program_for(AlgoKind::Sssp, &g, None).unwrap();
                run(&g, p, ComputationModel::Bsp, cfg).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, engine);
criterion_main!(benches);
