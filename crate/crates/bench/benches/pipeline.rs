use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use prefclust_bench::{fixture, offline_config};
use prefclust_core::active::{select_active_pair, SelectionMode};
use prefclust_core::clustering::build_graph;
use prefclust_core::mle::{build_gramian, fit_mle};
use prefclust_core::offline::{compute_user_stats, default_reference, run_off_c2pl};
use std::hint::black_box;

fn mle(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit_mle");
    for n in [100, 1000] {
        let fx = fixture(1, 16, n, 1);
        let cfg = offline_config(1, 0.0).mle;
        group.bench_with_input(BenchmarkId::from_parameter(n), &fx.data[0].samples, |b, s| {
            b.iter(|| fit_mle(black_box(s), 16, &cfg, None).unwrap())
        });
    }
    group.finish();
}

fn graph(c: &mut Criterion) {
    let fx = fixture(40, 16, 200, 2);
    let cfg = offline_config(40, 3.0);
    let estimates: Vec<_> = compute_user_stats(&fx.data, 16, &cfg)
        .unwrap()
        .iter()
        .map(|s| s.estimate())
        .collect();
    c.bench_function("build_graph/40", |b| b.iter(|| build_graph(black_box(&estimates), &cfg.cluster)));
}

fn selection(c: &mut Criterion) {
    let fx = fixture(1, 16, 200, 3);
    let cfg = offline_config(1, 0.0).mle;
    let gramian = build_gramian(&fx.data[0].samples, 16, &cfg);
    c.bench_function("select_active_pair/20x10", |b| {
        b.iter(|| select_active_pair(black_box(&gramian), Some(&fx.features), SelectionMode::FiniteTriples).unwrap())
    });
}

fn offline(c: &mut Criterion) {
    let fx = fixture(16, 8, 100, 4);
    let cfg = offline_config(16, 3.0);
    let w = default_reference(&fx.data, &fx.features);
    let user = fx.data[0].user.clone();
    let mut group = c.benchmark_group("run_off_c2pl");
    group.sample_size(10);
    group.bench_function("16x100", |b| {
        b.iter(|| run_off_c2pl(&fx.data, Some(&fx.features), &user, &w, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, mle, graph, selection, offline);
criterion_main!(benches);
