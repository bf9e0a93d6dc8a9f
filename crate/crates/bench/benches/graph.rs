use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use simmatch_bench::{bank, label_rows, unit_rows};
use simmatch_core::graph::{affinity_matrix, edges, propagate_closed, propagate_iterative, propagated_pseudo_label};
use simmatch_core::ProbDist;

fn propagation(c: &mut Criterion) {
    let mut group = c.benchmark_group("propagate");
    for n in [9, 33, 129] {
        let a = affinity_matrix(&unit_rows(n, 8, 0.0), 0.1).unwrap();
        let y0 = label_rows(n, 10);
        group.bench_with_input(BenchmarkId::new("closed", n), &n, |b, _| {
            b.iter(|| propagate_closed(black_box(&a), black_box(&y0), 0.7).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("iterative_100", n), &n, |b, _| {
            b.iter(|| propagate_iterative(black_box(&a), black_box(&y0), 0.7, 100).unwrap())
        });
    }
    group.finish();
}

fn graph_queries(c: &mut Criterion) {
    let mut group = c.benchmark_group("bank");
    for capacity in [256, 1024] {
        let b = bank(capacity, 8, 2);
        let q = unit_rows(1, 8, 2.0);
        group.bench_with_input(BenchmarkId::new("edges", capacity), &capacity, |bench, _| {
            bench.iter(|| edges(black_box(q.row_slice(0)), black_box(&b), 0.1).unwrap())
        });
        let p_w = ProbDist::new(vec![0.6, 0.4]).unwrap();
        group.bench_with_input(BenchmarkId::new("pseudo_label_top8", capacity), &capacity, |bench, _| {
            bench.iter(|| propagated_pseudo_label(black_box(q.row_slice(0)), &p_w, &b, 8, 0.7, 0.1).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, propagation, graph_queries);
criterion_main!(benches);
