use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use simmatch_bench::{batch, warm_state};

fn train_step(c: &mut Criterion) {
    let (state, split) = warm_state(200);
    let step_batch = batch(&state, &split);
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    group.bench_function("prepare", |b| {
        b.iter_batched(|| state.clone(), |mut s| s.prepare(&step_batch).unwrap(), BatchSize::LargeInput)
    });
    let prepared = state.clone().prepare(&step_batch).unwrap();
    group.bench_function("gradients", |b| b.iter(|| state.gradients(&prepared).unwrap()));
    group.bench_function("full_step", |b| {
        b.iter_batched(|| state.clone(), |mut s| s.train_step(&step_batch).unwrap(), BatchSize::LargeInput)
    });
    group.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
