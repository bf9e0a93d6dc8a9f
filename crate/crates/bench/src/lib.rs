//! Deterministic fixtures shared by the benchmarks.

use simmatch_core::config::RunConfig;
use simmatch_core::data::{BatchSampler, SslSplit};
use simmatch_core::trainer::{StepBatch, TrainState};
use simmatch_core::{GraphNode, NodeBank, ProbDist, Tensor};

/// `n × d` unit rows with no structure worth exploiting.
pub fn unit_rows(n: usize, d: usize, salt: f64) -> Tensor {
    let mut t = Tensor::from_fn(n, d, |i, j| (1.37 * i as f64 + 0.71 * j as f64 + salt).sin() + 0.05);
    for i in 0..n {
        let norm = t.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        t.row_slice_mut(i).iter_mut().for_each(|v| *v /= norm);
    }
    t
}

/// `n × c` row-stochastic labels.
pub fn label_rows(n: usize, c: usize) -> Tensor {
    let mut t = Tensor::from_fn(n, c, |i, j| 1.0 + ((i * 5 + j * 3) % 7) as f64);
    for i in 0..n {
        let s: f64 = t.row_slice(i).iter().sum();
        t.row_slice_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// A full bank of `capacity` nodes.
pub fn bank(capacity: usize, d: usize, c: usize) -> NodeBank {
    let z = unit_rows(capacity, d, 0.3);
    let y = label_rows(capacity, c);
    let mut bank = NodeBank::new(capacity).expect("positive capacity");
    for i in 0..capacity {
        let label = ProbDist::normalized(y.row_slice(i).to_vec()).expect("valid label");
        bank.insert(GraphNode::new(z.row_slice(i).to_vec(), label).expect("unit row"))
            .expect("matching dims");
    }
    bank
}

/// A state on the default two-moons task after `warm_steps` steps, so that
/// both banks are in use, plus its split.
pub fn warm_state(warm_steps: u64) -> (TrainState, SslSplit) {
    let cfg = RunConfig::default();
    let split = cfg.dataset.split(cfg.train.seed).expect("default split");
    let mut state = TrainState::new(cfg.train, &split).expect("default config");
    for _ in 0..warm_steps {
        let batch = batch(&state, &split);
        state.train_step(&batch).expect("finite step");
    }
    (state, split)
}

/// The batch the run loop would draw for the state's current step.
pub fn batch(state: &TrainState, split: &SslSplit) -> StepBatch {
    let cfg = &state.config;
    let mut sampler = BatchSampler::new(split.labeled.len(), split.unlabeled.len(), cfg.batch_size, cfg.mu, cfg.seed)
        .expect("non-empty pools");
    let idx = sampler.batch(state.step);
    StepBatch::from_split(split, &idx.labeled, &idx.unlabeled)
}
