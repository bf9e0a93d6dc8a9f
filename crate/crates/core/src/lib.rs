//! Semi-supervised learning with graph consistency over memory banks.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`diff`], [`gradcheck`]: dense matrices and a reverse-mode tape.
//! * [`model`]: encoder, layer-normalized features, classifier, projection head, EMA.
//! * [`graph`]: memory banks, similarity edges, affinity matrices and label propagation.
//! * [`losses`]: supervised, node-node, node-edge and edge-edge objectives, distribution alignment.
//! * [`augment`], [`data`]: synthetic datasets, splits, batches and input perturbations.
//! * [`trainer`]: the training step, optimizer, schedule, evaluation and run loop.
//! * [`checkpoint`], [`config`]: text formats for checkpoints and run configuration.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diff;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use diff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use graph::{AffinityMatrix, GraphNode, NodeBank, ProbDist};
pub use model::{EmaShadow, ModelConfig, ModelParams};
pub use tensor::Tensor;
pub use trainer::{MetricsRecord, TrainConfig};
