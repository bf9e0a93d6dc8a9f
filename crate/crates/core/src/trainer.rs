//! One training step assembled from the model, graph and loss pieces, the
//! optimizer and learning-rate schedule, evaluation, and the run loop.

use std::f64::consts::PI;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::augment::{strong_view, weak_view, AugmentPolicy};
use crate::checkpoint::{self, NamedArrays};
use crate::data::{stream_rng, BatchSampler, LabeledSet, SslSplit, STREAM_AUGMENT};
use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{self, GraphNode, NodeBank, ProbDist};
use crate::losses::{self, DaState, LossTerms, LossWeights};
use crate::model::{self, EmaShadow, ModelConfig, ModelParams, ModelVars};
use crate::tensor::{norm, Tensor};

/// Which consistency terms take part in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub node_node: bool,
    pub node_edge: bool,
    pub edge_edge: bool,
    /// Replace node-node targets with labels propagated over the labeled bank.
    pub edge_node: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        node_node: true,
        node_edge: true,
        edge_edge: true,
        edge_node: true,
    };
    pub const NONE: Toggles = Toggles {
        node_node: false,
        node_edge: false,
        edge_edge: false,
        edge_node: false,
    };
}

/// Quantity whose maximum is compared with the confidence threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdSource {
    /// The node-node target actually used (propagated when edge-node is on).
    Target,
    /// The aligned weak prediction.
    WeakPrediction,
}

/// Target of the node-edge term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeEdgeTarget {
    Aligned,
    Propagated,
}

/// Order of distribution alignment and label propagation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DaOrder {
    AlignThenPropagate,
    PropagateThenAlign,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelShape {
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            hidden_dims: vec![64, 64],
            feature_dim: 32,
            proj_hidden: 32,
            proj_dim: 8,
        }
    }
}

/// Every training hyperparameter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub topn: usize,
    pub batch_size: usize,
    pub mu: usize,
    pub total_steps: u64,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub unlabeled_bank_size: usize,
    pub feature_norm: bool,
    pub toggles: Toggles,
    pub distribution_alignment: bool,
    pub da_momentum: f64,
    pub da_order: DaOrder,
    pub threshold_source: ThresholdSource,
    pub node_edge_target: NodeEdgeTarget,
    pub warmup_steps: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub model: ModelShape,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            topn: 8,
            batch_size: 16,
            mu: 7,
            total_steps: 3000,
            base_lr: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            ema_decay: 0.999,
            unlabeled_bank_size: 1024,
            feature_norm: true,
            toggles: Toggles::ALL,
            distribution_alignment: true,
            da_momentum: 0.99,
            da_order: DaOrder::AlignThenPropagate,
            threshold_source: ThresholdSource::Target,
            node_edge_target: NodeEdgeTarget::Aligned,
            warmup_steps: 0,
            eval_every: 100,
            seed: 0,
            model: ModelShape::default(),
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.augment.validate()?;
        let positive = [
            ("topn", self.topn),
            ("batch_size", self.batch_size),
            ("mu", self.mu),
            ("unlabeled_bank_size", self.unlabeled_bank_size),
            ("eval_every", self.eval_every as usize),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("{name} must be at least 1")));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Parameter(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Parameter(format!("ema_decay must be in (0, 1), got {}", self.ema_decay)));
        }
        if !(self.da_momentum > 0.0 && self.da_momentum < 1.0) {
            return Err(Error::Parameter(format!("da_momentum must be in (0, 1), got {}", self.da_momentum)));
        }
        Ok(())
    }

    pub fn model_config(&self, input_dim: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            feature_dim: self.model.feature_dim,
            proj_hidden: self.model.proj_hidden,
            proj_dim: self.model.proj_dim,
            classes,
            feature_norm: self.feature_norm,
        }
    }

    /// Toggles of the terms that reach the objective: enabled and with a
    /// positive weight. Edge-node only matters through the node-node term.
    pub fn active_terms(&self) -> Toggles {
        let w = &self.weights;
        let node_node = self.toggles.node_node && w.lambda_nn > 0.0;
        Toggles {
            node_node,
            node_edge: self.toggles.node_edge && w.lambda_ne > 0.0,
            edge_edge: self.toggles.edge_edge && w.lambda_ee > 0.0,
            edge_node: self.toggles.edge_node && node_node,
        }
    }

    /// Learning rate at step `s`, with the optional linear warm-up applied.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        let lr = cosine_lr(step, self.total_steps, self.base_lr)?;
        if step < self.warmup_steps {
            return Ok(lr * (step + 1) as f64 / self.warmup_steps as f64);
        }
        Ok(lr)
    }
}

/// `base · cos(7πs / 16S)`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Parameter(format!("step {step} is past the last step {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * (7.0 * PI * step as f64 / (16.0 * total_steps as f64)).cos())
}

/// Nesterov SGD with coupled weight decay on one tensor:
/// `g' = g + wd·θ; v ← m·v + g'; θ ← θ − lr·(g' + m·v)`.
pub fn sgd_nesterov_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    param.same_shape(grad, "sgd_nesterov_step")?;
    param.same_shape(velocity, "sgd_nesterov_step")?;
    for ((p, g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * (g + momentum * *v);
    }
    Ok(())
}

/// Fraction of rows whose argmax matches `truth`; ties go to the lower class.
fn accuracy(probs: &Tensor, truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = truth
        .iter()
        .enumerate()
        .filter(|(i, &t)| probs.argmax_row(*i) == t)
        .count();
    hits as f64 / truth.len() as f64
}

/// Accuracy of `params` on a labeled set.
pub fn evaluate(params: &ModelParams, feature_norm: bool, test: &LabeledSet) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::State("evaluation set is empty".into()));
    }
    let probs = model::predict(params, &test.features, feature_norm)?;
    Ok(accuracy(&probs, &test.labels))
}

/// Component loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub s: f64,
    pub nn: f64,
    pub ne: f64,
    pub ee: f64,
    pub total: f64,
}

/// One logged step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub losses: LossValues,
    /// Accuracy of node-node targets among rows passing the threshold.
    pub pseudo_label_accuracy: Option<f64>,
    /// Accuracy of node-node targets over the whole unlabeled batch.
    pub unlabeled_accuracy: Option<f64>,
    /// EMA accuracy on the held-out set, at evaluation steps.
    pub validation_accuracy: Option<f64>,
    pub mask_rate: f64,
    pub norm_gap: f64,
    pub lr: f64,
    /// Some active graph term had no bank to work with and contributed 0.
    pub graph_warmup: bool,
}

/// Inputs of one step, drawn from the labeled set and unlabeled pool.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub labeled_x: Tensor,
    pub labeled_y: Vec<usize>,
    /// Position of each labeled row in the labeled set; keys the labeled bank.
    pub labeled_keys: Vec<usize>,
    pub unlabeled_x: Tensor,
    /// Ground truth of the unlabeled rows, for metrics only.
    pub unlabeled_truth: Vec<Option<usize>>,
}

impl StepBatch {
    pub fn from_split(split: &SslSplit, labeled: &[usize], unlabeled: &[usize]) -> Self {
        StepBatch {
            labeled_x: split.labeled.features.select_rows(labeled),
            labeled_y: labeled.iter().map(|&i| split.labeled.labels[i]).collect(),
            labeled_keys: labeled.to_vec(),
            unlabeled_x: split.unlabeled.features.select_rows(unlabeled),
            unlabeled_truth: unlabeled.iter().map(|&i| split.unlabeled_truth[i]).collect(),
        }
    }
}

/// Augmented inputs of one step.
#[derive(Clone, Debug)]
pub struct Views {
    pub labeled_weak: Tensor,
    pub unlabeled_weak: Tensor,
    pub unlabeled_strong: Tensor,
}

/// Gradient-free quantities derived from the weak unlabeled view and the
/// bank snapshots.
#[derive(Clone, Debug)]
pub struct Targets {
    pub labeled_onehot: Tensor,
    /// Weak predictions before alignment.
    pub raw_weak: Tensor,
    /// Weak predictions after alignment (equal to `raw_weak` without it).
    pub aligned_weak: Tensor,
    pub weak_embeddings: Tensor,
    pub weak_features: Tensor,
    /// Node-node targets.
    pub node_node: Tensor,
    pub mask: Vec<bool>,
    /// Node-edge targets.
    pub node_edge: Tensor,
    /// Weak edges against the unlabeled bank, when it is usable.
    pub weak_edges: Option<Tensor>,
    pub bank_embeddings: Tensor,
    pub bank_labels: Tensor,
    pub graph_warmup: bool,
}

/// Tape handles for the gradient-blocked inputs of the objective.
#[derive(Clone, Debug)]
pub struct TargetVars {
    pub labeled_onehot: Var,
    pub node_node: Var,
    pub node_edge: Var,
    pub weak_edges: Option<Var>,
    pub bank_labels: Var,
}

impl TargetVars {
    /// Every target as a tape constant.
    pub fn constants(tape: &mut Tape, targets: &Targets) -> Self {
        TargetVars {
            labeled_onehot: tape.constant(targets.labeled_onehot.clone()),
            node_node: tape.constant(targets.node_node.clone()),
            node_edge: tape.constant(targets.node_edge.clone()),
            weak_edges: targets.weak_edges.as_ref().map(|e| tape.constant(e.clone())),
            bank_labels: tape.constant(targets.bank_labels.clone()),
        }
    }
}

/// Loss handles produced by [`build_objective`].
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    pub terms: LossTerms,
    pub labeled: model::ViewOutputs,
    pub strong: model::ViewOutputs,
}

/// Records the differentiable part of a step on `tape`: the labeled weak
/// view, the unlabeled strong view and every enabled loss term.
pub fn build_objective(
    tape: &mut Tape,
    vars: &ModelVars,
    views: &Views,
    targets: &Targets,
    target_vars: &TargetVars,
    config: &TrainConfig,
) -> Result<Objective> {
    let lw = tape.constant(views.labeled_weak.clone());
    let labeled = model::forward_view(tape, vars, lw, config.feature_norm)?;
    let us = tape.constant(views.unlabeled_strong.clone());
    let strong = model::forward_view(tape, vars, us, config.feature_norm)?;

    let supervised = losses::supervised_loss(tape, target_vars.labeled_onehot, labeled.probs)?;
    let toggles = config.active_terms();
    let node_node = if toggles.node_node {
        Some(losses::node_node_loss_masked(
            tape,
            target_vars.node_node,
            strong.probs,
            &targets.mask,
        )?)
    } else {
        None
    };
    let strong_edges = match (&targets.weak_edges, toggles.node_edge || toggles.edge_edge) {
        (Some(_), true) => Some(graph::edges_on_tape(
            tape,
            strong.embedding,
            &targets.bank_embeddings,
            config.weights.t,
        )?),
        _ => None,
    };
    let node_edge = match strong_edges {
        Some(e_s) if toggles.node_edge => Some(losses::node_edge_loss(
            tape,
            target_vars.node_edge,
            e_s,
            target_vars.bank_labels,
        )?),
        _ => None,
    };
    let edge_edge = match (strong_edges, target_vars.weak_edges) {
        (Some(e_s), Some(e_w)) if toggles.edge_edge => Some(losses::edge_edge_loss(tape, e_w, e_s)?),
        _ => None,
    };
    let terms = LossTerms {
        supervised,
        node_node,
        node_edge,
        edge_edge,
    };
    let total = losses::total_loss(tape, &terms, &config.weights)?;
    Ok(Objective {
        total,
        terms,
        labeled,
        strong,
    })
}

/// Everything [`TrainState::prepare`] produces for one step.
#[derive(Clone, Debug)]
pub struct PreparedStep {
    pub views: Views,
    pub targets: Targets,
}

/// Gradients and loss values of one step.
#[derive(Clone, Debug)]
pub struct StepGradients {
    /// In [`ModelParams::named`] order.
    pub grads: Vec<Tensor>,
    pub losses: LossValues,
    pub labeled_embeddings: Tensor,
    pub strong_features: Tensor,
}

/// Mutable training state: live weights, optimizer, EMA, banks, alignment.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model_config: ModelConfig,
    pub params: ModelParams,
    pub velocity: Vec<Tensor>,
    pub ema: EmaShadow,
    pub unlabeled_bank: NodeBank,
    pub labeled_bank: NodeBank,
    pub da: DaState,
    pub step: u64,
    pub norm_gap_sum: f64,
}

impl TrainState {
    /// Fresh state for a split; weights are seeded from `config.seed`.
    pub fn new(config: TrainConfig, split: &SslSplit) -> Result<Self> {
        config.validate()?;
        let model_config = config.model_config(split.labeled.features.cols(), split.classes);
        let params = ModelParams::init(&model_config, config.seed)?;
        let velocity = params
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        let ema = EmaShadow::new(&params, config.ema_decay)?;
        let target = DaState::target_from_labels(&split.labeled.labels, split.classes)?;
        Ok(TrainState {
            unlabeled_bank: NodeBank::new(config.unlabeled_bank_size)?,
            labeled_bank: NodeBank::new(split.labeled.len().max(1))?,
            da: DaState::new(target, config.da_momentum)?,
            velocity,
            ema,
            params,
            model_config,
            config,
            step: 0,
            norm_gap_sum: 0.0,
        })
    }

    /// Augments the batch and computes every gradient-free target. Updates
    /// the alignment state.
    pub fn prepare(&mut self, batch: &StepBatch) -> Result<PreparedStep> {
        let cfg = &self.config;
        let mut rng = stream_rng(cfg.seed, STREAM_AUGMENT, self.step);
        let views = Views {
            labeled_weak: weak_view(&batch.labeled_x, &cfg.augment, &mut rng),
            unlabeled_weak: weak_view(&batch.unlabeled_x, &cfg.augment, &mut rng),
            unlabeled_strong: strong_view(&batch.unlabeled_x, &cfg.augment, &mut rng),
        };

        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape, false);
        let uw = tape.constant(views.unlabeled_weak.clone());
        let weak = model::forward_view(&mut tape, &vars, uw, cfg.feature_norm)?;
        let raw_weak = tape.value(weak.probs).clone();
        let weak_embeddings = tape.value(weak.embedding).clone();
        let weak_features = tape.value(weak.features).clone();

        let aligned_weak = if cfg.distribution_alignment {
            self.da.align_rows(&raw_weak)?
        } else {
            raw_weak.clone()
        };

        let toggles = cfg.active_terms();
        let mut graph_warmup = false;
        let propagate_ready = !self.labeled_bank.is_empty();
        let needs_propagation =
            toggles.edge_node || (toggles.node_edge && cfg.node_edge_target == NodeEdgeTarget::Propagated);
        let propagated = if needs_propagation && propagate_ready {
            let source = match (cfg.da_order, cfg.distribution_alignment) {
                (DaOrder::PropagateThenAlign, true) => &raw_weak,
                _ => &aligned_weak,
            };
            let mut rows = Vec::with_capacity(source.rows());
            for i in 0..source.rows() {
                let p_w = ProbDist::normalized(source.row_slice(i).to_vec())?;
                let y = graph::propagated_pseudo_label(
                    weak_embeddings.row_slice(i),
                    &p_w,
                    &self.labeled_bank,
                    cfg.topn,
                    cfg.weights.alpha,
                    cfg.weights.t,
                )?;
                rows.push(y.into_vec());
            }
            let mut out = Tensor::from_rows(&rows)?;
            if cfg.da_order == DaOrder::PropagateThenAlign && cfg.distribution_alignment {
                out = self.da.align_rows(&out)?;
            }
            Some(out)
        } else {
            graph_warmup |= needs_propagation;
            None
        };
        if cfg.distribution_alignment {
            self.da.observe(&raw_weak)?;
        }

        let node_node = match (&propagated, toggles.edge_node) {
            (Some(p), true) => p.clone(),
            _ => aligned_weak.clone(),
        };
        let node_edge = match (&propagated, cfg.node_edge_target) {
            (Some(p), NodeEdgeTarget::Propagated) => p.clone(),
            _ => aligned_weak.clone(),
        };
        let gate = match cfg.threshold_source {
            ThresholdSource::Target => &node_node,
            ThresholdSource::WeakPrediction => &aligned_weak,
        };
        let mask = losses::confidence_mask(gate, cfg.weights.tau);

        let bank_ready = self.unlabeled_bank.len() >= 2;
        let uses_bank = toggles.node_edge || toggles.edge_edge;
        graph_warmup |= uses_bank && !bank_ready;
        let bank_embeddings = self.unlabeled_bank.embeddings();
        let bank_labels = self.unlabeled_bank.labels();
        let weak_edges = if bank_ready && uses_bank {
            let e = weak_embeddings.matmul_t(&bank_embeddings)?;
            Some(crate::diff::softmax_rows(&e, cfg.weights.t)?)
        } else {
            None
        };

        let classes = self.model_config.classes;
        let onehot = Tensor::from_fn(batch.labeled_y.len(), classes, |i, c| {
            if batch.labeled_y[i] == c {
                1.0
            } else {
                0.0
            }
        });
        Ok(PreparedStep {
            views,
            targets: Targets {
                labeled_onehot: onehot,
                raw_weak,
                aligned_weak,
                weak_embeddings,
                weak_features,
                node_node,
                mask,
                node_edge,
                weak_edges,
                bank_embeddings,
                bank_labels,
                graph_warmup,
            },
        })
    }

    /// Gradient of the step objective with respect to the live weights.
    pub fn gradients(&self, prepared: &PreparedStep) -> Result<StepGradients> {
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape, true);
        let target_vars = TargetVars::constants(&mut tape, &prepared.targets);
        let obj = build_objective(
            &mut tape,
            &vars,
            &prepared.views,
            &prepared.targets,
            &target_vars,
            &self.config,
        )?;
        let g = tape.backward(obj.total)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        let losses = LossValues {
            s: tape.value(obj.terms.supervised).item(),
            nn: value(obj.terms.node_node),
            ne: value(obj.terms.node_edge),
            ee: value(obj.terms.edge_edge),
            total: tape.value(obj.total).item(),
        };
        if !losses.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {}", self.step)));
        }
        Ok(StepGradients {
            grads: vars.ordered().into_iter().map(|v| g.get_or_zeros(v)).collect(),
            losses,
            labeled_embeddings: tape.value(obj.labeled.embedding).clone(),
            strong_features: tape.value(obj.strong.features).clone(),
        })
    }

    /// One full step: targets, gradients, optimizer, EMA, bank updates.
    pub fn train_step(&mut self, batch: &StepBatch) -> Result<MetricsRecord> {
        let step = self.step;
        let wrap = |e: Error| match e {
            Error::Numerical(m) => Error::Numerical(format!("step {step}: {m}")),
            Error::State(m) => Error::State(format!("step {step}: {m}")),
            other => other,
        };
        let prepared = self.prepare(batch).map_err(wrap)?;
        let sg = self.gradients(&prepared).map_err(wrap)?;
        let lr = self.config.lr_at(step)?;

        let mask = self.params.decay_mask();
        let (m, wd) = (self.config.momentum, self.config.weight_decay);
        for (((p, g), v), decays) in self
            .params
            .tensors_mut()
            .into_iter()
            .zip(&sg.grads)
            .zip(self.velocity.iter_mut())
            .zip(mask)
        {
            sgd_nesterov_step(p, g, v, lr, m, if decays { wd } else { 0.0 })?;
        }
        self.ema.update(&self.params)?;

        let t = &prepared.targets;
        for i in 0..t.aligned_weak.rows() {
            let label = ProbDist::normalized(t.aligned_weak.row_slice(i).to_vec())?;
            self.unlabeled_bank
                .insert(GraphNode::new(t.weak_embeddings.row_slice(i).to_vec(), label)?)?;
        }
        let classes = self.model_config.classes;
        for (i, (&key, &y)) in batch.labeled_keys.iter().zip(&batch.labeled_y).enumerate() {
            let node = GraphNode::new(sg.labeled_embeddings.row_slice(i).to_vec(), ProbDist::one_hot(y, classes)?)?;
            self.labeled_bank.store(key, node)?;
        }

        let norm_gap = mean_norm_gap(&sg.strong_features, &t.weak_features);
        self.norm_gap_sum += norm_gap;
        self.step += 1;

        let passing: Vec<usize> = (0..t.mask.len()).filter(|&i| t.mask[i]).collect();
        let hits = |rows: &[usize]| -> Option<f64> {
            let known: Vec<(usize, usize)> = rows
                .iter()
                .filter_map(|&i| batch.unlabeled_truth.get(i).copied().flatten().map(|y| (i, y)))
                .collect();
            if known.is_empty() {
                return None;
            }
            let ok = known.iter().filter(|(i, y)| t.node_node.argmax_row(*i) == *y).count();
            Some(ok as f64 / known.len() as f64)
        };
        let all: Vec<usize> = (0..t.mask.len()).collect();
        Ok(MetricsRecord {
            step: self.step,
            losses: sg.losses,
            pseudo_label_accuracy: hits(&passing),
            unlabeled_accuracy: hits(&all),
            validation_accuracy: None,
            mask_rate: if t.mask.is_empty() {
                0.0
            } else {
                passing.len() as f64 / t.mask.len() as f64
            },
            norm_gap,
            lr,
            graph_warmup: t.graph_warmup,
        })
    }

    pub fn mean_norm_gap(&self) -> f64 {
        if self.step == 0 {
            0.0
        } else {
            self.norm_gap_sum / self.step as f64
        }
    }

    /// Snapshot of the full state: weights, EMA, velocity, banks, alignment
    /// and counters. Batch composition and augmentation noise are functions
    /// of `(seed, step)`, so this is enough to resume exactly.
    pub fn to_checkpoint(&self) -> NamedArrays {
        let mut a = NamedArrays::new();
        a.push_scalar("state.step", self.step as f64);
        a.push_scalar("state.total_steps", self.config.total_steps as f64);
        a.push_scalar("state.seed", self.config.seed as f64);
        a.push_scalar("state.norm_gap_sum", self.norm_gap_sum);
        a.push_scalar("config.feature_norm", if self.config.feature_norm { 1.0 } else { 0.0 });
        checkpoint::push_params(&mut a, "live", &self.params);
        checkpoint::push_params(&mut a, "ema", &self.ema.params);
        for ((name, _), v) in self.params.named().iter().zip(&self.velocity) {
            a.push(format!("velocity.{name}"), v.clone());
        }
        checkpoint::push_bank(&mut a, "bank.unlabeled", &self.unlabeled_bank);
        checkpoint::push_bank(&mut a, "bank.labeled", &self.labeled_bank);
        a.push("da.running", Tensor::row(self.da.running_marginal.as_slice()));
        a.push("da.target", Tensor::row(self.da.target_marginal.as_slice()));
        a
    }

    /// Restores a snapshot taken by [`TrainState::to_checkpoint`] under the
    /// same config.
    pub fn restore(config: TrainConfig, split: &SslSplit, arrays: &NamedArrays) -> Result<Self> {
        let mut state = TrainState::new(config, split)?;
        let total = arrays.scalar("state.total_steps")? as u64;
        let seed = arrays.scalar("state.seed")? as u64;
        if total != state.config.total_steps || seed != state.config.seed {
            return Err(Error::Validation(format!(
                "checkpoint was taken with total_steps={total}, seed={seed}; config has {}, {}",
                state.config.total_steps, state.config.seed
            )));
        }
        let params = checkpoint::read_params(arrays, "live")?;
        state.params.assert_same_layout(&params)?;
        state.ema.params = checkpoint::read_params(arrays, "ema")?;
        state.ema.params.assert_same_layout(&params)?;
        state.velocity = params
            .named()
            .iter()
            .map(|(name, t)| {
                let v = arrays.get(&format!("velocity.{name}"))?.clone();
                v.same_shape(t, "checkpoint velocity")?;
                Ok(v)
            })
            .collect::<Result<_>>()?;
        state.params = params;
        state.unlabeled_bank = checkpoint::read_bank(arrays, "bank.unlabeled")?;
        state.labeled_bank = checkpoint::read_bank(arrays, "bank.labeled")?;
        state.da.running_marginal = ProbDist::new(arrays.get("da.running")?.data().to_vec())?;
        state.da.target_marginal = ProbDist::new(arrays.get("da.target")?.data().to_vec())?;
        state.step = arrays.scalar("state.step")? as u64;
        state.norm_gap_sum = arrays.scalar("state.norm_gap_sum")?;
        Ok(state)
    }
}

/// Mean over rows of `|‖h_s‖ − ‖h_w‖|`.
pub fn mean_norm_gap(strong: &Tensor, weak: &Tensor) -> f64 {
    let n = strong.rows().min(weak.rows());
    if n == 0 {
        return 0.0;
    }
    (0..n)
        .map(|i| (norm(strong.row_slice(i)) - norm(weak.row_slice(i))).abs())
        .sum::<f64>()
        / n as f64
}

/// Options of [`run_training`] that do not affect the numbers.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Metrics are appended here as JSON lines.
    pub metrics_path: Option<PathBuf>,
    /// Final state is written here.
    pub checkpoint_path: Option<PathBuf>,
    /// Continue from this snapshot instead of fresh weights.
    pub resume_from: Option<NamedArrays>,
    /// Stop after this many total steps (the schedule still uses `total_steps`).
    pub stop_at: Option<u64>,
}

/// Final numbers of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub seed: u64,
    /// EMA accuracy on the held-out set.
    pub final_accuracy: f64,
    /// Live-weight accuracy on the held-out set.
    pub final_live_accuracy: f64,
    pub mean_norm_gap: f64,
    pub final_pseudo_label_accuracy: Option<f64>,
    pub final_unlabeled_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
    pub state: TrainState,
}

/// Runs `train_step` until `total_steps` (or `stop_at`), logging and
/// evaluating every `eval_every` steps and at the end.
pub fn run_training(config: TrainConfig, split: &SslSplit, options: &RunOptions) -> Result<RunOutcome> {
    let mut state = match &options.resume_from {
        Some(arrays) => TrainState::restore(config, split, arrays)?,
        None => TrainState::new(config, split)?,
    };
    let cfg = state.config.clone();
    let end = options.stop_at.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let mut sampler = BatchSampler::new(split.labeled.len(), split.unlabeled.len(), cfg.batch_size, cfg.mu, cfg.seed)?;
    let mut metrics_file = match &options.metrics_path {
        Some(p) => Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?,
        ),
        None => None,
    };

    let mut records = Vec::new();
    let mut last: Option<MetricsRecord> = None;
    while state.step < end {
        let idx = sampler.batch(state.step);
        let batch = StepBatch::from_split(split, &idx.labeled, &idx.unlabeled);
        let mut record = state.train_step(&batch)?;
        if record.step % cfg.eval_every == 0 || record.step == cfg.total_steps {
            if !split.test.is_empty() {
                record.validation_accuracy = Some(evaluate(&state.ema.params, cfg.feature_norm, &split.test)?);
            }
            if let (Some(f), Some(p)) = (metrics_file.as_mut(), options.metrics_path.as_ref()) {
                let line = serde_json::to_string(&record).expect("metrics serialize");
                writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
            }
            records.push(record.clone());
        }
        last = Some(record);
    }

    let (final_accuracy, final_live_accuracy) = if split.test.is_empty() {
        (0.0, 0.0)
    } else {
        (
            evaluate(&state.ema.params, cfg.feature_norm, &split.test)?,
            evaluate(&state.params, cfg.feature_norm, &split.test)?,
        )
    };
    let summary = RunSummary {
        steps: state.step,
        seed: cfg.seed,
        final_accuracy,
        final_live_accuracy,
        mean_norm_gap: state.mean_norm_gap(),
        final_pseudo_label_accuracy: last.as_ref().and_then(|r| r.pseudo_label_accuracy),
        final_unlabeled_accuracy: last.as_ref().and_then(|r| r.unlabeled_accuracy),
    };
    if let Some(p) = &options.checkpoint_path {
        state.to_checkpoint().save(p)?;
    }
    Ok(RunOutcome {
        records,
        summary,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_values() {
        assert_eq!(cosine_lr(0, 3000, 0.03).unwrap(), 0.03);
        assert!((cosine_lr(3000, 3000, 0.03).unwrap() - 0.0058527).abs() < 1e-6);
        assert!((cosine_lr(1500, 3000, 0.03).unwrap() - 0.0231903).abs() < 1e-6);
        assert!(matches!(cosine_lr(3001, 3000, 0.03), Err(Error::Parameter(_))));
        assert_eq!(cosine_lr(0, 0, 0.03).unwrap(), 0.03);
    }

    #[test]
    fn nesterov_examples() {
        // zero gradient, no decay: v ← m·v, θ ← θ − lr·m·v
        let mut p = Tensor::row(&[1.0]);
        let mut v = Tensor::row(&[2.0]);
        sgd_nesterov_step(&mut p, &Tensor::row(&[0.0]), &mut v, 0.1, 0.5, 0.0).unwrap();
        assert_eq!(v.item(), 1.0);
        assert_eq!(p.item(), 1.0 - 0.1 * 0.5 * 1.0);

        // first step from v = 0: θ ← θ − lr·(1+m)·g'
        let mut p = Tensor::row(&[1.0, -2.0]);
        let mut v = Tensor::zeros(1, 2);
        let g = Tensor::row(&[0.5, 0.25]);
        sgd_nesterov_step(&mut p, &g, &mut v, 0.1, 0.9, 0.01).unwrap();
        for (i, (&p0, &gi)) in [1.0, -2.0].iter().zip(g.data()).enumerate() {
            let gp = gi + 0.01 * p0;
            assert!((p.data()[i] - (p0 - 0.1 * 1.9 * gp)).abs() < 1e-15);
        }

        // pure decay
        let mut p = Tensor::row(&[3.0]);
        let mut v = Tensor::zeros(1, 1);
        sgd_nesterov_step(&mut p, &Tensor::row(&[0.0]), &mut v, 0.1, 0.0, 0.5).unwrap();
        assert!((p.item() - 3.0 * (1.0 - 0.05)).abs() < 1e-15);

        assert!(sgd_nesterov_step(&mut p, &Tensor::zeros(1, 2), &mut v, 0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn norm_gap_definition() {
        let s = Tensor::from_rows(&[[3.0, 4.0], [0.0, 1.0]]).unwrap();
        let w = Tensor::from_rows(&[[0.0, 1.0], [0.0, 2.0]]).unwrap();
        assert_eq!(mean_norm_gap(&s, &w), (4.0 + 1.0) / 2.0);
    }

    #[test]
    fn evaluate_constant_model_on_balanced_set() {
        let cfg = TrainConfig::default();
        let mut params = ModelParams::init(&cfg.model_config(2, 2), 0).unwrap();
        params.heads.classifier = Tensor::zeros(32, 2);
        let test = LabeledSet {
            features: Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0], [2.0, 1.0], [-1.0, 0.5]]).unwrap(),
            labels: vec![0, 1, 0, 1],
            indices: vec![0, 1, 2, 3],
        };
        // uniform output, ties go to class 0
        assert_eq!(evaluate(&params, true, &test).unwrap(), 0.5);
        let empty = LabeledSet {
            features: Tensor::zeros(0, 2),
            labels: vec![],
            indices: vec![],
        };
        assert!(evaluate(&params, true, &empty).is_err());
    }
}
