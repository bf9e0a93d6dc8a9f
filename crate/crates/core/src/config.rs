//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional
//! and falls back to its default; unknown or repeated keys are errors.
//! [`RunConfig::to_text`] writes every key with its documentation and parses
//! back to the same value.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{self, Dataset, SplitSpec, SslSplit};
use crate::error::{Error, Result};
use crate::trainer::{DaOrder, NodeEdgeTarget, ThresholdSource, TrainConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetSource {
    TwoMoons,
    Circles,
    Blobs,
    Csv(PathBuf),
}

/// Where the data comes from and how it is split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub n_samples: usize,
    pub noise: f64,
    pub blob_classes: usize,
    /// Seed of generation and splitting; `None` follows the training seed.
    pub data_seed: Option<u64>,
    pub labeled_per_class: usize,
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DatasetSource::TwoMoons,
            n_samples: 2000,
            noise: 0.15,
            blob_classes: 3,
            data_seed: None,
            labeled_per_class: 2,
            test_fraction: 0.25,
        }
    }
}

impl DatasetConfig {
    pub fn seed(&self, train_seed: u64) -> u64 {
        self.data_seed.unwrap_or(train_seed)
    }

    /// Generates or loads the full dataset.
    pub fn dataset(&self, train_seed: u64) -> Result<Dataset> {
        let seed = self.seed(train_seed);
        match &self.source {
            DatasetSource::TwoMoons => data::gen_two_moons(self.n_samples, self.noise, seed),
            DatasetSource::Circles => data::gen_circles(self.n_samples, self.noise, seed),
            DatasetSource::Blobs => data::gen_blobs(self.n_samples, self.blob_classes, self.noise, seed),
            DatasetSource::Csv(path) => data::load_csv(path),
        }
    }

    pub fn split_spec(&self, train_seed: u64) -> SplitSpec {
        SplitSpec {
            labeled_per_class: self.labeled_per_class,
            seed: self.seed(train_seed),
            test_fraction: self.test_fraction,
        }
    }

    pub fn split(&self, train_seed: u64) -> Result<SslSplit> {
        data::make_ssl_split(&self.dataset(train_seed)?, &self.split_spec(train_seed))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
}

struct Key {
    name: &'static str,
    doc: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> std::result::Result<(), String>,
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

macro_rules! key {
    ($name:literal, $doc:literal, $($field:ident).+, $parse:expr) => {
        Key {
            name: $name,
            doc: $doc,
            get: |c| c.$($field).+.to_string(),
            set: |c, v| {
                c.$($field).+ = $parse(v)?;
                Ok(())
            },
        }
    };
}

const KEYS: &[Key] = &[
    key!("lambda_nn", "weight of the node-node term", train.weights.lambda_nn, num),
    key!("lambda_ne", "weight of the node-edge term", train.weights.lambda_ne, num),
    key!("lambda_ee", "weight of the edge-edge term", train.weights.lambda_ee, num),
    key!("tau", "confidence threshold of the node-node term", train.weights.tau, num),
    key!("t", "edge softmax temperature", train.weights.t, num),
    key!("alpha", "label propagation weight, in (0, 1)", train.weights.alpha, num),
    key!("topn", "labeled neighbours used for propagation", train.topn, num),
    key!("batch_size", "labeled rows per step", train.batch_size, num),
    key!("mu", "unlabeled rows per labeled row", train.mu, num),
    key!("total_steps", "optimizer steps", train.total_steps, num),
    key!("base_lr", "peak learning rate of the cosine schedule", train.base_lr, num),
    key!("momentum", "Nesterov momentum", train.momentum, num),
    key!("weight_decay", "L2 weight decay, not applied to normalization parameters", train.weight_decay, num),
    key!("ema_decay", "decay of the evaluation shadow weights", train.ema_decay, num),
    key!("unlabeled_bank_size", "capacity of the unlabeled memory bank", train.unlabeled_bank_size, num),
    key!("feature_norm", "layer-normalize features before the heads", train.feature_norm, flag),
    key!("use_nn", "enable the node-node term", train.toggles.node_node, flag),
    key!("use_ne", "enable the node-edge term", train.toggles.node_edge, flag),
    key!("use_ee", "enable the edge-edge term", train.toggles.edge_edge, flag),
    key!("use_en", "use propagated labels as node-node targets", train.toggles.edge_node, flag),
    key!("distribution_alignment", "align weak predictions to the labeled class marginal", train.distribution_alignment, flag),
    key!("da_momentum", "momentum of the running prediction marginal", train.da_momentum, num),
    Key {
        name: "da_order",
        doc: "align_then_propagate or propagate_then_align",
        get: |c| {
            match c.train.da_order {
                DaOrder::AlignThenPropagate => "align_then_propagate",
                DaOrder::PropagateThenAlign => "propagate_then_align",
            }
            .into()
        },
        set: |c, v| {
            c.train.da_order = match v {
                "align_then_propagate" => DaOrder::AlignThenPropagate,
                "propagate_then_align" => DaOrder::PropagateThenAlign,
                _ => return Err(format!("unknown order `{v}`")),
            };
            Ok(())
        },
    },
    Key {
        name: "threshold_source",
        doc: "target (the node-node target) or weak (the aligned weak prediction)",
        get: |c| {
            match c.train.threshold_source {
                ThresholdSource::Target => "target",
                ThresholdSource::WeakPrediction => "weak",
            }
            .into()
        },
        set: |c, v| {
            c.train.threshold_source = match v {
                "target" => ThresholdSource::Target,
                "weak" => ThresholdSource::WeakPrediction,
                _ => return Err(format!("unknown threshold source `{v}`")),
            };
            Ok(())
        },
    },
    Key {
        name: "node_edge_target",
        doc: "aligned or propagated target of the node-edge term",
        get: |c| {
            match c.train.node_edge_target {
                NodeEdgeTarget::Aligned => "aligned",
                NodeEdgeTarget::Propagated => "propagated",
            }
            .into()
        },
        set: |c, v| {
            c.train.node_edge_target = match v {
                "aligned" => NodeEdgeTarget::Aligned,
                "propagated" => NodeEdgeTarget::Propagated,
                _ => return Err(format!("unknown node-edge target `{v}`")),
            };
            Ok(())
        },
    },
    key!("warmup_steps", "linear learning-rate warm-up steps", train.warmup_steps, num),
    key!("eval_every", "steps between logged records", train.eval_every, num),
    key!("seed", "training seed", train.seed, num),
    Key {
        name: "hidden_dims",
        doc: "comma-separated encoder hidden widths, empty for none",
        get: |c| {
            c.train
                .model
                .hidden_dims
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(",")
        },
        set: |c, v| {
            c.train.model.hidden_dims = if v.is_empty() {
                Vec::new()
            } else {
                v.split(',').map(|d| num(d.trim())).collect::<std::result::Result<_, _>>()?
            };
            Ok(())
        },
    },
    key!("feature_dim", "encoder output width", train.model.feature_dim, num),
    key!("proj_hidden", "projection head hidden width", train.model.proj_hidden, num),
    key!("proj_dim", "embedding width", train.model.proj_dim, num),
    key!("weak_noise_sigma", "Gaussian noise of the weak view", train.augment.weak_noise_sigma, num),
    key!("strong_noise_sigma", "Gaussian noise of the strong view", train.augment.strong_noise_sigma, num),
    key!("strong_dropout_rate", "coordinate dropout of the strong view", train.augment.strong_dropout_rate, num),
    key!("strong_scale_jitter", "per-row scale jitter of the strong view", train.augment.strong_scale_jitter, num),
    Key {
        name: "dataset",
        doc: "two_moons, circles, blobs or csv:PATH",
        get: |c| match &c.dataset.source {
            DatasetSource::TwoMoons => "two_moons".into(),
            DatasetSource::Circles => "circles".into(),
            DatasetSource::Blobs => "blobs".into(),
            DatasetSource::Csv(p) => format!("csv:{}", p.display()),
        },
        set: |c, v| {
            c.dataset.source = match v {
                "two_moons" => DatasetSource::TwoMoons,
                "circles" => DatasetSource::Circles,
                "blobs" => DatasetSource::Blobs,
                _ => match v.strip_prefix("csv:") {
                    Some(p) if !p.is_empty() => DatasetSource::Csv(PathBuf::from(p)),
                    _ => return Err(format!("unknown dataset `{v}`")),
                },
            };
            Ok(())
        },
    },
    key!("n_samples", "generated dataset size", dataset.n_samples, num),
    key!("noise", "generator noise (blob spread for blobs)", dataset.noise, num),
    key!("blob_classes", "number of blobs", dataset.blob_classes, num),
    Key {
        name: "data_seed",
        doc: "seed of generation and splitting, or `seed` to follow the training seed",
        get: |c| c.dataset.data_seed.map_or("seed".into(), |s| s.to_string()),
        set: |c, v| {
            c.dataset.data_seed = if v == "seed" { None } else { Some(num(v)?) };
            Ok(())
        },
    },
    key!("labeled_per_class", "labeled examples per class", dataset.labeled_per_class, num),
    key!("test_fraction", "held-out fraction of the dataset", dataset.test_fraction, num),
];

impl RunConfig {
    /// Every key with its one-line description.
    pub fn documented_keys() -> impl Iterator<Item = (&'static str, &'static str)> {
        KEYS.iter().map(|k| (k.name, k.doc))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((name, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    key: line.to_string(),
                    msg: format!("line {} is not `key = value`", i + 1),
                });
            };
            let (name, value) = (name.trim(), value.trim());
            let key = KEYS.iter().find(|k| k.name == name).ok_or_else(|| Error::Config {
                key: name.to_string(),
                msg: "unknown key".into(),
            })?;
            if seen.contains(&key.name) {
                return Err(Error::Config {
                    key: name.to_string(),
                    msg: "set more than once".into(),
                });
            }
            seen.push(key.name);
            (key.set)(&mut config, value).map_err(|msg| Error::Config {
                key: name.to_string(),
                msg,
            })?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Range checks, reported against the offending key.
    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| match e {
            Error::Parameter(msg) => {
                let key = KEYS
                    .iter()
                    .map(|k| k.name)
                    .filter(|k| msg.split(|c: char| !c.is_alphanumeric() && c != '_').any(|w| w == *k))
                    .next()
                    .unwrap_or("config");
                Error::Config {
                    key: key.to_string(),
                    msg,
                }
            }
            other => other,
        })?;
        let model = self.train.model_config(2, 2);
        model.validate().map_err(|e| Error::Config {
            key: "proj_dim".into(),
            msg: e.to_string(),
        })?;
        let d = &self.dataset;
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(Error::Config {
                key: "test_fraction".into(),
                msg: format!("must be in [0, 1), got {}", d.test_fraction),
            });
        }
        if d.labeled_per_class == 0 {
            return Err(Error::Config {
                key: "labeled_per_class".into(),
                msg: "must be at least 1".into(),
            });
        }
        if !(d.noise >= 0.0) {
            return Err(Error::Config {
                key: "noise".into(),
                msg: format!("must be non-negative, got {}", d.noise),
            });
        }
        Ok(())
    }

    /// Every key, documented, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            writeln!(out, "# {}\n{} = {}", k.doc, k.name, (k.get)(self)).expect("write to string");
        }
        out
    }
}
