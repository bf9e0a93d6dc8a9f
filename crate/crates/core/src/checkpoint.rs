//! Versioned text format for named arrays.
//!
//! ```text
//! simmatch-checkpoint 1
//! <name> <rows> <cols> <v0> <v1> ...
//! ```
//!
//! One array per line, values row-major in shortest round-trip exponent
//! notation, so loading reproduces every finite double exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{GraphNode, NodeBank, ProbDist};
use crate::model::{EncoderParams, Heads, Linear, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &str = "simmatch-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedArrays {
    entries: Vec<(String, Tensor)>,
}

impl NamedArrays {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.push((name.into(), value));
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.push(name, Tensor::scalar(value));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Validation(format!("checkpoint has no array `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if t.len() != 1 {
            return Err(Error::Validation(format!("checkpoint array `{name}` is not a scalar")));
        }
        Ok(t.item())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION}\n");
        for (name, t) in &self.entries {
            write!(out, "{name} {} {}", t.rows(), t.cols()).expect("write to string");
            for v in t.data() {
                write!(out, " {v:e}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse {
            path: "<checkpoint>".into(),
            line: line as u64,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty checkpoint".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(bad(1, format!("missing `{MAGIC}` header")));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(1, "missing version".into()))?;
        if version != VERSION {
            return Err(bad(1, format!("unsupported checkpoint version {version}")));
        }
        let mut arrays = NamedArrays::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let name = fields.next().expect("non-empty line").to_string();
            let mut dim = || -> Result<usize> {
                fields
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(lineno, format!("array `{name}` has a malformed shape")))
            };
            let (rows, cols) = (dim()?, dim()?);
            let values = fields
                .map(|f| f.parse::<f64>().map_err(|_| bad(lineno, format!("invalid number `{f}`"))))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != rows * cols {
                return Err(bad(
                    lineno,
                    format!("array `{name}` declares {rows}x{cols} but has {} values", values.len()),
                ));
            }
            arrays.push(name, Tensor::new(rows, cols, values)?);
        }
        Ok(arrays)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            },
            other => other,
        })
    }
}

pub fn push_params(arrays: &mut NamedArrays, prefix: &str, params: &ModelParams) {
    for (name, t) in params.named() {
        arrays.push(format!("{prefix}.{name}"), t.clone());
    }
}

pub fn read_params(arrays: &NamedArrays, prefix: &str) -> Result<ModelParams> {
    let get = |name: &str| arrays.get(&format!("{prefix}.{name}")).cloned();
    let mut layers = Vec::new();
    while arrays.contains(&format!("{prefix}.encoder.{}.weight", layers.len())) {
        let i = layers.len();
        layers.push(Linear {
            weight: get(&format!("encoder.{i}.weight"))?,
            bias: get(&format!("encoder.{i}.bias"))?,
        });
    }
    let params = ModelParams {
        encoder: EncoderParams { layers },
        heads: Heads {
            classifier: get("classifier.weight")?,
            proj1: Linear {
                weight: get("proj.0.weight")?,
                bias: get("proj.0.bias")?,
            },
            proj2: Linear {
                weight: get("proj.1.weight")?,
                bias: get("proj.1.bias")?,
            },
            ln_gain: get("norm.gain")?,
            ln_bias: get("norm.bias")?,
        },
    };
    check_chain(&params)?;
    Ok(params)
}

fn check_chain(p: &ModelParams) -> Result<()> {
    let mut width = None;
    for l in &p.encoder.layers {
        if let Some(w) = width {
            if l.weight.rows() != w {
                return Err(Error::shape("checkpoint encoder", [w, 0], l.weight.shape()));
            }
        }
        if l.bias.shape() != [1, l.weight.cols()] {
            return Err(Error::shape("checkpoint encoder bias", l.weight.shape(), l.bias.shape()));
        }
        width = Some(l.weight.cols());
    }
    let feature = p.heads.classifier.rows();
    if width.is_some_and(|w| w != feature) || p.heads.proj1.weight.rows() != feature {
        return Err(Error::shape(
            "checkpoint heads",
            p.heads.classifier.shape(),
            p.heads.proj1.weight.shape(),
        ));
    }
    Ok(())
}

pub fn push_bank(arrays: &mut NamedArrays, prefix: &str, bank: &NodeBank) {
    arrays.push(format!("{prefix}.z"), bank.embeddings());
    arrays.push(format!("{prefix}.labels"), bank.labels());
    arrays.push(
        format!("{prefix}.meta"),
        Tensor::row(&[bank.capacity() as f64, bank.cursor() as f64]),
    );
    let keys: Vec<f64> = bank
        .key_slots()
        .iter()
        .map(|k| k.map_or(-1.0, |p| p as f64))
        .collect();
    arrays.push(format!("{prefix}.keys"), Tensor::row(&keys));
}

pub fn read_bank(arrays: &NamedArrays, prefix: &str) -> Result<NodeBank> {
    let z = arrays.get(&format!("{prefix}.z"))?;
    let labels = arrays.get(&format!("{prefix}.labels"))?;
    let meta = arrays.get(&format!("{prefix}.meta"))?;
    let keys = arrays.get(&format!("{prefix}.keys"))?;
    if meta.len() != 2 || z.rows() != labels.rows() {
        return Err(Error::Validation(format!("bank `{prefix}` arrays are inconsistent")));
    }
    let nodes = z
        .row_iter()
        .zip(labels.row_iter())
        .map(|(zr, lr)| GraphNode::new(zr.to_vec(), ProbDist::new(lr.to_vec())?))
        .collect::<Result<Vec<_>>>()?;
    let key_slots = keys
        .data()
        .iter()
        .map(|&k| if k < 0.0 { None } else { Some(k as usize) })
        .collect();
    NodeBank::from_parts(meta.data()[0] as usize, nodes, meta.data()[1] as usize, key_slots)
}
