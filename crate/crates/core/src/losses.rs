//! Supervised and consistency objectives, their weighted sum, and
//! distribution alignment of weak-view predictions.
//!
//! Every loss here is a mean over rows of a cross-entropy, so all of them go
//! through [`Tape::cross_entropy_rows`]. Targets are expected to be
//! gradient-blocked by the caller ([`Tape::stop_gradient`] or constants).

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::ProbDist;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_nn: f64,
    pub lambda_ne: f64,
    pub lambda_ee: f64,
    /// Confidence threshold of the node-node term.
    pub tau: f64,
    /// Edge temperature.
    pub t: f64,
    /// Propagation weight.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_nn: 1.0,
            lambda_ne: 1.0,
            lambda_ee: 1.0,
            tau: 0.95,
            t: 0.1,
            alpha: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_nn", self.lambda_nn),
            ("lambda_ne", self.lambda_ne),
            ("lambda_ee", self.lambda_ee),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Parameter(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        if !(self.t > 0.0) {
            return Err(Error::Parameter(format!("t must be positive, got {}", self.t)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Parameter(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Mean cross-entropy of one-hot `y` against the weak labeled predictions.
pub fn supervised_loss(tape: &mut Tape, y: Var, p_w: Var) -> Result<Var> {
    for (i, row) in tape.value(y).row_iter().enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::Validation(format!("supervised target row {i} is not one-hot: {row:?}")));
        }
    }
    tape.cross_entropy_rows(y, p_w)
}

/// Rows whose largest entry is strictly above `tau`.
pub fn confidence_mask(gate: &Tensor, tau: f64) -> Vec<bool> {
    gate.row_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max) > tau)
        .collect()
}

/// Thresholded cross-entropy between gradient-blocked targets and strong
/// predictions, gated on the targets' own confidence. The mean runs over all
/// rows, not just the ones passing the threshold.
pub fn node_node_loss(tape: &mut Tape, targets: Var, p_s: Var, tau: f64) -> Result<Var> {
    let mask = confidence_mask(tape.value(targets), tau);
    node_node_loss_masked(tape, targets, p_s, &mask)
}

/// [`node_node_loss`] with an explicit per-row mask.
pub fn node_node_loss_masked(tape: &mut Tape, targets: Var, p_s: Var, mask: &[bool]) -> Result<Var> {
    let rows = tape.value(targets).rows();
    if mask.len() != rows {
        return Err(Error::shape("node_node_loss", [rows, 1], [mask.len(), 1]));
    }
    let m = Tensor::new(rows, 1, mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?;
    let m = tape.constant(m);
    let gated = tape.mul_col(targets, m)?;
    tape.cross_entropy_rows(gated, p_s)
}

/// Cross-entropy between weak targets and labels aggregated from the bank
/// with the strong-view edges `e_s` (`m × K`) as weights.
pub fn node_edge_loss(tape: &mut Tape, p_w_targets: Var, e_s: Var, bank_labels: Var) -> Result<Var> {
    if tape.value(bank_labels).rows() == 0 {
        return Err(Error::State("node-edge loss needs a non-empty bank".into()));
    }
    let aggregated = tape.matmul(e_s, bank_labels)?;
    tape.cross_entropy_rows(p_w_targets, aggregated)
}

/// Cross-entropy between weak edges (target) and strong edges, both taken
/// against the same bank snapshot.
pub fn edge_edge_loss(tape: &mut Tape, e_w: Var, e_s: Var) -> Result<Var> {
    let (w, s) = (tape.value(e_w).shape(), tape.value(e_s).shape());
    if w != s {
        return Err(Error::Contract(format!("edge-edge loss needs edges over the same bank: {w:?} vs {s:?}")));
    }
    tape.cross_entropy_rows(e_w, e_s)
}

/// Component losses; `None` for a disabled term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub supervised: Var,
    pub node_node: Option<Var>,
    pub node_edge: Option<Var>,
    pub edge_edge: Option<Var>,
}

/// `L_s + λ_nn·L_nn + λ_ne·L_ne + λ_ee·L_ee`. A term with a zero weight is
/// left out of the graph entirely, so it contributes no gradient.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights) -> Result<Var> {
    let mut total = terms.supervised;
    for (term, lambda) in [
        (terms.node_node, weights.lambda_nn),
        (terms.node_edge, weights.lambda_ne),
        (terms.edge_edge, weights.lambda_ee),
    ] {
        if let Some(v) = term {
            if lambda != 0.0 {
                let scaled = tape.scale(v, lambda);
                total = tape.add(total, scaled)?;
            }
        }
    }
    Ok(total)
}

const DA_FLOOR: f64 = 1e-6;

/// Running state of distribution alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct DaState {
    pub running_marginal: ProbDist,
    pub target_marginal: ProbDist,
    pub momentum: f64,
}

impl DaState {
    /// Starts from a uniform running marginal.
    pub fn new(target_marginal: ProbDist, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Parameter(format!("alignment momentum must be in (0, 1), got {momentum}")));
        }
        let classes = target_marginal.len();
        Ok(DaState {
            running_marginal: ProbDist::uniform(classes),
            target_marginal: floored(target_marginal.as_slice())?,
            momentum,
        })
    }

    /// Class frequencies of integer labels.
    pub fn target_from_labels(labels: &[usize], classes: usize) -> Result<ProbDist> {
        let mut counts = vec![0.0; classes];
        for &l in labels {
            if l >= classes {
                return Err(Error::Validation(format!("label {l} out of range for {classes} classes")));
            }
            counts[l] += 1.0;
        }
        ProbDist::normalized(counts)
    }
}

fn floored(values: &[f64]) -> Result<ProbDist> {
    ProbDist::normalized(values.iter().map(|v| v.max(DA_FLOOR)).collect())
}

/// Rescales each row by `target / running` and renormalizes, then folds the
/// batch mean of the raw rows into the running marginal.
pub fn distribution_align(p_w: &Tensor, state: &mut DaState) -> Result<Tensor> {
    let aligned = state.align_rows(p_w)?;
    state.observe(p_w)?;
    Ok(aligned)
}

impl DaState {
    /// Alignment without touching the running marginal.
    pub fn align_rows(&self, p: &Tensor) -> Result<Tensor> {
        let classes = self.target_marginal.len();
        if p.cols() != classes {
            return Err(Error::shape("distribution_align", p.shape(), [1, classes]));
        }
        let ratio: Vec<f64> = self
            .target_marginal
            .as_slice()
            .iter()
            .zip(self.running_marginal.as_slice())
            .map(|(t, r)| t / r)
            .collect();
        let mut aligned = p.clone();
        for i in 0..aligned.rows() {
            let row = aligned.row_slice_mut(i);
            for (v, r) in row.iter_mut().zip(&ratio) {
                *v *= r;
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(aligned)
    }

    /// Moves the running marginal towards the batch mean of `p`.
    pub fn observe(&mut self, p: &Tensor) -> Result<()> {
        let classes = self.target_marginal.len();
        if p.cols() != classes {
            return Err(Error::shape("distribution_align", p.shape(), [1, classes]));
        }
        if p.rows() == 0 {
            return Ok(());
        }
        let n = p.rows() as f64;
        let mut mean = vec![0.0; classes];
        for row in p.row_iter() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mom = self.momentum;
        let updated: Vec<f64> = self
            .running_marginal
            .as_slice()
            .iter()
            .zip(&mean)
            .map(|(r, m)| mom * r + (1.0 - mom) * m)
            .collect();
        self.running_marginal = floored(&updated)?;
        Ok(())
    }
}
