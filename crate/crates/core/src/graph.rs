//! Memory banks of graph nodes, similarity edges, hollow affinity matrices
//! and transductive label propagation.

use crate::diff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Tensor};

const NODE_TOL: f64 = 1e-9;

/// Non-negative vector summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("empty distribution".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Validation(format!("distribution entry {v} is not a non-negative finite number")));
        }
        let s: f64 = values.iter().sum();
        if (s - 1.0).abs() > NODE_TOL {
            return Err(Error::Validation(format!("distribution sums to {s}, expected 1")));
        }
        Ok(ProbDist(values))
    }

    /// Scales non-negative `values` to sum to one.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let s: f64 = values.iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Degenerate(format!("cannot normalize a vector with sum {s}")));
        }
        ProbDist::new(values.into_iter().map(|v| v / s).collect())
    }

    pub fn one_hot(class: usize, classes: usize) -> Result<Self> {
        if class >= classes {
            return Err(Error::Validation(format!("class {class} out of range for {classes} classes")));
        }
        let mut v = vec![0.0; classes];
        v[class] = 1.0;
        Ok(ProbDist(v))
    }

    pub fn uniform(classes: usize) -> Self {
        ProbDist(vec![1.0 / classes as f64; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn argmax(&self) -> usize {
        crate::tensor::argmax(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// A unit-norm embedding with its label distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    z: Vec<f64>,
    label: ProbDist,
}

impl GraphNode {
    pub fn new(z: Vec<f64>, label: ProbDist) -> Result<Self> {
        let n = norm(&z);
        if (n - 1.0).abs() > NODE_TOL {
            return Err(Error::Validation(format!("node embedding has norm {n}, expected 1")));
        }
        Ok(GraphNode { z, label })
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn label(&self) -> &ProbDist {
        &self.label
    }
}

/// Fixed-capacity store of graph nodes.
///
/// [`NodeBank::insert`] treats the bank as a FIFO ring; [`NodeBank::store`]
/// addresses it by a caller-supplied key in `0..capacity`. A bank is used in
/// one mode only.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeBank {
    capacity: usize,
    nodes: Vec<GraphNode>,
    cursor: usize,
    key_slots: Vec<Option<usize>>,
}

impl NodeBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Parameter("bank capacity must be positive".into()));
        }
        Ok(NodeBank {
            capacity,
            nodes: Vec::new(),
            cursor: 0,
            key_slots: Vec::new(),
        })
    }

    /// Rebuilds a bank from its parts, e.g. when loading a checkpoint.
    pub fn from_parts(
        capacity: usize,
        nodes: Vec<GraphNode>,
        cursor: usize,
        key_slots: Vec<Option<usize>>,
    ) -> Result<Self> {
        let mut bank = NodeBank::new(capacity)?;
        if nodes.len() > capacity || cursor >= capacity {
            return Err(Error::Validation(format!(
                "bank state inconsistent: {} nodes, cursor {cursor}, capacity {capacity}",
                nodes.len()
            )));
        }
        if !key_slots.is_empty() {
            let valid = key_slots.len() == capacity
                && key_slots.iter().flatten().all(|&p| p < nodes.len())
                && key_slots.iter().flatten().count() == nodes.len();
            if !valid {
                return Err(Error::Validation("bank key table inconsistent".into()));
            }
        }
        bank.nodes = nodes;
        bank.cursor = cursor;
        bank.key_slots = key_slots;
        Ok(bank)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn key_slots(&self) -> &[Option<usize>] {
        &self.key_slots
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    /// Writes `node` at the cursor and advances it modulo the capacity.
    pub fn insert(&mut self, node: GraphNode) -> Result<()> {
        if !self.key_slots.is_empty() {
            return Err(Error::State("bank is keyed; use store".into()));
        }
        self.check_node(&node)?;
        if self.nodes.len() < self.capacity {
            self.nodes.push(node);
        } else {
            self.nodes[self.cursor] = node;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// Writes `node` into the slot owned by `key`, replacing its previous node.
    pub fn store(&mut self, key: usize, node: GraphNode) -> Result<()> {
        if key >= self.capacity {
            return Err(Error::Parameter(format!("bank key {key} exceeds capacity {}", self.capacity)));
        }
        if self.key_slots.is_empty() {
            if !self.nodes.is_empty() {
                return Err(Error::State("bank is a FIFO ring; use insert".into()));
            }
            self.key_slots = vec![None; self.capacity];
        }
        self.check_node(&node)?;
        match self.key_slots[key] {
            Some(pos) => self.nodes[pos] = node,
            None => {
                self.key_slots[key] = Some(self.nodes.len());
                self.nodes.push(node);
            }
        }
        Ok(())
    }

    fn check_node(&self, node: &GraphNode) -> Result<()> {
        if let Some(first) = self.nodes.first() {
            if first.z.len() != node.z.len() || first.label.len() != node.label.len() {
                return Err(Error::Validation(format!(
                    "node dims ({}, {}) do not match bank ({}, {})",
                    node.z.len(),
                    node.label.len(),
                    first.z.len(),
                    first.label.len()
                )));
            }
        }
        Ok(())
    }

    /// Embeddings as a `len × dim` matrix, in storage order.
    pub fn embeddings(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.nodes.iter().map(|n| n.z()).collect();
        Tensor::from_rows(&rows).expect("bank nodes share a dimension")
    }

    /// Labels as a `len × C` matrix, in storage order.
    pub fn labels(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.nodes.iter().map(|n| n.label.as_slice()).collect();
        Tensor::from_rows(&rows).expect("bank labels share a dimension")
    }

    fn require_non_empty(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::State("memory bank is empty".into()));
        }
        Ok(())
    }
}

/// Softmax over the similarities between `z_query` and every bank node.
pub fn edges(z_query: &[f64], bank: &NodeBank, temperature: f64) -> Result<ProbDist> {
    bank.require_non_empty()?;
    let sims: Vec<f64> = bank.nodes.iter().map(|n| dot(z_query, n.z())).collect();
    let out = diff::softmax_rows(&Tensor::row(&sims), temperature)?;
    ProbDist::normalized(out.into_data())
}

/// Differentiable edges for a batch of query embeddings against fixed bank
/// embeddings (`K × d`). Returns an `m × K` row-stochastic matrix.
pub fn edges_on_tape(tape: &mut Tape, z_query: Var, bank_embeddings: &Tensor, temperature: f64) -> Result<Var> {
    if bank_embeddings.rows() == 0 {
        return Err(Error::State("memory bank is empty".into()));
    }
    let bank_t = tape.constant(bank_embeddings.transpose());
    let sims = tape.matmul(z_query, bank_t)?;
    tape.softmax_rows(sims, temperature)
}

/// Square, non-negative, hollow, row-stochastic matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix(Tensor);

impl AffinityMatrix {
    pub const ROW_TOL: f64 = 1e-10;

    pub fn new(a: Tensor) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::Validation(format!("affinity matrix is not square: {:?}", a.shape())));
        }
        for i in 0..a.rows() {
            if a.get(i, i) != 0.0 {
                return Err(Error::Validation(format!("affinity matrix is not hollow: A[{i},{i}] = {}", a.get(i, i))));
            }
            let row = a.row_slice(i);
            if let Some(v) = row.iter().find(|v| !(**v >= 0.0)) {
                return Err(Error::Validation(format!("affinity matrix has negative entry {v} in row {i}")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > Self::ROW_TOL {
                return Err(Error::Validation(format!("affinity row {i} sums to {s}, not row-stochastic")));
            }
        }
        Ok(AffinityMatrix(a))
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }
}

/// Pairwise `exp(z_i · z_j / t)` with a zeroed diagonal, normalized per row.
pub fn affinity_matrix(z: &Tensor, temperature: f64) -> Result<AffinityMatrix> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {temperature}")));
    }
    let n = z.rows();
    if n < 2 {
        return Err(Error::Degenerate(format!("affinity matrix needs at least 2 nodes, got {n}")));
    }
    let sims = z.matmul_t(z)?;
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        // Shift by the largest off-diagonal similarity; it cancels in the normalization.
        let max = (0..n)
            .filter(|&j| j != i)
            .map(|j| sims.get(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        let row = a.row_slice_mut(i);
        for (j, r) in row.iter_mut().enumerate() {
            if j != i {
                *r = ((sims.get(i, j) - max) / temperature).exp();
            }
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    AffinityMatrix::new(a)
}

/// Selected neighbourhood of a query: representations, labels and bank
/// positions, in similarity-descending order.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbourhood {
    pub embeddings: Tensor,
    pub labels: Tensor,
    pub indices: Vec<usize>,
}

/// The `min(n, len)` bank nodes most similar to `z_query`. Ties go to the
/// lower bank position.
pub fn topn_select(z_query: &[f64], bank: &NodeBank, n: usize) -> Result<Neighbourhood> {
    if n == 0 {
        return Err(Error::Parameter("top-N needs N >= 1".into()));
    }
    bank.require_non_empty()?;
    let sims: Vec<f64> = bank.nodes.iter().map(|node| dot(z_query, node.z())).collect();
    let mut order: Vec<usize> = (0..sims.len()).collect();
    // stable sort keeps lower indices first among equal similarities
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    order.truncate(n);
    let embeddings = Tensor::from_rows(&order.iter().map(|&i| bank.nodes[i].z()).collect::<Vec<_>>())?;
    let labels = Tensor::from_rows(&order.iter().map(|&i| bank.nodes[i].label.as_slice()).collect::<Vec<_>>())?;
    Ok(Neighbourhood {
        embeddings,
        labels,
        indices: order,
    })
}

fn check_propagation_inputs(a: &AffinityMatrix, y0: &Tensor) -> Result<()> {
    if a.size() != y0.rows() {
        return Err(Error::shape("propagate", a.as_tensor().shape(), y0.shape()));
    }
    Ok(())
}

/// `φ` steps of `Y ← α·A·Y + (1 − α)·Y₀`.
pub fn propagate_iterative(a: &AffinityMatrix, y0: &Tensor, alpha: f64, iterations: usize) -> Result<Tensor> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Parameter(format!("alpha must be in (0, 1], got {alpha}")));
    }
    if iterations == 0 {
        return Err(Error::Parameter("propagation needs at least one iteration".into()));
    }
    check_propagation_inputs(a, y0)?;
    let mut y = y0.clone();
    for _ in 0..iterations {
        let ay = a.as_tensor().matmul(&y)?;
        y = ay.zip_map(y0, "propagate", |p, q| alpha * p + (1.0 - alpha) * q)?;
    }
    Ok(y)
}

/// Fixed point `(1 − α)(I − α·A)⁻¹ Y₀`, via an LU solve.
pub fn propagate_closed(a: &AffinityMatrix, y0: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must be in (0, 1), got {alpha}")));
    }
    check_propagation_inputs(a, y0)?;
    let n = a.size();
    let system = Tensor::from_fn(n, n, |i, j| {
        let eye = if i == j { 1.0 } else { 0.0 };
        eye - alpha * a.as_tensor().get(i, j)
    });
    let rhs = y0.map(|v| (1.0 - alpha) * v);
    lu_solve(&system, &rhs)
}

/// Solves `m · X = rhs` by LU factorization with partial pivoting.
pub fn lu_solve(m: &Tensor, rhs: &Tensor) -> Result<Tensor> {
    let n = m.rows();
    if m.cols() != n || rhs.rows() != n {
        return Err(Error::shape("lu_solve", m.shape(), rhs.shape()));
    }
    let mut lu = m.clone();
    let mut x = rhs.clone();
    let k = rhs.cols();
    let scale = m.data().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&a, &b| lu.get(a, col).abs().total_cmp(&lu.get(b, col).abs()))
            .expect("non-empty pivot range");
        let pivot = lu.get(pivot_row, col);
        if pivot.abs() <= f64::EPSILON * scale * n as f64 || pivot == 0.0 {
            return Err(Error::Numerical(format!("singular system: pivot {pivot:e} in column {col}")));
        }
        if pivot_row != col {
            for j in 0..n {
                let t = lu.get(col, j);
                lu.set(col, j, lu.get(pivot_row, j));
                lu.set(pivot_row, j, t);
            }
            for j in 0..k {
                let t = x.get(col, j);
                x.set(col, j, x.get(pivot_row, j));
                x.set(pivot_row, j, t);
            }
        }
        for r in col + 1..n {
            let factor = lu.get(r, col) / pivot;
            if factor == 0.0 {
                continue;
            }
            lu.set(r, col, factor);
            for j in col + 1..n {
                lu.set(r, j, lu.get(r, j) - factor * lu.get(col, j));
            }
            for j in 0..k {
                x.set(r, j, x.get(r, j) - factor * x.get(col, j));
            }
        }
    }
    for row in (0..n).rev() {
        for j in 0..k {
            let mut v = x.get(row, j);
            for c in row + 1..n {
                v -= lu.get(row, c) * x.get(c, j);
            }
            x.set(row, j, v / lu.get(row, row));
        }
    }
    Ok(x)
}

/// Propagated pseudo-label for one weak node against the labeled bank: the
/// first row of the converged propagation over the query and its top-N
/// neighbours, renormalized to sum to one. No gradient flows through it.
pub fn propagated_pseudo_label(
    z_w: &[f64],
    p_w: &ProbDist,
    labeled_bank: &NodeBank,
    top_n: usize,
    alpha: f64,
    temperature: f64,
) -> Result<ProbDist> {
    let hood = topn_select(z_w, labeled_bank, top_n)?;
    if hood.labels.cols() != p_w.len() {
        return Err(Error::shape("propagated_pseudo_label", [1, p_w.len()], hood.labels.shape()));
    }
    let query_z = Tensor::row(z_w);
    let query_y = Tensor::row(p_w.as_slice());
    let z = Tensor::concat_rows(&[&query_z, &hood.embeddings])?;
    let y0 = Tensor::concat_rows(&[&query_y, &hood.labels])?;
    let a = affinity_matrix(&z, temperature)?;
    let y = propagate_closed(&a, &y0, alpha)?;
    let first: Vec<f64> = y.row_slice(0).iter().map(|v| v.max(0.0)).collect();
    ProbDist::normalized(first)
}
