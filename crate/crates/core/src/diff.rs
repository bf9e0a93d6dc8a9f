//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] owns every value produced during a forward pass together with
//! the operation that produced it. [`Tape::backward`] replays the records in
//! reverse and returns the gradient of a scalar with respect to every node
//! that requires one. Leaves created with [`Tape::param`] require gradients;
//! leaves created with [`Tape::constant`] and everything downstream of
//! [`Tape::stop_gradient`] do not.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Log(Var),
    Exp(Var),
    Relu(Var),
    SoftmaxRows { x: Var, temperature: f64 },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, normalized: Tensor, inv_std: Vec<f64> },
    CrossEntropyRows { target: Var, pred: Var },
    StopGradient,
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Record {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    records: Vec<Record>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zeros if no gradient reached it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.records[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.records[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.records.push(Record {
            value,
            op,
            requires_grad,
        });
        Var(self.records.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.records[v.0].requires_grad)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds the `1 × n` row `r` to every row of the `m × n` matrix `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(r));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::shape("add_row", xv.shape(), rv.shape()));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_slice_mut(i).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let rg = self.any_grad(&[x, r]);
        Ok(self.push(out, Op::AddRow(x, r), rg))
    }

    /// Scales row `i` of `x` by entry `i` of the `m × 1` column `c`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(c));
        if cv.cols() != 1 || cv.rows() != xv.rows() {
            return Err(Error::shape("mul_col", xv.shape(), cv.shape()));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let s = cv.data()[i];
            out.row_slice_mut(i).iter_mut().for_each(|o| *o *= s);
        }
        let rg = self.any_grad(&[x, c]);
        Ok(self.push(out, Op::MulCol(x, c), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Natural log with the input clamped below at [`LOG_FLOOR`].
    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(LOG_FLOOR).ln());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Log(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Row-wise `softmax(x / temperature)`.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let out = softmax_rows(self.value(x), temperature)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SoftmaxRows { x, temperature }, rg))
    }

    /// Scales each row to unit Euclidean norm. All-zero rows are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let n = crate::tensor::norm(xv.row_slice(i));
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!("row {i} has norm {n}; cannot normalize")));
            }
            out.row_slice_mut(i).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Per-row standardization with population variance followed by an
    /// elementwise affine map with `1 × n` `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if gv.shape() != [1, n] {
            return Err(Error::shape("layer_norm gain", xv.shape(), gv.shape()));
        }
        if bv.shape() != [1, n] {
            return Err(Error::shape("layer_norm bias", xv.shape(), bv.shape()));
        }
        let mut normalized = xv.clone();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let row = xv.row_slice(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let h = (row[j] - mean) * is;
                normalized.set(i, j, h);
                out.set(i, j, h * gv.data()[j] + bv.data()[j]);
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean over rows of `−Σ_c target · log(pred)`, with `0 · log 0 = 0` and
    /// `pred` clamped at [`LOG_FLOOR`] inside the log.
    pub fn cross_entropy_rows(&mut self, target: Var, pred: Var) -> Result<Var> {
        let (tv, pv) = (self.value(target), self.value(pred));
        tv.same_shape(pv, "cross_entropy_rows")?;
        if let Some(v) = tv.data().iter().chain(pv.data()).find(|v| **v < 0.0) {
            return Err(Error::Domain(format!("cross-entropy input has negative entry {v}")));
        }
        let m = tv.rows().max(1) as f64;
        let total: f64 = tv
            .data()
            .iter()
            .zip(pv.data())
            .filter(|(t, _)| **t != 0.0)
            .map(|(t, p)| -t * p.max(LOG_FLOOR).ln())
            .sum();
        let rg = self.any_grad(&[target, pred]);
        Ok(self.push(Tensor::scalar(total / m), Op::CrossEntropyRows { target, pred }, rg))
    }

    /// Identity in the forward pass; blocks every gradient in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::StopGradient, false)
    }

    /// `m × n → m × 1`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.rows(), 1, xv.row_sums()).expect("row sums match rows");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::RowSum(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / xv.len().max(1) as f64);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Transpose(x), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, end)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, end)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&values)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Gradient of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != [1, 1] {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {shape:?}")));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.records[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let rec = &self.records[id];
            self.backprop_record(rec, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let shapes = self.records.iter().map(|r| r.value.shape()).collect();
        grads.resize(self.records.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.records[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn backprop_record(&self, rec: &Record, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.records[v.0].value;
        match &rec.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_t(val(*b))?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, val(*a).t_matmul(g)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), "mul", |x, y| x * y)?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), "mul", |x, y| x * y)?)?;
                }
            }
            Op::AddRow(x, r) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.requires_grad(*r) {
                    let mut col_sums = Tensor::zeros(1, g.cols());
                    for row in g.row_iter() {
                        for (s, v) in col_sums.data_mut().iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *r, col_sums)?;
                }
            }
            Op::MulCol(x, c) => {
                let (xv, cv) = (val(*x), val(*c));
                if self.requires_grad(*x) {
                    let mut gx = g.clone();
                    for i in 0..gx.rows() {
                        let s = cv.data()[i];
                        gx.row_slice_mut(i).iter_mut().for_each(|o| *o *= s);
                    }
                    self.accumulate(grads, *x, gx)?;
                }
                if self.requires_grad(*c) {
                    let gc = (0..xv.rows())
                        .map(|i| crate::tensor::dot(g.row_slice(i), xv.row_slice(i)))
                        .collect();
                    self.accumulate(grads, *c, Tensor::new(xv.rows(), 1, gc)?)?;
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s))?,
            Op::Log(x) => {
                let gx = g.zip_map(val(*x), "log", |gv, xv| if xv > LOG_FLOOR { gv / xv } else { 0.0 })?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Exp(x) => self.accumulate(grads, *x, g.zip_map(&rec.value, "exp", |a, b| a * b)?)?,
            Op::Relu(x) => {
                let gx = g.zip_map(val(*x), "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::SoftmaxRows { x, temperature } => {
                let y = &rec.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let inner = crate::tensor::dot(yr, gr);
                    for (j, o) in gx.row_slice_mut(i).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - inner) / temperature;
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &rec.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let inner = crate::tensor::dot(yr, gr);
                    for (j, o) in gx.row_slice_mut(i).iter_mut().enumerate() {
                        *o = (gr[j] - yr[j] * inner) / norms[i];
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let n = normalized.cols();
                let gv = val(*gain);
                if self.requires_grad(*gain) {
                    let mut gg = Tensor::zeros(1, n);
                    for i in 0..g.rows() {
                        for j in 0..n {
                            gg.data_mut()[j] += g.get(i, j) * normalized.get(i, j);
                        }
                    }
                    self.accumulate(grads, *gain, gg)?;
                }
                if self.requires_grad(*bias) {
                    let mut gb = Tensor::zeros(1, n);
                    for row in g.row_iter() {
                        for (s, v) in gb.data_mut().iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb)?;
                }
                if self.requires_grad(*x) {
                    let mut gx = Tensor::zeros(g.rows(), n);
                    for i in 0..g.rows() {
                        let dxhat: Vec<f64> = (0..n).map(|j| g.get(i, j) * gv.data()[j]).collect();
                        let xh = normalized.row_slice(i);
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = crate::tensor::dot(&dxhat, xh) / n as f64;
                        for (j, o) in gx.row_slice_mut(i).iter_mut().enumerate() {
                            *o = inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::CrossEntropyRows { target, pred } => {
                let (tv, pv) = (val(*target), val(*pred));
                let scale = g.item() / tv.rows().max(1) as f64;
                if self.requires_grad(*pred) {
                    let gp = tv.zip_map(pv, "cross_entropy_rows", |t, p| {
                        if p > LOG_FLOOR {
                            -scale * t / p
                        } else {
                            0.0
                        }
                    })?;
                    self.accumulate(grads, *pred, gp)?;
                }
                if self.requires_grad(*target) {
                    self.accumulate(grads, *target, pv.map(|p| -scale * p.max(LOG_FLOOR).ln()))?;
                }
            }
            Op::RowSum(x) => {
                let [r, c] = val(*x).shape();
                self.accumulate(grads, *x, Tensor::from_fn(r, c, |i, _| g.data()[i]))?;
            }
            Op::Sum(x) => {
                let [r, c] = val(*x).shape();
                self.accumulate(grads, *x, Tensor::full(r, c, g.item()))?;
            }
            Op::Mean(x) => {
                let [r, c] = val(*x).shape();
                self.accumulate(grads, *x, Tensor::full(r, c, g.item() / (r * c).max(1) as f64))?;
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose())?,
            Op::SliceRows { x, start } => {
                if self.requires_grad(*x) {
                    let [r, c] = val(*x).shape();
                    let mut gx = Tensor::zeros(r, c);
                    gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::SliceCols { x, start } => {
                if self.requires_grad(*x) {
                    let [r, c] = val(*x).shape();
                    let mut gx = Tensor::zeros(r, c);
                    for i in 0..r {
                        gx.row_slice_mut(i)[*start..start + g.cols()].copy_from_slice(g.row_slice(i));
                    }
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, g.slice_rows(offset, offset + rows)?)?;
                    }
                    offset += rows;
                }
            }
        }
        Ok(())
    }
}

/// Row-wise tempered softmax with max subtraction.
pub fn softmax_rows(x: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!("softmax temperature must be positive, got {temperature}")));
    }
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_slice_mut(i), temperature);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
