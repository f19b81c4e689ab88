//! Reverse-mode autodiff over a Wengert tape.
//!
//! Forward methods compute a value, store it in the arena, and record the
//! primitive when recording is on and some input requires a gradient.
//! [`Tape::backward`] replays the records once in reverse, accumulating
//! vector-Jacobian products. Records are appended in execution order, so
//! every input of a record precedes it and the reverse sweep is a valid
//! topological order.
//!
//! Every primitive checks its output for NaN/Inf and fails instead of
//! propagating poison through a training run.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a value stored on a tape.
pub type ValueId = usize;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the
/// cross-entropy so the logs cannot overflow.
pub const BCE_EPS: f64 = 1e-7;

struct Node {
    value: Tensor,
    requires_grad: bool,
}

enum Op {
    Matmul { a: ValueId, b: ValueId, out: ValueId },
    Add { a: ValueId, b: ValueId, out: ValueId },
    Mul { a: ValueId, b: ValueId, out: ValueId },
    Scale { x: ValueId, factor: f64, out: ValueId },
    /// Row-broadcast bias: `out[i, j] = x[i, j] + bias[0, j]`.
    AddRowBias { x: ValueId, bias: ValueId, out: ValueId },
    /// Block-broadcast: x is `(k*B) x C`, tile is `B x C`,
    /// `out[t*B + b, c] = x[t*B + b, c] + tile[b, c]`.
    AddTiled { x: ValueId, tile: ValueId, out: ValueId },
    ConcatRows { parts: Vec<ValueId>, out: ValueId },
    ConcatCols { parts: Vec<ValueId>, out: ValueId },
    SliceRows { x: ValueId, start: usize, out: ValueId },
    SliceCols { x: ValueId, start: usize, out: ValueId },
    Transpose { x: ValueId, out: ValueId },
    Reshape { x: ValueId, out: ValueId },
    Tanh { x: ValueId, out: ValueId },
    Sigmoid { x: ValueId, out: ValueId },
    SoftmaxRows { x: ValueId, out: ValueId },
    MaskedSoftmaxRows { x: ValueId, out: ValueId },
    /// Inverted dropout; mask entries are 0 or 1/(1-rate).
    Dropout { x: ValueId, mask: Vec<f64>, out: ValueId },
    Sum { x: ValueId, out: ValueId },
    Mean { x: ValueId, out: ValueId },
    RowSums { x: ValueId, out: ValueId },
    Square { x: ValueId, out: ValueId },
    Dot { a: ValueId, b: ValueId, out: ValueId },
    /// Mean binary cross-entropy of a `B x 1` probability column against
    /// fixed 0/1 targets.
    Bce { yhat: ValueId, targets: Vec<f64>, out: ValueId },
    /// Row lookup: `out[i, :] = table[ids[i], :]`.
    Gather { table: ValueId, ids: Vec<usize>, out: ValueId },
    /// Attention-weighted mix over position blocks: weights `B x T`,
    /// states `(T*B) x C`, `out[b, :] = sum_t weights[b, t] * states[t*B + b, :]`.
    ContextMix { weights: ValueId, states: ValueId, out: ValueId },
}

/// Gradients produced by one backward sweep, indexed by [`ValueId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, densified to zeros when nothing reached it.
    pub fn dense(&self, id: ValueId, rows: usize, cols: usize) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape for training and gradient checks.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), recording: true }
    }

    /// A non-recording tape: values flow forward, nothing is taped.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Store a value that never needs a gradient.
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push(value, false)
    }

    /// Store a trainable value. On a non-recording tape this is a constant.
    pub fn variable(&mut self, value: Tensor) -> ValueId {
        let rg = self.recording;
        self.push(value, rg)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: ValueId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool) -> ValueId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, requires_grad });
        id
    }

    /// Store the output of `op`; records it when a gradient must flow.
    fn emit(&mut self, op_name: &'static str, value: Tensor, needs_grad: bool, op: impl FnOnce(ValueId) -> Op) -> Result<ValueId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let track = self.recording && needs_grad;
        let out = self.push(value, track);
        if track {
            let op = op(out);
            self.ops.push(op);
        }
        Ok(out)
    }

    fn any_grad(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|&id| self.nodes[id].requires_grad)
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::Shape { op, detail }
    }

    // ── primitives ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        self.emit("matmul", value, self.any_grad(&[a, b]), |out| Op::Matmul { a, b, out })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.rows(), ta.cols(), data)?;
        self.emit("add", value, self.any_grad(&[a, b]), |out| Op::Add { a, b, out })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("mul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.rows(), ta.cols(), data)?;
        self.emit("mul", value, self.any_grad(&[a, b]), |out| Op::Mul { a, b, out })
    }

    pub fn scale(&mut self, x: ValueId, factor: f64) -> Result<ValueId> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(tx.rows(), tx.cols(), data)?;
        self.emit("scale", value, self.any_grad(&[x]), |out| Op::Scale { x, factor, out })
    }

    pub fn add_row_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(Self::shape_err(
                "add_row_bias",
                format!("x {:?}, bias {:?}", tx.shape(), tb.shape()),
            ));
        }
        let cols = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % cols])
            .collect();
        let value = Tensor::new(tx.rows(), cols, data)?;
        self.emit("add_row_bias", value, self.any_grad(&[x, bias]), |out| Op::AddRowBias { x, bias, out })
    }

    pub fn add_tiled(&mut self, x: ValueId, tile: ValueId) -> Result<ValueId> {
        let (tx, tt) = (self.value(x), self.value(tile));
        if tx.cols() != tt.cols() || tt.rows() == 0 || tx.rows() % tt.rows() != 0 {
            return Err(Self::shape_err(
                "add_tiled",
                format!("x {:?}, tile {:?}", tx.shape(), tt.shape()),
            ));
        }
        let b = tt.rows();
        let cols = tx.cols();
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            let row = i / cols;
            *v += tt.data()[(row % b) * cols + i % cols];
        }
        let value = Tensor::new(tx.rows(), cols, data)?;
        self.emit("add_tiled", value, self.any_grad(&[x, tile]), |out| Op::AddTiled { x, tile, out })
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat", "no parts".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Self::shape_err("concat", format!("column mismatch {} vs {}", t.cols(), cols)));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(rows, cols, data)?;
        let parts = parts.to_vec();
        self.emit("concat", value, self.any_grad(&parts), |out| Op::ConcatRows { parts, out })
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat", "no parts".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Self::shape_err("concat", format!("row mismatch {} vs {}", t.rows(), rows)));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(rows, cols, data)?;
        let parts = parts.to_vec();
        self.emit("concat", value, self.any_grad(&parts), |out| Op::ConcatCols { parts, out })
    }

    pub fn slice_rows(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let tx = self.value(x);
        if start + len > tx.rows() {
            return Err(Self::shape_err(
                "slice",
                format!("rows {}..{} of {:?}", start, start + len, tx.shape()),
            ));
        }
        let cols = tx.cols();
        let data = tx.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(len, cols, data)?;
        self.emit("slice", value, self.any_grad(&[x]), |out| Op::SliceRows { x, start, out })
    }

    pub fn slice_cols(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let tx = self.value(x);
        if start + len > tx.cols() {
            return Err(Self::shape_err(
                "slice",
                format!("cols {}..{} of {:?}", start, start + len, tx.shape()),
            ));
        }
        let mut data = Vec::with_capacity(tx.rows() * len);
        for r in 0..tx.rows() {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let value = Tensor::new(tx.rows(), len, data)?;
        self.emit("slice", value, self.any_grad(&[x]), |out| Op::SliceCols { x, start, out })
    }

    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId> {
        let value = tensor::transpose(self.value(x));
        self.emit("transpose", value, self.any_grad(&[x]), |out| Op::Transpose { x, out })
    }

    pub fn reshape(&mut self, x: ValueId, rows: usize, cols: usize) -> Result<ValueId> {
        let tx = self.value(x);
        if rows * cols != tx.len() {
            return Err(Self::shape_err(
                "reshape",
                format!("{:?} -> {}x{}", tx.shape(), rows, cols),
            ));
        }
        let value = tx.reshaped(rows, cols)?;
        self.emit("reshape", value, self.any_grad(&[x]), |out| Op::Reshape { x, out })
    }

    pub fn tanh(&mut self, x: ValueId) -> Result<ValueId> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(tx.rows(), tx.cols(), data)?;
        self.emit("tanh", value, self.any_grad(&[x]), |out| Op::Tanh { x, out })
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| stable_sigmoid(v)).collect();
        let value = Tensor::new(tx.rows(), tx.cols(), data)?;
        self.emit("sigmoid", value, self.any_grad(&[x]), |out| Op::Sigmoid { x, out })
    }

    pub fn softmax_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let tx = self.value(x);
        if tx.rows() == 0 || tx.cols() == 0 {
            return Err(Self::shape_err("softmax_rows", format!("{:?}", tx.shape())));
        }
        let value = softmax_rows_value(tx, None);
        self.emit("softmax_rows", value, self.any_grad(&[x]), |out| Op::SoftmaxRows { x, out })
    }

    /// Row softmax with positions where `mask` is false forced to zero.
    /// A fully masked row falls back to all mass on position 0.
    pub fn masked_softmax_rows(&mut self, x: ValueId, mask: &[bool]) -> Result<ValueId> {
        let tx = self.value(x);
        if mask.len() != tx.len() {
            return Err(Self::shape_err(
                "masked_softmax_rows",
                format!("mask len {} for {:?}", mask.len(), tx.shape()),
            ));
        }
        let value = softmax_rows_value(tx, Some(mask));
        self.emit("masked_softmax_rows", value, self.any_grad(&[x]), |out| Op::MaskedSoftmaxRows { x, out })
    }

    /// Inverted dropout with a freshly sampled mask; scales kept entries by
    /// 1/(1-rate) so eval needs no rescaling.
    pub fn dropout(&mut self, x: ValueId, rate: f64, rng: &mut ChaCha8Rng) -> Result<ValueId> {
        let n = self.value(x).len();
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with a caller-provided mask; used to freeze masks for
    /// gradient checks.
    pub fn dropout_with_mask(&mut self, x: ValueId, mask: Vec<f64>) -> Result<ValueId> {
        let tx = self.value(x);
        if mask.len() != tx.len() {
            return Err(Self::shape_err(
                "dropout_mask",
                format!("mask len {} for {:?}", mask.len(), tx.shape()),
            ));
        }
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(tx.rows(), tx.cols(), data)?;
        self.emit("dropout_mask", value, self.any_grad(&[x]), |out| Op::Dropout { x, mask, out })
    }

    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.emit("sum", value, self.any_grad(&[x]), |out| Op::Sum { x, out })
    }

    pub fn mean(&mut self, x: ValueId) -> Result<ValueId> {
        let tx = self.value(x);
        if tx.is_empty() {
            return Err(Self::shape_err("mean", "empty tensor".into()));
        }
        let value = Tensor::scalar(tx.data().iter().sum::<f64>() / tx.len() as f64);
        self.emit("mean", value, self.any_grad(&[x]), |out| Op::Mean { x, out })
    }

    /// Sum along each row: `R x C -> R x 1`.
    pub fn row_sums(&mut self, x: ValueId) -> Result<ValueId> {
        let tx = self.value(x);
        let data = (0..tx.rows()).map(|r| tx.row(r).iter().sum()).collect();
        let value = Tensor::new(tx.rows(), 1, data)?;
        self.emit("row_sums", value, self.any_grad(&[x]), |out| Op::RowSums { x, out })
    }

    pub fn square(&mut self, x: ValueId) -> Result<ValueId> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * v).collect();
        let value = Tensor::new(tx.rows(), tx.cols(), data)?;
        self.emit("square", value, self.any_grad(&[x]), |out| Op::Square { x, out })
    }

    /// Flattened dot product of two same-shape tensors; scalar output.
    pub fn dot(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("dot", format!("{:?} . {:?}", ta.shape(), tb.shape())));
        }
        let value = Tensor::scalar(ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum());
        self.emit("dot", value, self.any_grad(&[a, b]), |out| Op::Dot { a, b, out })
    }

    /// Mean binary cross-entropy of probabilities `yhat` (`B x 1`) against
    /// 0/1 `targets`.
    pub fn bce(&mut self, yhat: ValueId, targets: &[f64]) -> Result<ValueId> {
        let ty = self.value(yhat);
        if ty.cols() != 1 || ty.rows() != targets.len() || targets.is_empty() {
            return Err(Self::shape_err(
                "bce",
                format!("yhat {:?}, {} targets", ty.shape(), targets.len()),
            ));
        }
        let n = targets.len() as f64;
        let mut acc = 0.0;
        for (&p, &y) in ty.data().iter().zip(targets) {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            acc += y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let value = Tensor::scalar(-acc / n);
        let targets = targets.to_vec();
        self.emit("bce", value, self.any_grad(&[yhat]), |out| Op::Bce { yhat, targets, out })
    }

    /// Row lookup into an embedding-style table.
    pub fn gather(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId> {
        let tt = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tt.rows()) {
            return Err(Self::shape_err("gather", format!("row {} out of {}", bad, tt.rows())));
        }
        let cols = tt.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(tt.row(i));
        }
        let value = Tensor::new(ids.len(), cols, data)?;
        let ids = ids.to_vec();
        self.emit("gather", value, self.any_grad(&[table]), |out| Op::Gather { table, ids, out })
    }

    /// Attention-weighted sum of per-position state blocks.
    pub fn context_mix(&mut self, weights: ValueId, states: ValueId) -> Result<ValueId> {
        let (tw, ts) = (self.value(weights), self.value(states));
        let b = tw.rows();
        let t = tw.cols();
        if b == 0 || ts.rows() != t * b {
            return Err(Self::shape_err(
                "context_mix",
                format!("weights {:?}, states {:?}", tw.shape(), ts.shape()),
            ));
        }
        let c = ts.cols();
        let mut data = vec![0.0; b * c];
        for (bi, out_row) in data.chunks_mut(c).enumerate() {
            for ti in 0..t {
                let w = tw.get(bi, ti);
                let srow = ts.row(ti * b + bi);
                for (o, &s) in out_row.iter_mut().zip(srow) {
                    *o += w * s;
                }
            }
        }
        let value = Tensor::new(b, c, data)?;
        self.emit("context_mix", value, self.any_grad(&[weights, states]), |out| Op::ContextMix { weights, states, out })
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Values unreachable from the root
    /// keep a `None` gradient; [`Gradients::dense`] densifies to zeros.
    pub fn backward(&self, root: ValueId) -> Result<Gradients> {
        let rt = self.value(root);
        if rt.len() != 1 {
            return Err(Error::NonScalarRoot { rows: rt.rows(), cols: rt.cols() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(1.0));
        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: ValueId, delta: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += dv;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_op(&self, op: &Op, grads: &mut [Option<Tensor>]) {
        macro_rules! out_grad {
            ($out:expr) => {
                match &grads[*$out] {
                    Some(g) => g.clone(),
                    None => return,
                }
            };
        }
        match op {
            Op::Matmul { a, b, out } => {
                let d = out_grad!(out);
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = tensor::matmul(&d, &tensor::transpose(tb)).expect("taped shapes");
                let db = tensor::matmul(&tensor::transpose(ta), &d).expect("taped shapes");
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::Add { a, b, out } => {
                let d = out_grad!(out);
                self.accum(grads, *a, d.clone());
                self.accum(grads, *b, d);
            }
            Op::Mul { a, b, out } => {
                let d = out_grad!(out);
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = elementwise(&d, tb, |g, v| g * v);
                let db = elementwise(&d, ta, |g, v| g * v);
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::Scale { x, factor, out } => {
                let d = out_grad!(out);
                let dx = map(&d, |g| g * factor);
                self.accum(grads, *x, dx);
            }
            Op::AddRowBias { x, bias, out } => {
                let d = out_grad!(out);
                let cols = d.cols();
                let mut db = vec![0.0; cols];
                for (i, g) in d.data().iter().enumerate() {
                    db[i % cols] += g;
                }
                self.accum(grads, *x, d.clone());
                self.accum(grads, *bias, Tensor::new(1, cols, db).expect("taped shapes"));
            }
            Op::AddTiled { x, tile, out } => {
                let d = out_grad!(out);
                let b = self.value(*tile).rows();
                let cols = d.cols();
                let mut dt = vec![0.0; b * cols];
                for (i, g) in d.data().iter().enumerate() {
                    let row = i / cols;
                    dt[(row % b) * cols + i % cols] += g;
                }
                self.accum(grads, *x, d.clone());
                self.accum(grads, *tile, Tensor::new(b, cols, dt).expect("taped shapes"));
            }
            Op::ConcatRows { parts, out } => {
                let d = out_grad!(out);
                let cols = d.cols();
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let slice = d.data()[start * cols..(start + rows) * cols].to_vec();
                    self.accum(grads, p, Tensor::new(rows, cols, slice).expect("taped shapes"));
                    start += rows;
                }
            }
            Op::ConcatCols { parts, out } => {
                let d = out_grad!(out);
                let rows = d.rows();
                let mut start = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let mut dp = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        dp.extend_from_slice(&d.row(r)[start..start + pc]);
                    }
                    self.accum(grads, p, Tensor::new(rows, pc, dp).expect("taped shapes"));
                    start += pc;
                }
            }
            Op::SliceRows { x, start, out } => {
                let d = out_grad!(out);
                let tx = self.value(*x);
                let cols = tx.cols();
                let mut dx = Tensor::zeros(tx.rows(), cols);
                dx.data_mut()[start * cols..(start + d.rows()) * cols].copy_from_slice(d.data());
                self.accum(grads, *x, dx);
            }
            Op::SliceCols { x, start, out } => {
                let d = out_grad!(out);
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                let (w, cols) = (d.cols(), tx.cols());
                for r in 0..tx.rows() {
                    let dst = &mut dx.data_mut()[r * cols + start..r * cols + start + w];
                    dst.copy_from_slice(d.row(r));
                }
                self.accum(grads, *x, dx);
            }
            Op::Transpose { x, out } => {
                let d = out_grad!(out);
                self.accum(grads, *x, tensor::transpose(&d));
            }
            Op::Reshape { x, out } => {
                let d = out_grad!(out);
                let (r, c) = self.value(*x).shape();
                self.accum(grads, *x, d.reshaped(r, c).expect("taped shapes"));
            }
            Op::Tanh { x, out } => {
                let d = out_grad!(out);
                let y = self.value(*out);
                let dx = elementwise(&d, y, |g, y| g * (1.0 - y * y));
                self.accum(grads, *x, dx);
            }
            Op::Sigmoid { x, out } => {
                let d = out_grad!(out);
                let y = self.value(*out);
                let dx = elementwise(&d, y, |g, y| g * y * (1.0 - y));
                self.accum(grads, *x, dx);
            }
            Op::SoftmaxRows { x, out } | Op::MaskedSoftmaxRows { x, out } => {
                // dx_j = y_j * (g_j - sum_k g_k y_k); masked entries have
                // y_j = 0 and the fallback one-hot row yields exactly zero.
                let d = out_grad!(out);
                let y = self.value(*out);
                let (rows, cols) = y.shape();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let (gr, yr) = (d.row(r), y.row(r));
                    let s: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accum(grads, *x, Tensor::new(rows, cols, dx).expect("taped shapes"));
            }
            Op::Dropout { x, mask, out } => {
                let d = out_grad!(out);
                let data = d.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                let dx = Tensor::new(d.rows(), d.cols(), data).expect("taped shapes");
                self.accum(grads, *x, dx);
            }
            Op::Sum { x, out } => {
                let d = out_grad!(out).item();
                let tx = self.value(*x);
                self.accum(grads, *x, Tensor::full(tx.rows(), tx.cols(), d));
            }
            Op::Mean { x, out } => {
                let d = out_grad!(out).item();
                let tx = self.value(*x);
                self.accum(grads, *x, Tensor::full(tx.rows(), tx.cols(), d / tx.len() as f64));
            }
            Op::RowSums { x, out } => {
                let d = out_grad!(out);
                let tx = self.value(*x);
                let (rows, cols) = tx.shape();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let g = d.get(r, 0);
                    dx[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v = g);
                }
                self.accum(grads, *x, Tensor::new(rows, cols, dx).expect("taped shapes"));
            }
            Op::Square { x, out } => {
                let d = out_grad!(out);
                let tx = self.value(*x);
                let dx = elementwise(&d, tx, |g, v| g * 2.0 * v);
                self.accum(grads, *x, dx);
            }
            Op::Dot { a, b, out } => {
                let d = out_grad!(out).item();
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, map(tb, |v| d * v));
                self.accum(grads, *b, map(ta, |v| d * v));
            }
            Op::Bce { yhat, targets, out } => {
                let d = out_grad!(out).item();
                let ty = self.value(*yhat);
                let n = targets.len() as f64;
                let data = ty
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| {
                        // Clamped coordinates sit on a flat region.
                        if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                            0.0
                        } else {
                            d * (p - y) / (p * (1.0 - p)) / n
                        }
                    })
                    .collect();
                self.accum(grads, *yhat, Tensor::new(ty.rows(), 1, data).expect("taped shapes"));
            }
            Op::Gather { table, ids, out } => {
                let d = out_grad!(out);
                let tt = self.value(*table);
                let cols = tt.cols();
                let mut dt = Tensor::zeros(tt.rows(), cols);
                for (i, &row) in ids.iter().enumerate() {
                    let src = d.row(i);
                    let dst = &mut dt.data_mut()[row * cols..(row + 1) * cols];
                    for (o, g) in dst.iter_mut().zip(src) {
                        *o += g;
                    }
                }
                self.accum(grads, *table, dt);
            }
            Op::ContextMix { weights, states, out } => {
                let d = out_grad!(out);
                let tw = self.value(*weights);
                let ts = self.value(*states);
                let (b, t) = tw.shape();
                let c = ts.cols();
                let mut dw = vec![0.0; b * t];
                let mut dstates = Tensor::zeros(ts.rows(), c);
                for bi in 0..b {
                    let gout = d.row(bi);
                    for ti in 0..t {
                        let srow = ts.row(ti * b + bi);
                        dw[bi * t + ti] = gout.iter().zip(srow).map(|(g, s)| g * s).sum();
                        let w = tw.get(bi, ti);
                        let dst = &mut dstates.data_mut()[(ti * b + bi) * c..(ti * b + bi + 1) * c];
                        for (o, g) in dst.iter_mut().zip(gout) {
                            *o += w * g;
                        }
                    }
                }
                self.accum(grads, *weights, Tensor::new(b, t, dw).expect("taped shapes"));
                self.accum(grads, *states, dstates);
            }
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.rows(), t.cols(), data).expect("same shape")
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row softmax with max subtraction; optionally masked. A fully masked row
/// becomes one-hot on position 0 so downstream context math stays defined.
fn softmax_rows_value(x: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let (rows, cols) = x.shape();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = x.row(r);
        let live = |j: usize| mask.map_or(true, |m| m[r * cols + j]);
        let mut max = f64::NEG_INFINITY;
        for j in 0..cols {
            if live(j) && xr[j] > max {
                max = xr[j];
            }
        }
        let orow = &mut out[r * cols..(r + 1) * cols];
        if max == f64::NEG_INFINITY {
            orow[0] = 1.0;
            continue;
        }
        let mut z = 0.0;
        for j in 0..cols {
            if live(j) {
                let e = (xr[j] - max).exp();
                orow[j] = e;
                z += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(rows, cols, out).expect("same shape")
}
