//! Dense tensors and a reverse-mode autodiff tape.
//!
//! Tensors are row-major `f64` with 1-D or 2-D shapes. A [`Tape`] records a
//! Wengert list of operations; [`Tape::backward`] walks it in exact reverse
//! insertion order, so gradients are bitwise reproducible run to run. Every
//! operation validates its output for non-finite values and fails fast with
//! [`Error::Numeric`] instead of letting NaNs propagate into training.

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::from_vec(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    /// (rows, cols) view: 1-D tensors count as a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => unreachable!("tensors are 1-D or 2-D"),
        }
    }
}

fn check_finite(data: &[f64], op: &str) -> Result<()> {
    // Fast path: a single pass sum is non-finite iff some entry is, except
    // for overflow of astronomically large finite values, which the rescan
    // below rules out.
    let total: f64 = data.iter().sum();
    if total.is_finite() {
        return Ok(());
    }
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "{op} produced non-finite value {} at index {pos}",
            data[pos]
        )));
    }
    Ok(())
}

/// Masking pattern for [`Tape::softmax`] rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// All positions attend to all positions.
    Dense,
    /// Row i attends to columns 0..=i; strictly-future weights are exactly 0.
    Causal,
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, row: NodeId },
    Scale { a: NodeId, factor: f64 },
    Mul { a: NodeId, b: NodeId },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, axis: usize, start: usize },
    Gather { table: NodeId, row: usize },
    SumAxis { a: NodeId, axis: usize },
    MeanAxis { a: NodeId, axis: usize },
    MaxAxis { a: NodeId, argmax: Vec<usize> },
    Softmax { a: NodeId, mask: MaskKind },
    LayerNorm { a: NodeId, gain: NodeId, shift: NodeId, eps: f64 },
    Relu { a: NodeId },
    Gelu { a: NodeId },
    Sigmoid { a: NodeId },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    CrossEntropy { logits: NodeId, target: usize, probs: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Recorded computation graph. Insertion order is topological order;
/// backward traverses it in exact reverse.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Insert a constant (no gradient tracking).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// Insert a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    fn push_op(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> Result<NodeId> {
        check_finite(value.data(), op_name(&op))?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(op, value, requires_grad))
    }

    // ── Forward operations ─────────────────────────────────────────────

    /// Matrix product. 1-D operands are promoted: `[k]·[k,n] -> [n]`,
    /// `[m,k]·[k] -> [m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let a_vec = ta.shape().len() == 1;
        let b_vec = tb.shape().len() == 1;
        let (m, ka) = if a_vec {
            (1, ta.shape()[0])
        } else {
            (ta.shape()[0], ta.shape()[1])
        };
        let (kb, n) = if b_vec {
            (tb.shape()[0], 1)
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(false, false, m, ka, n, ta.data(), tb.data(), &mut out, 0.0);
        let shape = match (a_vec, b_vec) {
            (true, true) | (true, false) => vec![n],
            (false, true) => vec![m],
            (false, false) => vec![m, n],
        };
        let value = Tensor::from_vec(shape, out)?;
        self.push_op(Op::MatMul { a, b }, value, &[a, b])
    }

    /// Elementwise add of same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push_op(Op::Add { a, b }, value, &[a, b])
    }

    /// `a - b`, recorded as add + scale.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Broadcast add of a row vector onto every row of a matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (rows, cols) = ta.rows_cols();
        if tr.shape() != [cols] {
            return Err(Error::Shape(format!(
                "add_row: matrix {:?} with row {:?}",
                ta.shape(),
                tr.shape()
            )));
        }
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += tr.data()[c];
            }
        }
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push_op(Op::AddRow { a, row }, value, &[a, row])
    }

    /// Multiply by a runtime scalar constant.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push_op(Op::Scale { a, factor }, value, &[a])
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push_op(Op::Mul { a, b }, value, &[a, b])
    }

    /// Concatenate along `axis`. Axis 0 stacks rows (1-D inputs join
    /// end to end); axis 1 joins matrices side by side.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(Error::Shape(format!("concat axis {axis} out of range")));
        }
        let first = self.value(inputs[0]);
        let ndim = first.shape().len();
        if axis == 0 && ndim == 1 {
            let mut data = Vec::new();
            for &id in inputs {
                let t = self.value(id);
                if t.shape().len() != 1 {
                    return Err(Error::Shape("concat axis 0 mixes 1-D and 2-D".into()));
                }
                data.extend_from_slice(t.data());
            }
            let value = Tensor::vector(data);
            return self.push_op(
                Op::Concat {
                    inputs: inputs.to_vec(),
                    axis,
                },
                value,
                inputs,
            );
        }
        if axis == 0 {
            let cols = first.shape()[1];
            let mut data = Vec::new();
            let mut rows = 0;
            for &id in inputs {
                let t = self.value(id);
                if t.shape().len() != 2 || t.shape()[1] != cols {
                    return Err(Error::Shape(format!(
                        "concat axis 0: column mismatch {:?}",
                        t.shape()
                    )));
                }
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let value = Tensor::from_vec(vec![rows, cols], data)?;
            return self.push_op(
                Op::Concat {
                    inputs: inputs.to_vec(),
                    axis,
                },
                value,
                inputs,
            );
        }
        // axis 1: same row count, widths add up
        let rows = first.rows_cols().0;
        let mut widths = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let t = self.value(id);
            if t.rows_cols().0 != rows {
                return Err(Error::Shape(format!(
                    "concat axis 1: row mismatch {:?}",
                    t.shape()
                )));
            }
            widths.push(t.rows_cols().1);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&id, &w) in inputs.iter().zip(&widths) {
            let t = self.value(id);
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let shape = if ndim == 1 {
            vec![total]
        } else {
            vec![rows, total]
        };
        let value = Tensor::from_vec(shape, data)?;
        self.push_op(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            inputs,
        )
    }

    /// Contiguous slice along `axis` (rows for axis 0, columns for axis 1).
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let ta = self.value(a);
        let ndim = ta.shape().len();
        if axis > 1 || (ndim == 1 && axis == 1) {
            return Err(Error::Shape(format!("slice axis {axis} on {:?}", ta.shape())));
        }
        let bound = if ndim == 1 { ta.shape()[0] } else { ta.shape()[axis] };
        if start + len > bound {
            return Err(Error::Shape(format!(
                "slice {start}..{} exceeds extent {bound}",
                start + len
            )));
        }
        let value = if ndim == 1 {
            Tensor::vector(ta.data()[start..start + len].to_vec())
        } else if axis == 0 {
            let cols = ta.shape()[1];
            Tensor::from_vec(
                vec![len, cols],
                ta.data()[start * cols..(start + len) * cols].to_vec(),
            )?
        } else {
            let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&ta.data()[r * cols + start..r * cols + start + len]);
            }
            Tensor::from_vec(vec![rows, len], data)?
        };
        self.push_op(Op::Slice { a, axis, start }, value, &[a])
    }

    /// Embedding gather: pick one row of a 2-D table.
    pub fn gather(&mut self, table: NodeId, row: usize) -> Result<NodeId> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!("gather from {:?}", t.shape())));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if row >= rows {
            return Err(Error::Shape(format!("gather row {row} from {rows} rows")));
        }
        let value = Tensor::vector(t.data()[row * cols..(row + 1) * cols].to_vec());
        self.push_op(Op::Gather { table, row }, value, &[table])
    }

    /// Sum over `axis`; a 1-D input reduces to a scalar.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let value = self.reduce(a, axis, false)?;
        self.push_op(Op::SumAxis { a, axis }, value, &[a])
    }

    /// Mean over `axis`; a 1-D input reduces to a scalar.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let value = self.reduce(a, axis, true)?;
        self.push_op(Op::MeanAxis { a, axis }, value, &[a])
    }

    fn reduce(&self, a: NodeId, axis: usize, mean: bool) -> Result<Tensor> {
        let ta = self.value(a);
        match ta.shape().len() {
            1 => {
                let n = ta.shape()[0] as f64;
                let s: f64 = ta.data().iter().sum();
                Ok(Tensor::scalar(if mean { s / n } else { s }))
            }
            2 => {
                let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
                if axis == 0 {
                    let mut out = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            out[c] += ta.data()[r * cols + c];
                        }
                    }
                    if mean {
                        out.iter_mut().for_each(|v| *v /= rows as f64);
                    }
                    Ok(Tensor::vector(out))
                } else if axis == 1 {
                    let mut out = vec![0.0; rows];
                    for r in 0..rows {
                        out[r] = ta.data()[r * cols..(r + 1) * cols].iter().sum();
                    }
                    if mean {
                        out.iter_mut().for_each(|v| *v /= cols as f64);
                    }
                    Ok(Tensor::vector(out))
                } else {
                    Err(Error::Shape(format!("reduce axis {axis} out of range")))
                }
            }
            _ => unreachable!(),
        }
    }

    /// Max over rows (axis 0) with recorded argmax; ties break to the lowest
    /// index. A 1-D input reduces to a scalar.
    pub fn max_axis0(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let (value, argmax) = match ta.shape().len() {
            1 => {
                let mut best = 0usize;
                for (i, v) in ta.data().iter().enumerate() {
                    if *v > ta.data()[best] {
                        best = i;
                    }
                }
                (Tensor::scalar(ta.data()[best]), vec![best])
            }
            2 => {
                let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
                let mut out = vec![f64::NEG_INFINITY; cols];
                let mut arg = vec![0usize; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let v = ta.data()[r * cols + c];
                        if v > out[c] {
                            out[c] = v;
                            arg[c] = r;
                        }
                    }
                }
                (Tensor::vector(out), arg)
            }
            _ => unreachable!(),
        };
        self.push_op(Op::MaxAxis { a, argmax }, value, &[a])
    }

    /// Row-wise softmax with optional causal masking. Masked weights are
    /// exactly zero and each row sums to one.
    pub fn softmax(&mut self, a: NodeId, mask: MaskKind) -> Result<NodeId> {
        let ta = self.value(a);
        let (rows, cols) = ta.rows_cols();
        if mask == MaskKind::Causal && rows != cols {
            return Err(Error::Shape(format!(
                "causal softmax needs a square matrix, got {:?}",
                ta.shape()
            )));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let allowed = match mask {
                MaskKind::Dense => cols,
                MaskKind::Causal => r + 1,
            };
            let row = &ta.data()[r * cols..r * cols + allowed];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                data[r * cols + c] = e;
                sum += e;
            }
            for c in 0..allowed {
                data[r * cols + c] /= sum;
            }
        }
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push_op(Op::Softmax { a, mask }, value, &[a])
    }

    /// Per-row layer normalization with affine gain/shift parameters.
    pub fn layer_norm(
        &mut self,
        a: NodeId,
        gain: NodeId,
        shift: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (rows, cols) = self.value(a).rows_cols();
        if self.value(gain).shape() != [cols] || self.value(shift).shape() != [cols] {
            return Err(Error::Shape(format!(
                "layer_norm affine params must be [{cols}]"
            )));
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.value(a).data()[r * cols..(r + 1) * cols];
            let (norm, _) = normalize_row(row, eps);
            for c in 0..cols {
                data[r * cols + c] =
                    self.value(gain).data()[c] * norm[c] + self.value(shift).data()[c];
            }
        }
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        self.push_op(Op::LayerNorm { a, gain, shift, eps }, value, &[a, gain, shift])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push_op(Op::Relu { a }, value, &[a])
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| gelu_fwd(x)).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push_op(Op::Gelu { a }, value, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| sigmoid_fwd(x)).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push_op(Op::Sigmoid { a }, value, &[a])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::Shape(format!("transpose of {:?}", ta.shape())));
        }
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = ta.data()[r * cols + c];
            }
        }
        let value = Tensor::from_vec(vec![cols, rows], data)?;
        self.push_op(Op::Transpose { a }, value, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let ta = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != ta.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?}",
                ta.shape(),
                shape
            )));
        }
        let value = Tensor::from_vec(shape, ta.data().to_vec())?;
        self.push_op(Op::Reshape { a }, value, &[a])
    }

    /// Stack 1-D `[cols]` vectors into a `[rows.len(), cols]` matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId], cols: usize) -> Result<NodeId> {
        let flat = self.concat(rows, 0)?;
        self.reshape(flat, vec![rows.len(), cols])
    }

    /// Cross-entropy of a 1-D logit vector against a class index, fused with
    /// a numerically stable softmax. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let tl = self.value(logits);
        if tl.shape().len() != 1 {
            return Err(Error::Shape(format!(
                "cross_entropy on logits {:?}",
                tl.shape()
            )));
        }
        let n = tl.shape()[0];
        if target >= n {
            return Err(Error::Shape(format!(
                "cross_entropy target {target} out of {n} classes"
            )));
        }
        let max = tl.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = tl.data().iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
        let loss = sum.ln() + max - tl.data()[target];
        let value = Tensor::scalar(loss);
        self.push_op(
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            value,
            &[logits],
        )
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Returns gradients for every
    /// node on a `requires_grad` path.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )?);
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let a_vec = ta.shape().len() == 1;
                let b_vec = tb.shape().len() == 1;
                let (m, k) = if a_vec {
                    (1, ta.shape()[0])
                } else {
                    (ta.shape()[0], ta.shape()[1])
                };
                let n = if b_vec { 1 } else { tb.shape()[1] };
                if self.wants_grad(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(false, true, m, n, k, g.data(), tb.data(), &mut da, 0.0);
                    self.accumulate(grads, *a, &da)?;
                }
                if self.wants_grad(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(true, false, k, m, n, ta.data(), g.data(), &mut db, 0.0);
                    self.accumulate(grads, *b, &db)?;
                }
            }
            Op::Add { a, b } => {
                if self.wants_grad(*a) {
                    self.accumulate(grads, *a, g.data())?;
                }
                if self.wants_grad(*b) {
                    self.accumulate(grads, *b, g.data())?;
                }
            }
            Op::AddRow { a, row } => {
                if self.wants_grad(*a) {
                    self.accumulate(grads, *a, g.data())?;
                }
                if self.wants_grad(*row) {
                    let (rows, cols) = self.value(*a).rows_cols();
                    let mut dr = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dr[c] += g.data()[r * cols + c];
                        }
                    }
                    self.accumulate(grads, *row, &dr)?;
                }
            }
            Op::Scale { a, factor } => {
                if self.wants_grad(*a) {
                    let da: Vec<f64> = g.data().iter().map(|v| v * factor).collect();
                    self.accumulate(grads, *a, &da)?;
                }
            }
            Op::Mul { a, b } => {
                if self.wants_grad(*a) {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    self.accumulate(grads, *a, &da)?;
                }
                if self.wants_grad(*b) {
                    let db: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    self.accumulate(grads, *b, &db)?;
                }
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &inp in inputs {
                        let len = self.value(inp).numel();
                        if self.wants_grad(inp) {
                            self.accumulate(grads, inp, &g.data()[offset..offset + len])?;
                        }
                        offset += len;
                    }
                } else {
                    let rows = self.value(inputs[0]).rows_cols().0;
                    let total = node.value.rows_cols().1;
                    let mut offset = 0;
                    for &inp in inputs {
                        let w = self.value(inp).rows_cols().1;
                        if self.wants_grad(inp) {
                            let mut di = vec![0.0; rows * w];
                            for r in 0..rows {
                                di[r * w..(r + 1) * w].copy_from_slice(
                                    &g.data()[r * total + offset..r * total + offset + w],
                                );
                            }
                            self.accumulate(grads, inp, &di)?;
                        }
                        offset += w;
                    }
                }
            }
            Op::Slice { a, axis, start } => {
                if self.wants_grad(*a) {
                    let ta = self.value(*a);
                    let mut da = vec![0.0; ta.numel()];
                    if ta.shape().len() == 1 || *axis == 0 {
                        let cols = if ta.shape().len() == 1 {
                            1
                        } else {
                            ta.shape()[1]
                        };
                        let begin = start * cols;
                        da[begin..begin + g.numel()].copy_from_slice(g.data());
                    } else {
                        let cols = ta.shape()[1];
                        let w = node.value.shape()[1];
                        for r in 0..node.value.shape()[0] {
                            da[r * cols + start..r * cols + start + w]
                                .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                        }
                    }
                    self.accumulate(grads, *a, &da)?;
                }
            }
            Op::Gather { table, row } => {
                if self.wants_grad(*table) {
                    let tt = self.value(*table);
                    let cols = tt.shape()[1];
                    let mut dt = vec![0.0; tt.numel()];
                    dt[row * cols..(row + 1) * cols].copy_from_slice(g.data());
                    self.accumulate(grads, *table, &dt)?;
                }
            }
            Op::SumAxis { a, axis } => {
                if self.wants_grad(*a) {
                    self.accumulate(grads, *a, &spread(self.value(*a), *axis, g, 1.0))?;
                }
            }
            Op::MeanAxis { a, axis } => {
                if self.wants_grad(*a) {
                    let ta = self.value(*a);
                    let denom = match (ta.shape().len(), axis) {
                        (1, _) => ta.shape()[0],
                        (2, 0) => ta.shape()[0],
                        (2, 1) => ta.shape()[1],
                        _ => unreachable!(),
                    } as f64;
                    self.accumulate(grads, *a, &spread(ta, *axis, g, 1.0 / denom))?;
                }
            }
            Op::MaxAxis { a, argmax } => {
                if self.wants_grad(*a) {
                    let ta = self.value(*a);
                    let mut da = vec![0.0; ta.numel()];
                    match ta.shape().len() {
                        1 => da[argmax[0]] = g.data()[0],
                        2 => {
                            let cols = ta.shape()[1];
                            for (c, &r) in argmax.iter().enumerate() {
                                da[r * cols + c] = g.data()[c];
                            }
                        }
                        _ => unreachable!(),
                    }
                    self.accumulate(grads, *a, &da)?;
                }
            }
            Op::Softmax { a, mask } => {
                if self.wants_grad(*a) {
                    let y = &node.value;
                    let (rows, cols) = y.rows_cols();
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let allowed = match mask {
                            MaskKind::Dense => cols,
                            MaskKind::Causal => r + 1,
                        };
                        let yr = &y.data()[r * cols..r * cols + allowed];
                        let gr = &g.data()[r * cols..r * cols + allowed];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for c in 0..allowed {
                            da[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    self.accumulate(grads, *a, &da)?;
                }
            }
            Op::LayerNorm { a, gain, shift, eps } => {
                let ta = self.value(*a);
                let (rows, cols) = ta.rows_cols();
                let tg = self.value(*gain);
                let mut da = vec![0.0; rows * cols];
                let mut dg = vec![0.0; cols];
                let mut ds = vec![0.0; cols];
                for r in 0..rows {
                    let row = &ta.data()[r * cols..(r + 1) * cols];
                    let (norm, inv_std) = normalize_row(row, *eps);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let mut mean_gd = 0.0;
                    let mut mean_gdn = 0.0;
                    for c in 0..cols {
                        let gd = gr[c] * tg.data()[c];
                        mean_gd += gd;
                        mean_gdn += gd * norm[c];
                    }
                    mean_gd /= cols as f64;
                    mean_gdn /= cols as f64;
                    for c in 0..cols {
                        let gd = gr[c] * tg.data()[c];
                        da[r * cols + c] = inv_std * (gd - mean_gd - norm[c] * mean_gdn);
                        dg[c] += gr[c] * norm[c];
                        ds[c] += gr[c];
                    }
                }
                if self.wants_grad(*a) {
                    self.accumulate(grads, *a, &da)?;
                }
                if self.wants_grad(*gain) {
                    self.accumulate(grads, *gain, &dg)?;
                }
                if self.wants_grad(*shift) {
                    self.accumulate(grads, *shift, &ds)?;
                }
            }
            Op::Relu { a } => {
                if self.wants_grad(*a) {
                    let da: Vec<f64> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    self.accumulate(grads, *a, &da)?;
                }
            }
            Op::Gelu { a } => {
                if self.wants_grad(*a) {
                    let da: Vec<f64> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| gelu_grad(x) * gv)
                        .collect();
                    self.accumulate(grads, *a, &da)?;
                }
            }
            Op::Sigmoid { a } => {
                if self.wants_grad(*a) {
                    let da: Vec<f64> = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &gv)| y * (1.0 - y) * gv)
                        .collect();
                    self.accumulate(grads, *a, &da)?;
                }
            }
            Op::Transpose { a } => {
                if self.wants_grad(*a) {
                    let (rows, cols) = node.value.rows_cols();
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            da[c * rows + r] = g.data()[r * cols + c];
                        }
                    }
                    self.accumulate(grads, *a, &da)?;
                }
            }
            Op::Reshape { a } => {
                if self.wants_grad(*a) {
                    self.accumulate(grads, *a, g.data())?;
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                if self.wants_grad(*logits) {
                    let gv = g.data()[0];
                    let mut dl: Vec<f64> = probs.iter().map(|&p| p * gv).collect();
                    dl[*target] -= gv;
                    self.accumulate(grads, *logits, &dl)?;
                }
            }
        }
        Ok(())
    }

    fn wants_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: &[f64]) -> Result<()> {
        match &mut grads[id.0] {
            Some(t) => {
                for (dst, src) in t.data_mut().iter_mut().zip(delta) {
                    *dst += src;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_vec(
                    self.value(id).shape().to_vec(),
                    delta.to_vec(),
                )?);
            }
        }
        Ok(())
    }
}

/// Spread a reduced gradient back over the reduction axis, scaled.
fn spread(input: &Tensor, axis: usize, g: &Tensor, scale: f64) -> Vec<f64> {
    match input.shape().len() {
        1 => vec![g.data()[0] * scale; input.numel()],
        2 => {
            let (rows, cols) = (input.shape()[0], input.shape()[1]);
            let mut out = vec![0.0; rows * cols];
            if axis == 0 {
                for r in 0..rows {
                    for c in 0..cols {
                        out[r * cols + c] = g.data()[c] * scale;
                    }
                }
            } else {
                for r in 0..rows {
                    for c in 0..cols {
                        out[r * cols + c] = g.data()[r] * scale;
                    }
                }
            }
            out
        }
        _ => unreachable!(),
    }
}

fn normalize_row(row: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean: f64 = row.iter().sum::<f64>() / n;
    let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (row.iter().map(|&v| (v - mean) * inv_std).collect(), inv_std)
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-major dgemm wrapper: `c = a·b + beta·c` with optional transposes
/// expressed through strides (no copies).
fn gemm(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::AddRow { .. } => "add_row",
        Op::Scale { .. } => "scale",
        Op::Mul { .. } => "mul",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Gather { .. } => "gather",
        Op::SumAxis { .. } => "sum_axis",
        Op::MeanAxis { .. } => "mean_axis",
        Op::MaxAxis { .. } => "max_axis",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Relu { .. } => "relu",
        Op::Gelu { .. } => "gelu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Transpose { .. } => "transpose",
        Op::Reshape { .. } => "reshape",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

// ── Gradient checking ──────────────────────────────────────────────────

/// Compare analytic gradients against central finite differences.
///
/// `f` rebuilds the same graph from the given leaves; it must be
/// deterministic (two forward passes at the same point must agree bitwise).
/// Returns the max over all leaf entries of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, leaves: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::Config(format!("grad_check h={h} outside (0, 1e-3]")));
    }
    let run = |ls: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ls.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::Contract("grad_check graph must end in a scalar".into()));
        }
        Ok((tape, ids, loss))
    };

    let (tape, ids, loss) = run(leaves)?;
    let base = tape.value(loss).item()?;
    let (tape2, _, loss2) = run(leaves)?;
    if base.to_bits() != tape2.value(loss2).item()?.to_bits() {
        return Err(Error::Contract(
            "graph builder is not deterministic: forward passes differ".into(),
        ));
    }
    let grads = tape.backward(loss)?;

    let mut max_rel = 0.0f64;
    let mut perturbed: Vec<Tensor> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(ids[li])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaf.shape().to_vec()));
        for e in 0..leaf.numel() {
            let orig = leaf.data()[e];
            perturbed[li].data_mut()[e] = orig + h;
            let (tp, _, lp) = run(&perturbed)?;
            let up = tp.value(lp).item()?;
            perturbed[li].data_mut()[e] = orig - h;
            let (tm, _, lm) = run(&perturbed)?;
            let down = tm.value(lm).item()?;
            perturbed[li].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
