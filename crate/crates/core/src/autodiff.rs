//! Define-by-run reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it is applied, evaluating the
//! forward value eagerly. Calling [`Graph::backward`] on a scalar node walks
//! the recorded nodes in reverse insertion order (a valid reverse topological
//! order, since a node can only reference nodes created before it) and
//! accumulates exact gradients into every node that depends on a parameter.
//!
//! Row-wise operations (softmax, log-softmax, row gathers, column slices)
//! treat the last axis as columns and flatten the remaining axes into rows.
//! There is no general broadcasting: the only mixed-shape arithmetic is
//! [`Graph::scale`] (tensor times a constant scalar).

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} requires {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("index {index} out of range for {op} with bound {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis (1 for a scalar).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.numel() / self.cols().max(1)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    GatherRows(NodeId, Vec<usize>),
    PickPerRow(NodeId, Vec<usize>),
    SliceCols(NodeId, usize, usize),
    Concat(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    Scale(NodeId, f64),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    RmsNorm(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    tracks_grad: bool,
}

pub(crate) const RMS_EPS: f64 = 1e-6;

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `id`; `None` when `id` does not influence
    /// the root through any parameter path.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

/// Recording of a computation; values are evaluated eagerly on insertion.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Forward value at `id` (computed when the node was recorded).
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> Option<f64> {
        self.value(id).item()
    }

    fn push(&mut self, op: Op, value: Tensor, tracks_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            tracks_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let tracks_grad = self.inputs(&op).iter().any(|i| self.nodes[i.0].tracks_grad);
        Ok(self.push(op, value, tracks_grad))
    }

    fn inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::RmsNorm(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::GatherRows(a, _)
            | Op::PickPerRow(a, _)
            | Op::SliceCols(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sigmoid(a)
            | Op::LogSigmoid(a) => vec![*a],
            Op::Concat(xs) => xs.clone(),
        }
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: NodeId, b: NodeId, op: Op, name: &'static str, f: fn(f64, f64) -> f64) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        self.record(op, value, name)
    }

    fn map(&mut self, a: NodeId, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let va = self.value(a);
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| f(x)).collect(),
        };
        self.record(op, value, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.map(a, Op::Scale(a, c), "scale", |x| c * x)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let (n, k, m) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut out = vec![0.0; n * m];
        matmul_into(&va.data, &vb.data, &mut out, n, k, m);
        let value = Tensor {
            shape: vec![n, m],
            data: out,
        };
        self.record(Op::MatMul(a, b), value, "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape.len() != 2 {
            return Err(AutodiffError::BadShape {
                op: "transpose",
                expected: "a matrix",
                shape: va.shape.clone(),
            });
        }
        let value = transpose(va);
        self.record(Op::Transpose(a), value, "transpose")
    }

    /// Rows of `table` selected by `indices` (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        let (rows, cols) = (vt.rows(), vt.cols());
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(vt.row(i));
        }
        let value = Tensor {
            shape: vec![indices.len(), cols],
            data,
        };
        self.record(Op::GatherRows(table, indices.to_vec()), value, "gather_rows")
    }

    /// Picks one column per row: `out[r] = a[r, cols[r]]`.
    pub fn pick_per_row(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        let (rows, width) = (va.rows(), va.cols());
        if cols.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "pick_per_row",
                lhs: va.shape.clone(),
                rhs: vec![cols.len()],
            });
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &c) in cols.iter().enumerate() {
            if c >= width {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "pick_per_row",
                    index: c,
                    bound: width,
                });
            }
            data.push(va.data[r * width + c]);
        }
        self.record(Op::PickPerRow(a, cols.to_vec()), Tensor::vector(data), "pick_per_row")
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        if start >= end || end > cols {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                bound: cols,
            });
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&va.row(r)[start..end]);
        }
        let value = Tensor {
            shape: vec![rows, end - start],
            data,
        };
        self.record(Op::SliceCols(a, start, end), value, "slice_cols")
    }

    /// Concatenation along the last axis; all parts must share the row count.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::BadShape {
                op: "concat",
                expected: "at least one input",
                shape: Vec::new(),
            });
        };
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(first).shape.clone(),
                    rhs: self.value(p).shape.clone(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor {
            shape: vec![rows, total],
            data,
        };
        self.record(Op::Concat(parts.to_vec()), value, "concat")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data.iter().sum();
        self.record(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.numel() == 0 {
            return Err(AutodiffError::BadShape {
                op: "mean",
                expected: "a non-empty tensor",
                shape: va.shape.clone(),
            });
        }
        let s = va.data.iter().sum::<f64>() / va.numel() as f64;
        self.record(Op::Mean(a), Tensor::scalar(s), "mean")
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let value = row_softmax(self.value(a));
        self.record(Op::Softmax(a), value, "softmax")
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let value = row_log_softmax(self.value(a));
        self.record(Op::LogSoftmax(a), value, "log_softmax")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.map(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.map(a, Op::LogSigmoid(a), "log_sigmoid", log_sigmoid)
    }

    /// Root-mean-square normalization of each row, then elementwise gain
    /// (`gain` has one entry per column).
    pub fn rms_norm(&mut self, a: NodeId, gain: NodeId) -> Result<NodeId> {
        let (va, vg) = (self.value(a), self.value(gain));
        let cols = va.cols();
        if vg.numel() != cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "rms_norm",
                lhs: va.shape.clone(),
                rhs: vg.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(va.numel());
        for r in 0..va.rows() {
            let row = va.row(r);
            let inv = inv_rms(row);
            data.extend(row.iter().zip(&vg.data).map(|(x, g)| x * inv * g));
        }
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        self.record(Op::RmsNorm(a, gain), value, "rms_norm")
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(AutodiffError::NonScalarRoot(rv.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(&rv.shape, 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracks_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| axpy(acc, 1.0, &g.data));
                self.accumulate(grads, *b, |acc| axpy(acc, 1.0, &g.data));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |acc| axpy(acc, 1.0, &g.data));
                self.accumulate(grads, *b, |acc| axpy(acc, -1.0, &g.data));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.accumulate(grads, *a, |acc| {
                    for ((o, gi), y) in acc.iter_mut().zip(&g.data).zip(&vb.data) {
                        *o += gi * y;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for ((o, gi), x) in acc.iter_mut().zip(&g.data).zip(&va.data) {
                        *o += gi * x;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (n, k, m) = (va.shape[0], va.shape[1], vb.shape[1]);
                // dA = G · Bᵀ, dB = Aᵀ · G
                self.accumulate(grads, *a, |acc| {
                    for i in 0..n {
                        let grow = &g.data[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &vb.data[p * m..(p + 1) * m];
                            acc[i * k + p] += dot(grow, brow);
                        }
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for i in 0..n {
                        let grow = &g.data[i * m..(i + 1) * m];
                        for p in 0..k {
                            let x = va.data[i * k + p];
                            if x != 0.0 {
                                axpy(&mut acc[p * m..(p + 1) * m], x, grow);
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let gt = transpose(g);
                self.accumulate(grads, *a, |acc| axpy(acc, 1.0, &gt.data));
            }
            Op::GatherRows(t, idx) => {
                let cols = val(*t).cols();
                self.accumulate(grads, *t, |acc| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut acc[i * cols..(i + 1) * cols], 1.0, &g.data[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::PickPerRow(a, cols) => {
                let width = val(*a).cols();
                self.accumulate(grads, *a, |acc| {
                    for (r, &c) in cols.iter().enumerate() {
                        acc[r * width + c] += g.data[r];
                    }
                });
            }
            Op::SliceCols(a, start, end) => {
                let cols = val(*a).cols();
                let w = end - start;
                self.accumulate(grads, *a, |acc| {
                    for r in 0..g.rows() {
                        axpy(&mut acc[r * cols + start..r * cols + end], 1.0, &g.data[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    self.accumulate(grads, p, |acc| {
                        for r in 0..g.rows() {
                            axpy(&mut acc[r * w..(r + 1) * w], 1.0, &g.data[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Sum(a) => {
                let gs = g.data[0];
                self.accumulate(grads, *a, |acc| acc.iter_mut().for_each(|o| *o += gs));
            }
            Op::Mean(a) => {
                let gs = g.data[0] / val(*a).numel() as f64;
                self.accumulate(grads, *a, |acc| acc.iter_mut().for_each(|o| *o += gs));
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |acc| axpy(acc, *c, &g.data));
            }
            Op::Softmax(a) => {
                // dx = y ⊙ (g − ⟨g, y⟩) per row
                let y = &node.value;
                let cols = y.cols();
                self.accumulate(grads, *a, |acc| {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), &g.data[r * cols..(r + 1) * cols]);
                        let inner = dot(gr, yr);
                        for c in 0..cols {
                            acc[r * cols + c] += yr[c] * (gr[c] - inner);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                // dx = g − softmax(x) · Σg per row
                let y = &node.value;
                let cols = y.cols();
                self.accumulate(grads, *a, |acc| {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), &g.data[r * cols..(r + 1) * cols]);
                        let total: f64 = gr.iter().sum();
                        for c in 0..cols {
                            acc[r * cols + c] += gr[c] - yr[c].exp() * total;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, |acc| {
                    for ((o, gi), s) in acc.iter_mut().zip(&g.data).zip(&y.data) {
                        *o += gi * s * (1.0 - s);
                    }
                });
            }
            Op::LogSigmoid(a) => {
                // d/dx log σ(x) = σ(−x)
                let x = val(*a);
                self.accumulate(grads, *a, |acc| {
                    for ((o, gi), xi) in acc.iter_mut().zip(&g.data).zip(&x.data) {
                        *o += gi * sigmoid(-xi);
                    }
                });
            }
            Op::RmsNorm(a, gain) => {
                let (x, gv) = (val(*a), val(*gain));
                let cols = x.cols();
                let n = cols as f64;
                self.accumulate(grads, *gain, |acc| {
                    for r in 0..x.rows() {
                        let row = x.row(r);
                        let inv = inv_rms(row);
                        for c in 0..cols {
                            acc[c] += g.data[r * cols + c] * row[c] * inv;
                        }
                    }
                });
                self.accumulate(grads, *a, |acc| {
                    for r in 0..x.rows() {
                        let row = x.row(r);
                        let inv = inv_rms(row);
                        let gr = &g.data[r * cols..(r + 1) * cols];
                        // u = g ⊙ gain; dx = inv·u − inv³/n · ⟨u, x⟩ · x
                        let ux: f64 = (0..cols).map(|c| gr[c] * gv.data[c] * row[c]).sum();
                        let k = inv * inv * inv * ux / n;
                        for c in 0..cols {
                            acc[r * cols + c] += inv * gr[c] * gv.data[c] - k * row[c];
                        }
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[id.0];
        if !node.tracks_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(&node.value.shape));
        f(&mut slot.data);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x) = −log(1 + e^{−x})`, stable for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Max-shifted log-sum-exp of a slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax_in_place(xs: &mut [f64]) {
    let lse = log_sum_exp(xs);
    xs.iter_mut().for_each(|x| *x -= lse);
}

fn row_softmax(t: &Tensor) -> Tensor {
    let cols = t.cols();
    let mut data = t.data.clone();
    for row in data.chunks_mut(cols.max(1)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            z += *x;
        }
        row.iter_mut().for_each(|x| *x /= z);
    }
    Tensor {
        shape: t.shape.clone(),
        data,
    }
}

fn row_log_softmax(t: &Tensor) -> Tensor {
    let cols = t.cols();
    let mut data = t.data.clone();
    for row in data.chunks_mut(cols.max(1)) {
        log_softmax_in_place(row);
    }
    Tensor {
        shape: t.shape.clone(),
        data,
    }
}

fn inv_rms(row: &[f64]) -> f64 {
    let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
    1.0 / (ms + RMS_EPS).sqrt()
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape[0], t.shape[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data[i * c + j];
        }
    }
    Tensor {
        shape: vec![c, r],
        data,
    }
}

/// `out[n×m] += a[n×k] · b[k×m]`, row-major.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a[i * k + p];
            if x != 0.0 {
                axpy(orow, x, &b[p * m..(p + 1) * m]);
            }
        }
    }
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
