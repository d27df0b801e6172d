//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built per minibatch: leaf nodes hold parameter snapshots or
//! constants, interior nodes record the producing operation and its inputs.
//! [`Graph::backward`] walks the tape in reverse creation order (which is a
//! topological order by construction) and accumulates gradients into every
//! leaf. Evaluation is single-threaded and bitwise deterministic.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::array::Array;

/// Index of a node in its graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Operations a node can record.
///
/// `MatMul` through `LogSumExp` form the core algebra; `Exp`, `Reshape` and
/// `RmsNorm` are fused extensions the model blocks and the expected-error
/// weighting need (the core set has no division or square root).
#[derive(Debug, Clone)]
pub enum Op {
    MatMul,
    Add,
    Mul,
    Concat { axis: usize },
    Slice { start: Vec<usize>, end: Vec<usize> },
    EmbeddingLookup { ids: Vec<u32> },
    Relu,
    Sigmoid,
    Tanh,
    LogSoftmax,
    ReduceSum,
    LogSumExp,
    Exp,
    Reshape { shape: Vec<usize> },
    RmsNorm { eps: f64 },
    /// All pairwise row sums: `A[m,k], B[n,k] -> out[m*n,k]` with
    /// `out[i*n+j] = A[i] + B[j]`. The batched form of a lattice grid.
    OuterRowSum,
    /// Per-row column pick: `X[m,n] -> out[m,1]` with `out[i] = X[i, cols[i]]`.
    GatherCols { cols: Vec<usize> },
    /// Fused transducer forward-backward in log space over a grid of blank
    /// log-probs `[T, U+1]` and target-label log-probs `[T, U]`, returning
    /// the negative log-likelihood. The gradient is the standard alignment
    /// occupancy; `fastemit > 0` additionally scales the label-emission term
    /// of the gradient (its occupancy weights are treated as constants).
    RnntForwardBackward { fastemit: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::EmbeddingLookup { .. } => "embedding_lookup",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::LogSoftmax => "log_softmax",
            Op::ReduceSum => "reduce_sum",
            Op::LogSumExp => "logsumexp",
            Op::Exp => "exp",
            Op::Reshape { .. } => "reshape",
            Op::RmsNorm { .. } => "rms_norm",
            Op::OuterRowSum => "outer_row_sum",
            Op::GatherCols { .. } => "gather_cols",
            Op::RnntForwardBackward { .. } => "rnnt_forward_backward",
        }
    }
}

/// The transducer grid recursions shared by the fused op's forward and
/// backward passes. `blank` is `[t_len, u_len]` row-major, `label` is
/// `[t_len, u_len - 1]`.
pub(crate) struct TransducerGrid<'a> {
    t_len: usize,
    u_len: usize,
    blank: &'a [f64],
    label: &'a [f64],
}

impl<'a> TransducerGrid<'a> {
    pub(crate) fn new(t_len: usize, u_len: usize, blank: &'a [f64], label: &'a [f64]) -> Self {
        TransducerGrid { t_len, u_len, blank, label }
    }

    fn blank_at(&self, t: usize, u: usize) -> f64 {
        self.blank[t * self.u_len + u]
    }

    fn label_at(&self, t: usize, u: usize) -> f64 {
        self.label[t * (self.u_len - 1) + u]
    }

    fn lse(a: f64, b: f64) -> f64 {
        let m = a.max(b);
        if m.is_finite() {
            m + ((a - m).exp() + (b - m).exp()).ln()
        } else {
            m
        }
    }

    pub(crate) fn alpha(&self) -> Vec<f64> {
        let (t_len, u_len) = (self.t_len, self.u_len);
        let mut a = vec![f64::NEG_INFINITY; t_len * u_len];
        a[0] = 0.0;
        for t in 0..t_len {
            for u in 0..u_len {
                if t == 0 && u == 0 {
                    continue;
                }
                let mut acc = f64::NEG_INFINITY;
                if t > 0 {
                    acc = Self::lse(acc, a[(t - 1) * u_len + u] + self.blank_at(t - 1, u));
                }
                if u > 0 {
                    acc = Self::lse(acc, a[t * u_len + u - 1] + self.label_at(t, u - 1));
                }
                a[t * u_len + u] = acc;
            }
        }
        a
    }

    pub(crate) fn beta(&self) -> Vec<f64> {
        let (t_len, u_len) = (self.t_len, self.u_len);
        let mut b = vec![f64::NEG_INFINITY; t_len * u_len];
        b[t_len * u_len - 1] = self.blank_at(t_len - 1, u_len - 1);
        for t in (0..t_len).rev() {
            for u in (0..u_len).rev() {
                if t == t_len - 1 && u == u_len - 1 {
                    continue;
                }
                let mut acc = f64::NEG_INFINITY;
                if t + 1 < t_len {
                    acc = Self::lse(acc, b[(t + 1) * u_len + u] + self.blank_at(t, u));
                }
                if u + 1 < u_len {
                    acc = Self::lse(acc, b[t * u_len + u + 1] + self.label_at(t, u));
                }
                b[t * u_len + u] = acc;
            }
        }
        b
    }

    pub(crate) fn log_likelihood(&self, alpha: &[f64]) -> f64 {
        alpha[self.t_len * self.u_len - 1] + self.blank_at(self.t_len - 1, self.u_len - 1)
    }

    /// Edge occupancies `(blank_occ, label_occ)` under the alignment
    /// posterior. The final exit blank has occupancy one.
    pub(crate) fn occupancies(&self) -> (Vec<f64>, Vec<f64>) {
        let (t_len, u_len) = (self.t_len, self.u_len);
        let alpha = self.alpha();
        let beta = self.beta();
        let logz = self.log_likelihood(&alpha);
        let mut blank_occ = vec![0.0; t_len * u_len];
        let mut label_occ = vec![0.0; t_len * (u_len - 1)];
        for t in 0..t_len {
            for u in 0..u_len {
                let a = alpha[t * u_len + u];
                if t + 1 < t_len {
                    blank_occ[t * u_len + u] =
                        (a + self.blank_at(t, u) + beta[(t + 1) * u_len + u] - logz).exp();
                }
                if u + 1 < u_len {
                    label_occ[t * (u_len - 1) + u] =
                        (a + self.label_at(t, u) + beta[t * u_len + u + 1] - logz).exp();
                }
            }
        }
        blank_occ[t_len * u_len - 1] = 1.0;
        (blank_occ, label_occ)
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: bad operand shape {shape:?}: {reason}")]
    BadShape { op: &'static str, shape: Vec<usize>, reason: String },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
    #[error("embedding id {id} out of range for table with {rows} rows")]
    EmbeddingId { id: u32, rows: usize },
    #[error("slice {start:?}..{end:?} out of bounds for shape {shape:?}")]
    SliceBounds { start: Vec<usize>, end: Vec<usize>, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

enum NodeKind {
    Param,
    Const,
    Op { op: Op, inputs: Vec<NodeId> },
}

struct Node {
    kind: NodeKind,
    value: Array,
    grad: Option<Array>,
}

impl Node {
    fn is_leaf(&self) -> bool {
        !matches!(self.kind, NodeKind::Op { .. })
    }
}

/// How a binary operand broadcasts against the other side.
enum Broadcast {
    None,
    Scalar,
    /// rhs is one row repeated down the rows of lhs.
    Row,
    /// rhs is one column `[m, 1]` repeated across the columns of lhs.
    Col,
}

fn broadcast_kind(op: &'static str, lhs: &Array, rhs: &Array) -> Result<Broadcast, GraphError> {
    if lhs.shape() == rhs.shape() {
        return Ok(Broadcast::None);
    }
    if rhs.is_scalar() {
        return Ok(Broadcast::Scalar);
    }
    if rhs.outer_len() == 1 && rhs.last_dim() == lhs.last_dim() {
        return Ok(Broadcast::Row);
    }
    if rhs.last_dim() == 1 && rhs.numel() == lhs.outer_len() {
        return Ok(Broadcast::Col);
    }
    Err(GraphError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    })
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// A define-by-run tape. One graph per logical thread; rebuilt per minibatch.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    const_cache: HashMap<u64, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Pull a named parameter into the graph as a trainable leaf. A parameter
    /// pulled twice maps to the same node, so its gradient accumulates.
    pub fn param(&mut self, name: &str, value: Array) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(NodeKind::Param, value);
        self.params.insert(name.to_string(), id);
        id
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(NodeKind::Const, value)
    }

    /// Cached scalar constant (graphs re-use values like 0 and -1 heavily).
    pub fn const_scalar(&mut self, v: f64) -> NodeId {
        let key = v.to_bits();
        if let Some(&id) = self.const_cache.get(&key) {
            return id;
        }
        let id = self.constant(Array::scalar(v));
        self.const_cache.insert(key, id);
        id
    }

    fn push(&mut self, kind: NodeKind, value: Array) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { kind, value, grad: None });
        id
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Array> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Names of the parameters pulled into this graph, in name order.
    pub fn param_names(&self) -> Vec<&str> {
        self.params.keys().map(|s| s.as_str()).collect()
    }

    /// Gradients of all named parameters in name order. Parameters that did
    /// not reach the loss carry zero gradients.
    pub fn param_grads(&self) -> Vec<(&str, &Array)> {
        self.params
            .iter()
            .filter_map(|(name, &id)| self.nodes[id.0].grad.as_ref().map(|g| (name.as_str(), g)))
            .collect()
    }

    /// Apply an operation, computing forward values and recording inputs.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        let value = self.forward(&op, inputs)?;
        Ok(self.push(
            NodeKind::Op { op, inputs: inputs.to_vec() },
            value,
        ))
    }

    fn want_arity(op: &'static str, inputs: &[NodeId], n: usize) -> Result<(), GraphError> {
        if inputs.len() != n {
            return Err(GraphError::Arity { op, expected: n, got: inputs.len() });
        }
        Ok(())
    }

    fn forward(&self, op: &Op, inputs: &[NodeId]) -> Result<Array, GraphError> {
        let name = op.name();
        let v = |id: NodeId| &self.nodes[id.0].value;
        match op {
            Op::MatMul => {
                Self::want_arity(name, inputs, 2)?;
                let (a, b) = (v(inputs[0]), v(inputs[1]));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(GraphError::ShapeMismatch {
                        op: name,
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = a.data()[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &b.data()[p * n..(p + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] += av * brow[j];
                        }
                    }
                }
                Ok(Array::new(vec![m, n], out))
            }
            Op::Add | Op::Mul => {
                Self::want_arity(name, inputs, 2)?;
                let (a, b) = (v(inputs[0]), v(inputs[1]));
                let kind = broadcast_kind(name, a, b)?;
                let mul = matches!(op, Op::Mul);
                let n = a.last_dim();
                let mut out = a.data().to_vec();
                match kind {
                    Broadcast::None => {
                        for (o, &bv) in out.iter_mut().zip(b.data()) {
                            if mul {
                                *o *= bv;
                            } else {
                                *o += bv;
                            }
                        }
                    }
                    Broadcast::Scalar => {
                        let bv = b.item();
                        for o in out.iter_mut() {
                            if mul {
                                *o *= bv;
                            } else {
                                *o += bv;
                            }
                        }
                    }
                    Broadcast::Row => {
                        for (i, o) in out.iter_mut().enumerate() {
                            let bv = b.data()[i % n];
                            if mul {
                                *o *= bv;
                            } else {
                                *o += bv;
                            }
                        }
                    }
                    Broadcast::Col => {
                        for (i, o) in out.iter_mut().enumerate() {
                            let bv = b.data()[i / n];
                            if mul {
                                *o *= bv;
                            } else {
                                *o += bv;
                            }
                        }
                    }
                }
                Ok(Array::new(a.shape().to_vec(), out))
            }
            Op::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(GraphError::Arity { op: name, expected: 1, got: 0 });
                }
                let first = v(inputs[0]);
                let rank = first.rank();
                if *axis >= rank {
                    return Err(GraphError::BadShape {
                        op: name,
                        shape: first.shape().to_vec(),
                        reason: format!("concat axis {axis} out of range"),
                    });
                }
                let mut out_shape = first.shape().to_vec();
                for &id in &inputs[1..] {
                    let s = v(id).shape();
                    if s.len() != rank
                        || s.iter().zip(first.shape()).enumerate().any(|(d, (x, y))| d != *axis && x != y)
                    {
                        return Err(GraphError::ShapeMismatch {
                            op: name,
                            lhs: first.shape().to_vec(),
                            rhs: s.to_vec(),
                        });
                    }
                    out_shape[*axis] += s[*axis];
                }
                let out_strides = strides(&out_shape);
                let mut out = vec![0.0; out_shape.iter().product()];
                let mut offset = 0usize;
                for &id in inputs {
                    let arr = v(id);
                    let in_strides = strides(arr.shape());
                    for (flat, &val) in arr.data().iter().enumerate() {
                        let mut rem = flat;
                        let mut out_flat = 0usize;
                        for d in 0..rank {
                            let mut idx = rem / in_strides[d];
                            rem %= in_strides[d];
                            if d == *axis {
                                idx += offset;
                            }
                            out_flat += idx * out_strides[d];
                        }
                        out[out_flat] = val;
                    }
                    offset += arr.shape()[*axis];
                }
                Ok(Array::new(out_shape, out))
            }
            Op::Slice { start, end } => {
                Self::want_arity(name, inputs, 1)?;
                let a = v(inputs[0]);
                let shape = a.shape();
                if start.len() != shape.len()
                    || end.len() != shape.len()
                    || start.iter().zip(end).any(|(s, e)| s >= e)
                    || end.iter().zip(shape).any(|(e, d)| e > d)
                {
                    return Err(GraphError::SliceBounds {
                        start: start.clone(),
                        end: end.clone(),
                        shape: shape.to_vec(),
                    });
                }
                let out_shape: Vec<usize> = start.iter().zip(end).map(|(s, e)| e - s).collect();
                let in_strides = strides(shape);
                let out_strides = strides(&out_shape);
                let mut out = vec![0.0; out_shape.iter().product()];
                for (out_flat, o) in out.iter_mut().enumerate() {
                    let mut rem = out_flat;
                    let mut in_flat = 0usize;
                    for d in 0..shape.len() {
                        let idx = rem / out_strides[d] + start[d];
                        rem %= out_strides[d];
                        in_flat += idx * in_strides[d];
                    }
                    *o = a.data()[in_flat];
                }
                Ok(Array::new(out_shape, out))
            }
            Op::EmbeddingLookup { ids } => {
                Self::want_arity(name, inputs, 1)?;
                let table = v(inputs[0]);
                if table.rank() != 2 {
                    return Err(GraphError::BadShape {
                        op: name,
                        shape: table.shape().to_vec(),
                        reason: "embedding table must be 2-D".into(),
                    });
                }
                let (rows, d) = (table.shape()[0], table.shape()[1]);
                let mut out = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id as usize >= rows {
                        return Err(GraphError::EmbeddingId { id, rows });
                    }
                    out.extend_from_slice(&table.data()[id as usize * d..(id as usize + 1) * d]);
                }
                Ok(Array::new(vec![ids.len(), d], out))
            }
            Op::Relu => {
                Self::want_arity(name, inputs, 1)?;
                let a = v(inputs[0]);
                let out = a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
                Ok(Array::new(a.shape().to_vec(), out))
            }
            Op::Sigmoid => {
                Self::want_arity(name, inputs, 1)?;
                let a = v(inputs[0]);
                let out = a.data().iter().map(|&x| sigmoid(x)).collect();
                Ok(Array::new(a.shape().to_vec(), out))
            }
            Op::Tanh => {
                Self::want_arity(name, inputs, 1)?;
                let a = v(inputs[0]);
                let out = a.data().iter().map(|&x| x.tanh()).collect();
                Ok(Array::new(a.shape().to_vec(), out))
            }
            Op::Exp => {
                Self::want_arity(name, inputs, 1)?;
                let a = v(inputs[0]);
                let out = a.data().iter().map(|&x| x.exp()).collect();
                Ok(Array::new(a.shape().to_vec(), out))
            }
            Op::LogSoftmax => {
                Self::want_arity(name, inputs, 1)?;
                let a = v(inputs[0]);
                let n = a.last_dim();
                if n == 0 {
                    return Err(GraphError::BadShape {
                        op: name,
                        shape: a.shape().to_vec(),
                        reason: "empty last axis".into(),
                    });
                }
                let mut out = vec![0.0; a.numel()];
                for r in 0..a.outer_len() {
                    let row = &a.data()[r * n..(r + 1) * n];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
                    for (o, &x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                        *o = x - lse;
                    }
                }
                Ok(Array::new(a.shape().to_vec(), out))
            }
            Op::ReduceSum => {
                Self::want_arity(name, inputs, 1)?;
                let a = v(inputs[0]);
                Ok(Array::scalar(a.data().iter().sum()))
            }
            Op::LogSumExp => {
                Self::want_arity(name, inputs, 1)?;
                let a = v(inputs[0]);
                let n = a.last_dim();
                if n == 0 {
                    return Err(GraphError::BadShape {
                        op: name,
                        shape: a.shape().to_vec(),
                        reason: "empty last axis".into(),
                    });
                }
                let outer = a.outer_len();
                let mut out = vec![0.0; outer];
                for (r, o) in out.iter_mut().enumerate() {
                    let row = &a.data()[r * n..(r + 1) * n];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    *o = if m.is_finite() {
                        m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
                    } else {
                        m
                    };
                }
                let mut shape = a.shape().to_vec();
                *shape.last_mut().unwrap() = 1;
                Ok(Array::new(shape, out))
            }
            Op::Reshape { shape } => {
                Self::want_arity(name, inputs, 1)?;
                let a = v(inputs[0]);
                if shape.iter().product::<usize>() != a.numel() {
                    return Err(GraphError::BadShape {
                        op: name,
                        shape: a.shape().to_vec(),
                        reason: format!("cannot reshape to {shape:?}"),
                    });
                }
                Ok(Array::new(shape.clone(), a.data().to_vec()))
            }
            Op::RmsNorm { eps } => {
                Self::want_arity(name, inputs, 1)?;
                let a = v(inputs[0]);
                let n = a.last_dim();
                if n == 0 {
                    return Err(GraphError::BadShape {
                        op: name,
                        shape: a.shape().to_vec(),
                        reason: "empty last axis".into(),
                    });
                }
                let mut out = vec![0.0; a.numel()];
                for r in 0..a.outer_len() {
                    let row = &a.data()[r * n..(r + 1) * n];
                    let ms = row.iter().map(|&x| x * x).sum::<f64>() / n as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    for (o, &x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                        *o = x * inv;
                    }
                }
                Ok(Array::new(a.shape().to_vec(), out))
            }
            Op::OuterRowSum => {
                Self::want_arity(name, inputs, 2)?;
                let (a, b) = (v(inputs[0]), v(inputs[1]));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
                    return Err(GraphError::ShapeMismatch {
                        op: name,
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                let (m, n, k) = (a.shape()[0], b.shape()[0], a.shape()[1]);
                let mut out = Vec::with_capacity(m * n * k);
                for i in 0..m {
                    let arow = &a.data()[i * k..(i + 1) * k];
                    for j in 0..n {
                        let brow = &b.data()[j * k..(j + 1) * k];
                        out.extend(arow.iter().zip(brow).map(|(&x, &y)| x + y));
                    }
                }
                Ok(Array::new(vec![m * n, k], out))
            }
            Op::GatherCols { cols } => {
                Self::want_arity(name, inputs, 1)?;
                let a = v(inputs[0]);
                if a.rank() != 2 || cols.len() != a.shape()[0] {
                    return Err(GraphError::BadShape {
                        op: name,
                        shape: a.shape().to_vec(),
                        reason: format!("needs one column index per row, got {}", cols.len()),
                    });
                }
                let n = a.shape()[1];
                let mut out = Vec::with_capacity(cols.len());
                for (i, &c) in cols.iter().enumerate() {
                    if c >= n {
                        return Err(GraphError::BadShape {
                            op: name,
                            shape: a.shape().to_vec(),
                            reason: format!("column {c} out of range in row {i}"),
                        });
                    }
                    out.push(a.data()[i * n + c]);
                }
                Ok(Array::new(vec![cols.len(), 1], out))
            }
            Op::RnntForwardBackward { fastemit } => {
                Self::want_arity(name, inputs, 2)?;
                let (blank, label) = (v(inputs[0]), v(inputs[1]));
                if blank.rank() != 2
                    || label.rank() != 2
                    || blank.shape()[0] != label.shape()[0]
                    || blank.shape()[1] != label.shape()[1] + 1
                    || blank.shape()[0] == 0
                {
                    return Err(GraphError::ShapeMismatch {
                        op: name,
                        lhs: blank.shape().to_vec(),
                        rhs: label.shape().to_vec(),
                    });
                }
                let grid = TransducerGrid::new(
                    blank.shape()[0],
                    blank.shape()[1],
                    blank.data(),
                    label.data(),
                );
                let alpha = grid.alpha();
                let mut value = -grid.log_likelihood(&alpha);
                if *fastemit > 0.0 {
                    let (_, label_occ) = grid.occupancies();
                    let emission: f64 = label_occ
                        .iter()
                        .zip(label.data())
                        .map(|(&w, &lp)| w * -lp)
                        .sum();
                    value += fastemit * emission;
                }
                Ok(Array::scalar(value))
            }
        }
    }

    /// Reverse pass from a scalar loss. Every named parameter leaf ends up
    /// with a gradient buffer (zeros when unreachable from the loss).
    pub fn backward(&mut self, loss: NodeId) -> Result<(), GraphError> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(GraphError::NonScalarLoss { shape });
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Array::full(shape, 1.0));

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || self.nodes[i].is_leaf() {
                continue;
            }
            let contributions = self.node_backward(i);
            for (id, contrib) in contributions {
                match &mut self.nodes[id.0].grad {
                    Some(g) => {
                        for (gv, cv) in g.data_mut().iter_mut().zip(contrib.data()) {
                            *gv += cv;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let param_ids: Vec<NodeId> = self.params.values().copied().collect();
        for id in param_ids {
            if self.nodes[id.0].grad.is_none() {
                let shape = self.nodes[id.0].value.shape().to_vec();
                self.nodes[id.0].grad = Some(Array::zeros(shape));
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each of its inputs.
    fn node_backward(&self, i: usize) -> Vec<(NodeId, Array)> {
        let node = &self.nodes[i];
        let g = node.grad.as_ref().expect("grad present");
        let out = &node.value;
        let (op, inputs) = match &node.kind {
            NodeKind::Op { op, inputs } => (op, inputs),
            _ => unreachable!("leaf nodes have no backward"),
        };
        let v = |id: NodeId| &self.nodes[id.0].value;
        let mut res: Vec<(NodeId, Array)> = Vec::with_capacity(inputs.len());
        match op {
            Op::MatMul => {
                let (a, b) = (v(inputs[0]), v(inputs[1]));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g.data()[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &b.data()[p * n..(p + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        da[i * k + p] = acc;
                        let av = a.data()[i * k + p];
                        if av != 0.0 {
                            let dbrow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                dbrow[j] += av * grow[j];
                            }
                        }
                    }
                }
                res.push((inputs[0], Array::new(vec![m, k], da)));
                res.push((inputs[1], Array::new(vec![k, n], db)));
            }
            Op::Add | Op::Mul => {
                let (a, b) = (v(inputs[0]), v(inputs[1]));
                let kind = broadcast_kind("", a, b).expect("checked in forward");
                let mul = matches!(op, Op::Mul);
                let n = a.last_dim();
                // lhs side
                let mut da = g.data().to_vec();
                if mul {
                    match kind {
                        Broadcast::None => {
                            for (d, &bv) in da.iter_mut().zip(b.data()) {
                                *d *= bv;
                            }
                        }
                        Broadcast::Scalar => {
                            let bv = b.item();
                            for d in da.iter_mut() {
                                *d *= bv;
                            }
                        }
                        Broadcast::Row => {
                            for (i, d) in da.iter_mut().enumerate() {
                                *d *= b.data()[i % n];
                            }
                        }
                        Broadcast::Col => {
                            for (i, d) in da.iter_mut().enumerate() {
                                *d *= b.data()[i / n];
                            }
                        }
                    }
                }
                res.push((inputs[0], Array::new(a.shape().to_vec(), da)));
                // rhs side, reducing over broadcast dims
                let mut db = Array::zeros(b.shape().to_vec());
                match kind {
                    Broadcast::None => {
                        for (i, d) in db.data_mut().iter_mut().enumerate() {
                            *d = g.data()[i] * if mul { a.data()[i] } else { 1.0 };
                        }
                    }
                    Broadcast::Scalar => {
                        let mut acc = 0.0;
                        for (i, &gv) in g.data().iter().enumerate() {
                            acc += gv * if mul { a.data()[i] } else { 1.0 };
                        }
                        db.data_mut()[0] = acc;
                    }
                    Broadcast::Row => {
                        for (i, &gv) in g.data().iter().enumerate() {
                            db.data_mut()[i % n] += gv * if mul { a.data()[i] } else { 1.0 };
                        }
                    }
                    Broadcast::Col => {
                        for (i, &gv) in g.data().iter().enumerate() {
                            db.data_mut()[i / n] += gv * if mul { a.data()[i] } else { 1.0 };
                        }
                    }
                }
                res.push((inputs[1], db));
            }
            Op::Concat { axis } => {
                let out_strides = strides(out.shape());
                let rank = out.rank();
                let mut offset = 0usize;
                for &id in inputs {
                    let arr = v(id);
                    let in_strides = strides(arr.shape());
                    let mut d = Array::zeros(arr.shape().to_vec());
                    for flat in 0..arr.numel() {
                        let mut rem = flat;
                        let mut out_flat = 0usize;
                        for dim in 0..rank {
                            let mut idx = rem / in_strides[dim];
                            rem %= in_strides[dim];
                            if dim == *axis {
                                idx += offset;
                            }
                            out_flat += idx * out_strides[dim];
                        }
                        d.data_mut()[flat] = g.data()[out_flat];
                    }
                    res.push((id, d));
                    offset += arr.shape()[*axis];
                }
            }
            Op::Slice { start, .. } => {
                let a = v(inputs[0]);
                let in_strides = strides(a.shape());
                let out_strides = strides(out.shape());
                let mut d = Array::zeros(a.shape().to_vec());
                for (out_flat, &gv) in g.data().iter().enumerate() {
                    let mut rem = out_flat;
                    let mut in_flat = 0usize;
                    for dim in 0..a.rank() {
                        let idx = rem / out_strides[dim] + start[dim];
                        rem %= out_strides[dim];
                        in_flat += idx * in_strides[dim];
                    }
                    d.data_mut()[in_flat] = gv;
                }
                res.push((inputs[0], d));
            }
            Op::EmbeddingLookup { ids } => {
                let table = v(inputs[0]);
                let d = table.shape()[1];
                let mut dt = Array::zeros(table.shape().to_vec());
                for (i, &id) in ids.iter().enumerate() {
                    let src = &g.data()[i * d..(i + 1) * d];
                    let dst = &mut dt.data_mut()[id as usize * d..(id as usize + 1) * d];
                    for (x, &y) in dst.iter_mut().zip(src) {
                        *x += y;
                    }
                }
                res.push((inputs[0], dt));
            }
            Op::Relu => {
                let a = v(inputs[0]);
                let d = a
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                res.push((inputs[0], Array::new(a.shape().to_vec(), d)));
            }
            Op::Sigmoid => {
                let d = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                res.push((inputs[0], Array::new(out.shape().to_vec(), d)));
            }
            Op::Tanh => {
                let d = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&t, &gv)| gv * (1.0 - t * t))
                    .collect();
                res.push((inputs[0], Array::new(out.shape().to_vec(), d)));
            }
            Op::Exp => {
                let d = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&e, &gv)| gv * e)
                    .collect();
                res.push((inputs[0], Array::new(out.shape().to_vec(), d)));
            }
            Op::LogSoftmax => {
                let n = out.last_dim();
                let mut d = vec![0.0; out.numel()];
                for r in 0..out.outer_len() {
                    let orow = &out.data()[r * n..(r + 1) * n];
                    let grow = &g.data()[r * n..(r + 1) * n];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..n {
                        d[r * n + j] = grow[j] - orow[j].exp() * gsum;
                    }
                }
                res.push((inputs[0], Array::new(out.shape().to_vec(), d)));
            }
            Op::ReduceSum => {
                let a = v(inputs[0]);
                res.push((inputs[0], Array::full(a.shape().to_vec(), g.item())));
            }
            Op::LogSumExp => {
                let a = v(inputs[0]);
                let n = a.last_dim();
                let mut d = vec![0.0; a.numel()];
                for r in 0..a.outer_len() {
                    let lse = out.data()[r];
                    let gv = g.data()[r];
                    for j in 0..n {
                        d[r * n + j] = gv * (a.data()[r * n + j] - lse).exp();
                    }
                }
                res.push((inputs[0], Array::new(a.shape().to_vec(), d)));
            }
            Op::Reshape { .. } => {
                let a = v(inputs[0]);
                res.push((
                    inputs[0],
                    Array::new(a.shape().to_vec(), g.data().to_vec()),
                ));
            }
            Op::RmsNorm { eps } => {
                let a = v(inputs[0]);
                let n = a.last_dim();
                let mut d = vec![0.0; a.numel()];
                for r in 0..a.outer_len() {
                    let row = &a.data()[r * n..(r + 1) * n];
                    let grow = &g.data()[r * n..(r + 1) * n];
                    let ms = row.iter().map(|&x| x * x).sum::<f64>() / n as f64;
                    let rms = (ms + eps).sqrt();
                    let dot: f64 = grow.iter().zip(row).map(|(&gv, &x)| gv * x).sum();
                    let scale = dot / (n as f64 * rms * rms * rms);
                    for j in 0..n {
                        d[r * n + j] = grow[j] / rms - row[j] * scale;
                    }
                }
                res.push((inputs[0], Array::new(a.shape().to_vec(), d)));
            }
            Op::OuterRowSum => {
                let (a, b) = (v(inputs[0]), v(inputs[1]));
                let (m, n, k) = (a.shape()[0], b.shape()[0], a.shape()[1]);
                let mut da = Array::zeros(a.shape().to_vec());
                let mut db = Array::zeros(b.shape().to_vec());
                for i in 0..m {
                    for j in 0..n {
                        let grow = &g.data()[(i * n + j) * k..(i * n + j + 1) * k];
                        for (x, &gv) in da.data_mut()[i * k..(i + 1) * k].iter_mut().zip(grow) {
                            *x += gv;
                        }
                        for (x, &gv) in db.data_mut()[j * k..(j + 1) * k].iter_mut().zip(grow) {
                            *x += gv;
                        }
                    }
                }
                res.push((inputs[0], da));
                res.push((inputs[1], db));
            }
            Op::GatherCols { cols } => {
                let a = v(inputs[0]);
                let n = a.shape()[1];
                let mut d = Array::zeros(a.shape().to_vec());
                for (i, &c) in cols.iter().enumerate() {
                    d.data_mut()[i * n + c] = g.data()[i];
                }
                res.push((inputs[0], d));
            }
            Op::RnntForwardBackward { fastemit } => {
                let (blank, label) = (v(inputs[0]), v(inputs[1]));
                let grid = TransducerGrid::new(
                    blank.shape()[0],
                    blank.shape()[1],
                    blank.data(),
                    label.data(),
                );
                let (blank_occ, label_occ) = grid.occupancies();
                let gv = g.item();
                let db = blank_occ.iter().map(|&w| -w * gv).collect();
                let dl = label_occ.iter().map(|&w| -w * (1.0 + fastemit) * gv).collect();
                res.push((inputs[0], Array::new(blank.shape().to_vec(), db)));
                res.push((inputs[1], Array::new(label.shape().to_vec(), dl)));
            }
        }
        res
    }

    // ── convenience wrappers ────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Op::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Op::Sigmoid, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Op::Relu, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Op::Exp, &[a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Op::LogSoftmax, &[a])
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Op::ReduceSum, &[a])
    }

    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Op::LogSumExp, &[a])
    }

    pub fn concat(&mut self, axis: usize, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        self.apply(Op::Concat { axis }, inputs)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, GraphError> {
        self.apply(Op::Reshape { shape }, &[a])
    }

    pub fn rms_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId, GraphError> {
        self.apply(Op::RmsNorm { eps }, &[a])
    }

    pub fn slice(
        &mut self,
        a: NodeId,
        start: Vec<usize>,
        end: Vec<usize>,
    ) -> Result<NodeId, GraphError> {
        self.apply(Op::Slice { start, end }, &[a])
    }

    pub fn outer_row_sum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Op::OuterRowSum, &[a, b])
    }

    pub fn gather_cols(&mut self, a: NodeId, cols: Vec<usize>) -> Result<NodeId, GraphError> {
        self.apply(Op::GatherCols { cols }, &[a])
    }

    pub fn rnnt_forward_backward(
        &mut self,
        blank: NodeId,
        label: NodeId,
        fastemit: f64,
    ) -> Result<NodeId, GraphError> {
        self.apply(Op::RnntForwardBackward { fastemit }, &[blank, label])
    }

    /// Rows `r0..r1` of a 2-D node.
    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> Result<NodeId, GraphError> {
        let cols = self.value(a).last_dim();
        self.slice(a, vec![r0, 0], vec![r1, cols])
    }

    /// Row `r` of a 2-D node as a `[1, n]` row vector.
    pub fn row(&mut self, a: NodeId, r: usize) -> Result<NodeId, GraphError> {
        self.slice_rows(a, r, r + 1)
    }

    pub fn embed(&mut self, table: NodeId, ids: Vec<u32>) -> Result<NodeId, GraphError> {
        self.apply(Op::EmbeddingLookup { ids }, &[table])
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let m = self.const_scalar(-1.0);
        self.mul(a, m)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, GraphError> {
        let m = self.const_scalar(c);
        self.mul(a, m)
    }

    /// `logsumexp` of two scalars.
    pub fn lse_pair(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let ra = self.reshape(a, vec![1, 1])?;
        let rb = self.reshape(b, vec![1, 1])?;
        let c = self.concat(1, &[ra, rb])?;
        self.logsumexp(c)
    }

    /// `log(sigmoid(x)) = -logsumexp([0, -x])` for a scalar node.
    pub fn log_sigmoid(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let z = self.const_scalar(0.0);
        let nx = self.neg(x)?;
        let l = self.lse_pair(z, nx)?;
        self.neg(l)
    }

    /// `log(1 - sigmoid(x)) = -logsumexp([0, x])` for a scalar node.
    pub fn log_one_minus_sigmoid(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let z = self.const_scalar(0.0);
        let l = self.lse_pair(z, x)?;
        self.neg(l)
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
