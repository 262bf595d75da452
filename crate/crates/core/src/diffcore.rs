//! A small dense-tensor differentiation engine.
//!
//! A [`Graph`] records primitives in topological order while it is built.
//! [`Graph::forward`] evaluates every node and caches the values,
//! [`Graph::backward`] pulls an output adjoint back to every input and
//! parameter (vector-Jacobian product), and [`Graph::jvp`] pushes a tangent
//! forward through the same primitives with dual-number arithmetic
//! (Jacobian-vector product).
//!
//! Shapes are checked when a node is added, so a graph that builds will
//! evaluate for any inputs of the declared shapes.
//!
//! ```
//! use sfda_core::diffcore::Graph;
//! use sfda_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.input("x", &[2]).unwrap();
//! let sq = g.square(x);
//! let y = g.sum(sq);
//! g.forward(&[("x", &Tensor::vector(vec![1.0, 2.0]))]).unwrap();
//! let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance offset used by every batch-norm primitive.
pub const BN_EPS: f64 = 1e-5;

/// Floor applied inside [`Graph::log`].
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where a batch-norm node takes its normalization statistics from.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchStats {
    /// Mean and biased variance of the first `reference_rows` rows, applied
    /// to every row. Gradients flow through the statistics.
    Batch { reference_rows: usize },
    /// Fixed statistics (running averages in eval mode).
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LeafKind {
    Input,
    Param,
    Constant,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(LeafKind),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Relu(NodeId),
    Square(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    MeanRows(NodeId),
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    TileRows {
        x: NodeId,
        times: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: BatchStats,
    },
    WeightNorm {
        v: NodeId,
        g: NodeId,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf(LeafKind::Input) => "input",
            Op::Leaf(LeafKind::Param) => "param",
            Op::Leaf(LeafKind::Constant) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Log(..) => "log",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::TileRows { .. } => "tile_rows",
            Op::BatchNorm { .. } => "batch_norm",
            Op::WeightNorm { .. } => "weight_norm",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    label: String,
    requires_grad: bool,
}

/// Per-column statistics computed by a batch-norm node during forward.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A recorded computation over dense tensors.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: Vec<Option<Tensor>>,
    values: Vec<Option<Tensor>>,
    stats: Vec<Option<ColumnStats>>,
    names: BTreeMap<String, NodeId>,
}

/// Gradients from one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Looks up a named input or parameter.
    pub fn id(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    /// Batch statistics a batch-norm node computed in the last forward pass.
    pub fn batch_stats(&self, id: NodeId) -> Option<&ColumnStats> {
        self.stats.get(id.0).and_then(Option::as_ref)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, leaf: Option<Tensor>, name: Option<&str>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let label = match name {
            Some(n) => n.to_string(),
            None => format!("{}#{}", op.kind(), id.0),
        };
        let requires_grad = match &op {
            Op::Leaf(LeafKind::Constant) => false,
            Op::Leaf(_) => true,
            _ => self.inputs_of(&op).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            label,
            requires_grad,
        });
        self.leaves.push(leaf);
        self.values.push(None);
        self.stats.push(None);
        id
    }

    fn inputs_of(&self, op: &Op) -> Vec<NodeId> {
        match *op {
            Op::Leaf(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![a, b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::Square(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::MeanRows(a)
            | Op::SliceRows { x: a, .. }
            | Op::TileRows { x: a, .. } => vec![a],
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::WeightNorm { v, g } => vec![v, g],
        }
    }

    fn register(&mut self, name: &str, id: NodeId) -> Result<()> {
        if self.names.insert(name.to_string(), id).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate graph name '{name}'")));
        }
        Ok(())
    }

    fn label(&self, id: NodeId) -> &str {
        &self.nodes[id.0].label
    }

    fn mismatch(&self, kind: &str, parts: &[NodeId]) -> Error {
        let desc: Vec<String> = parts
            .iter()
            .map(|&p| format!("{} {:?}", self.label(p), self.shape(p)))
            .collect();
        Error::shape(format!("{}#{}", kind, self.nodes.len()), desc.join(" vs "))
    }

    // ---- leaves -------------------------------------------------------

    /// Declares a named input whose value is supplied to [`Graph::forward`].
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        let id = self.push(Op::Leaf(LeafKind::Input), shape.to_vec(), None, Some(name));
        self.register(name, id)?;
        Ok(id)
    }

    /// A named trainable tensor.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        let shape = value.shape().to_vec();
        let id = self.push(Op::Leaf(LeafKind::Param), shape, Some(value), Some(name));
        self.register(name, id)?;
        Ok(id)
    }

    /// A tensor that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Leaf(LeafKind::Constant), shape, Some(value), None)
    }

    /// Replaces a parameter value; cached forward values become stale.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter '{name}'")))?;
        if !matches!(self.nodes[id.0].op, Op::Leaf(LeafKind::Param)) {
            return Err(Error::InvalidArgument(format!("'{name}' is not a parameter")));
        }
        if value.shape() != self.shape(id) {
            return Err(Error::shape(name, format!("expected {:?}, got {:?}", self.shape(id), value.shape())));
        }
        self.leaves[id.0] = Some(value);
        self.values.iter_mut().for_each(|v| *v = None);
        Ok(())
    }

    // ---- primitives ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", &[a, b]));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape, None, None))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(self.mismatch("transpose", &[a]));
        }
        let shape = vec![s[1], s[0]];
        Ok(self.push(Op::Transpose(a), shape, None, None))
    }

    fn same_shape(&mut self, kind: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(kind, &[a, b]));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape, None, None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), shape, None, None))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape, None, None))
    }

    /// Adds a length-`q` vector to every row of an `n x q` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sa.len() != 2 || sr.len() != 1 || sa[1] != sr[0] {
            return Err(self.mismatch("add_row", &[a, row]));
        }
        let shape = sa.to_vec();
        Ok(self.push(Op::AddRow(a, row), shape, None, None))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), shape, None, None)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::AddScalar(a, c), shape, None, None)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Relu(a), shape, None, None)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Square(a), shape, None, None)
    }

    /// Natural log of `max(x, LOG_FLOOR)`; zero derivative below the floor. NaN passes through.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Log(a), shape, None, None)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.is_empty() || s.len() > 2 {
            return Err(self.mismatch("softmax", &[a]));
        }
        let shape = s.to_vec();
        Ok(self.push(Op::Softmax(a), shape, None, None))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), Vec::new(), None, None)
    }

    /// Column means of an `n x q` matrix, as a length-`q` vector.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] == 0 {
            return Err(self.mismatch("mean_rows", &[a]));
        }
        let shape = vec![s[1]];
        Ok(self.push(Op::MeanRows(a), shape, None, None))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 || start + len > s[0] {
            return Err(self.mismatch("slice_rows", &[a]));
        }
        let shape = vec![len, s[1]];
        Ok(self.push(Op::SliceRows { x: a, start, len }, shape, None, None))
    }

    /// Stacks `times` copies of a matrix vertically.
    pub fn tile_rows(&mut self, a: NodeId, times: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 || times == 0 {
            return Err(self.mismatch("tile_rows", &[a]));
        }
        let shape = vec![s[0] * times, s[1]];
        Ok(self.push(Op::TileRows { x: a, times }, shape, None, None))
    }

    /// Per-column batch normalization followed by the affine `gamma * x + beta`.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, stats: BatchStats) -> Result<NodeId> {
        let sx = self.shape(x);
        let ok = sx.len() == 2
            && self.shape(gamma) == [sx[1]]
            && self.shape(beta) == [sx[1]]
            && match &stats {
                BatchStats::Batch { reference_rows } => *reference_rows >= 1 && *reference_rows <= sx[0],
                BatchStats::Fixed { mean, var } => mean.len() == sx[1] && var.len() == sx[1],
            };
        if !ok {
            return Err(self.mismatch("batch_norm", &[x, gamma, beta]));
        }
        let shape = sx.to_vec();
        Ok(self.push(Op::BatchNorm { x, gamma, beta, stats }, shape, None, None))
    }

    /// Weight normalization: row `k` of the result is `g[k] * v[k] / |v[k]|`.
    pub fn weight_norm(&mut self, v: NodeId, g: NodeId) -> Result<NodeId> {
        let (sv, sg) = (self.shape(v), self.shape(g));
        if sv.len() != 2 || sg.len() != 1 || sg[0] != sv[0] {
            return Err(self.mismatch("weight_norm", &[v, g]));
        }
        let shape = sv.to_vec();
        Ok(self.push(Op::WeightNorm { v, g }, shape, None, None))
    }

    // ---- evaluation ---------------------------------------------------

    fn bind_inputs(&self, inputs: &[(&str, &Tensor)]) -> Result<Vec<Option<Tensor>>> {
        let mut bound: Vec<Option<Tensor>> = self.leaves.clone();
        for (name, value) in inputs {
            let id = self
                .id(name)
                .ok_or_else(|| Error::InvalidArgument(format!("graph has no input '{name}'")))?;
            if !matches!(self.nodes[id.0].op, Op::Leaf(LeafKind::Input)) {
                return Err(Error::InvalidArgument(format!("'{name}' is not an input")));
            }
            if value.shape() != self.shape(id) {
                return Err(Error::shape(
                    *name,
                    format!("declared {:?}, supplied {:?}", self.shape(id), value.shape()),
                ));
            }
            bound[id.0] = Some((*value).clone());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf(_)) && bound[i].is_none() {
                return Err(Error::InvalidArgument(format!("missing value for input '{}'", node.label)));
            }
        }
        Ok(bound)
    }

    /// Evaluates every node with the given named inputs and caches the values.
    pub fn forward(&mut self, inputs: &[(&str, &Tensor)]) -> Result<()> {
        let mut values = self.bind_inputs(inputs)?;
        let mut stats = vec![None; self.nodes.len()];
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf(_)) {
                continue;
            }
            let (value, st) = eval_op(&self.nodes[i].op, &values);
            values[i] = Some(value);
            stats[i] = st;
        }
        self.values = values;
        self.stats = stats;
        Ok(())
    }

    /// Runs [`Graph::forward`] and returns a copy of `output`.
    pub fn run(&mut self, inputs: &[(&str, &Tensor)], output: NodeId) -> Result<Tensor> {
        self.forward(inputs)?;
        Ok(self.values[output.0].clone().expect("evaluated"))
    }

    /// Pulls `adjoint` back from `output`. Every input and parameter node
    /// receives a gradient of its own shape (zeros when unreachable).
    pub fn backward(&self, output: NodeId, adjoint: &Tensor) -> Result<Gradients> {
        if self.values.get(output.0).is_none_or(|v| v.is_none()) {
            return Err(Error::State("backward called before forward".into()));
        }
        if adjoint.shape() != self.shape(output) {
            return Err(Error::shape(
                self.label(output),
                format!("adjoint {:?} for output {:?}", adjoint.shape(), self.shape(output)),
            ));
        }
        let vals = &self.values;
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(adjoint.clone());
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf(_)) {
                for (target, contrib) in backward_op(&node.op, vals, &self.stats[i], vals[i].as_ref().unwrap(), &g) {
                    if self.nodes[target.0].requires_grad {
                        accumulate(&mut adj[target.0], contrib);
                    }
                }
            }
            adj[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf(LeafKind::Input | LeafKind::Param)) && adj[i].is_none() {
                adj[i] = Some(Tensor::zeros(&node.shape));
            }
        }
        Ok(Gradients { grads: adj })
    }

    /// Forward-mode derivative: evaluates `output` and its directional
    /// derivative along the given input/parameter tangents (others are held
    /// fixed). Does not touch the forward cache.
    pub fn jvp(
        &self,
        inputs: &[(&str, &Tensor)],
        tangents: &[(&str, &Tensor)],
        output: NodeId,
    ) -> Result<(Tensor, Tensor)> {
        let mut vals = self.bind_inputs(inputs)?;
        let mut tans: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (name, t) in tangents {
            let id = self
                .id(name)
                .ok_or_else(|| Error::InvalidArgument(format!("graph has no leaf '{name}'")))?;
            if t.shape() != self.shape(id) {
                return Err(Error::shape(
                    *name,
                    format!("tangent {:?} for leaf {:?}", t.shape(), self.shape(id)),
                ));
            }
            tans[id.0] = Some((*t).clone());
        }
        for i in 0..=output.0 {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf(_)) {
                if tans[i].is_none() {
                    tans[i] = Some(Tensor::zeros(&node.shape));
                }
                continue;
            }
            let (value, st) = eval_op(&node.op, &vals);
            let tangent = tangent_op(&node.op, &vals, &tans, st.as_ref(), &value);
            vals[i] = Some(value);
            tans[i] = Some(tangent);
        }
        Ok((vals[output.0].take().unwrap(), tans[output.0].take().unwrap()))
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(contrib.data()).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

fn v(vals: &[Option<Tensor>], id: NodeId) -> &Tensor {
    vals[id.0].as_ref().expect("operand evaluated before use")
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for r in row.iter_mut() {
            *r = (*r - m).exp();
            z += *r;
        }
        row.iter_mut().for_each(|r| *r /= z);
    }
    out
}

fn column_stats(x: &Tensor, rows: usize) -> ColumnStats {
    let q = x.cols();
    let mut mean = vec![0.0; q];
    for r in 0..rows {
        for (m, &xv) in mean.iter_mut().zip(x.row(r)) {
            *m += xv;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; q];
    for r in 0..rows {
        for j in 0..q {
            let d = x.row(r)[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= rows as f64);
    ColumnStats { mean, var }
}

fn bn_stats<'a>(stats: &'a BatchStats, cached: Option<&'a ColumnStats>) -> (&'a [f64], &'a [f64]) {
    match stats {
        BatchStats::Fixed { mean, var } => (mean, var),
        BatchStats::Batch { .. } => {
            let c = cached.expect("batch statistics cached by forward");
            (&c.mean, &c.var)
        }
    }
}

fn eval_op(op: &Op, vals: &[Option<Tensor>]) -> (Tensor, Option<ColumnStats>) {
    let out = match op {
        Op::Leaf(_) => unreachable!("leaves are bound, not evaluated"),
        Op::MatMul(a, b) => v(vals, *a).matmul(v(vals, *b)).expect("shape checked at build"),
        Op::Transpose(a) => v(vals, *a).transpose(),
        Op::Add(a, b) => v(vals, *a).zip_map(v(vals, *b), |x, y| x + y),
        Op::Sub(a, b) => v(vals, *a).zip_map(v(vals, *b), |x, y| x - y),
        Op::Mul(a, b) => v(vals, *a).zip_map(v(vals, *b), |x, y| x * y),
        Op::AddRow(a, r) => {
            let mut out = v(vals, *a).clone();
            let row = v(vals, *r).data();
            let c = row.len();
            for chunk in out.data_mut().chunks_mut(c) {
                chunk.iter_mut().zip(row).for_each(|(o, b)| *o += b);
            }
            out
        }
        Op::Scale(a, c) => v(vals, *a).map(|x| x * c),
        Op::AddScalar(a, c) => v(vals, *a).map(|x| x + c),
        Op::Relu(a) => v(vals, *a).map(|x| if x <= 0.0 { 0.0 } else { x }),
        Op::Square(a) => v(vals, *a).map(|x| x * x),
        Op::Log(a) => v(vals, *a).map(|x| if x <= LOG_FLOOR { LOG_FLOOR.ln() } else { x.ln() }),
        Op::Softmax(a) => softmax_rows(v(vals, *a)),
        Op::Sum(a) => Tensor::scalar(v(vals, *a).sum()),
        Op::MeanRows(a) => {
            let x = v(vals, *a);
            let mut out = vec![0.0; x.cols()];
            for row in x.iter_rows() {
                out.iter_mut().zip(row).for_each(|(o, r)| *o += r);
            }
            let n = x.rows() as f64;
            out.iter_mut().for_each(|o| *o /= n);
            Tensor::vector(out)
        }
        Op::SliceRows { x, start, len } => {
            let idx: Vec<usize> = (*start..start + len).collect();
            v(vals, *x).select_rows(&idx)
        }
        Op::TileRows { x, times } => {
            let t = v(vals, *x);
            let parts: Vec<&Tensor> = std::iter::repeat_n(t, *times).collect();
            Tensor::vstack(&parts).expect("shape checked at build")
        }
        Op::BatchNorm { x, gamma, beta, stats } => {
            let xv = v(vals, *x);
            let computed = match stats {
                BatchStats::Batch { reference_rows } => Some(column_stats(xv, *reference_rows)),
                BatchStats::Fixed { .. } => None,
            };
            let (mean, var) = bn_stats(stats, computed.as_ref());
            let (gm, bt) = (v(vals, *gamma).data(), v(vals, *beta).data());
            let mut out = xv.clone();
            let q = xv.cols();
            for row in out.data_mut().chunks_mut(q) {
                for j in 0..q {
                    let s = 1.0 / (var[j] + BN_EPS).sqrt();
                    row[j] = gm[j] * (row[j] - mean[j]) * s + bt[j];
                }
            }
            return (out, computed);
        }
        Op::WeightNorm { v: vn, g } => {
            let vt = v(vals, *vn);
            let gs = v(vals, *g).data();
            let mut out = vt.clone();
            let p = vt.cols();
            for (k, row) in out.data_mut().chunks_mut(p).enumerate() {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.iter_mut().for_each(|x| *x *= gs[k] / norm);
            }
            out
        }
    };
    (out, None)
}

/// Contributions of one node's adjoint `g` to its operands.
fn backward_op(
    op: &Op,
    vals: &[Option<Tensor>],
    cached: &Option<ColumnStats>,
    out: &Tensor,
    g: &Tensor,
) -> Vec<(NodeId, Tensor)> {
    match op {
        Op::Leaf(_) => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (v(vals, *a), v(vals, *b));
            let da = g.matmul(&bv.transpose()).expect("shape");
            let db = av.transpose().matmul(g).expect("shape");
            vec![(*a, da), (*b, db)]
        }
        Op::Transpose(a) => vec![(*a, g.transpose())],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
        Op::Mul(a, b) => {
            let (av, bv) = (v(vals, *a), v(vals, *b));
            vec![(*a, g.zip_map(bv, |x, y| x * y)), (*b, g.zip_map(av, |x, y| x * y))]
        }
        Op::AddRow(a, r) => {
            let c = g.cols();
            let mut dr = vec![0.0; c];
            for row in g.iter_rows() {
                dr.iter_mut().zip(row).for_each(|(d, x)| *d += x);
            }
            vec![(*a, g.clone()), (*r, Tensor::vector(dr))]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
        Op::AddScalar(a, _) => vec![(*a, g.clone())],
        Op::Relu(a) => vec![(*a, g.zip_map(v(vals, *a), |gx, x| if x > 0.0 { gx } else { 0.0 }))],
        Op::Square(a) => vec![(*a, g.zip_map(v(vals, *a), |gx, x| 2.0 * x * gx))],
        Op::Log(a) => vec![(
            *a,
            g.zip_map(v(vals, *a), |gx, x| if x <= LOG_FLOOR { 0.0 } else { gx / x }),
        )],
        Op::Softmax(a) => {
            let mut dx = g.clone();
            let c = out.cols();
            for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(out.iter_rows()) {
                let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                drow.iter_mut().zip(yrow).for_each(|(d, y)| *d = y * (*d - dot));
            }
            vec![(*a, dx)]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(v(vals, *a).shape(), g.item()))],
        Op::MeanRows(a) => {
            let x = v(vals, *a);
            let n = x.rows();
            let mut dx = Tensor::zeros(x.shape());
            for r in 0..n {
                dx.row_mut(r).iter_mut().zip(g.data()).for_each(|(d, gv)| *d = gv / n as f64);
            }
            vec![(*a, dx)]
        }
        Op::SliceRows { x, start, len } => {
            let xv = v(vals, *x);
            let mut dx = Tensor::zeros(xv.shape());
            for r in 0..*len {
                dx.row_mut(start + r).copy_from_slice(g.row(r));
            }
            vec![(*x, dx)]
        }
        Op::TileRows { x, times } => {
            let xv = v(vals, *x);
            let n = xv.rows();
            let mut dx = Tensor::zeros(xv.shape());
            for t in 0..*times {
                for r in 0..n {
                    let src = g.row(t * n + r);
                    dx.row_mut(r).iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            vec![(*x, dx)]
        }
        Op::BatchNorm { x, gamma, beta, stats } => {
            let xv = v(vals, *x);
            let gm = v(vals, *gamma).data();
            let (mean, var) = bn_stats(stats, cached.as_ref());
            let (n, q) = (xv.rows(), xv.cols());
            let mut dgamma = vec![0.0; q];
            let mut dbeta = vec![0.0; q];
            let mut dx = Tensor::zeros(xv.shape());
            let inv: Vec<f64> = var.iter().map(|s| 1.0 / (s + BN_EPS).sqrt()).collect();
            let mut dvar = vec![0.0; q];
            let mut dmean = vec![0.0; q];
            for r in 0..n {
                for j in 0..q {
                    let gv = g.row(r)[j];
                    let centered = xv.row(r)[j] - mean[j];
                    dgamma[j] += gv * centered * inv[j];
                    dbeta[j] += gv;
                    let gh = gv * gm[j];
                    dx.row_mut(r)[j] = gh * inv[j];
                    dvar[j] += gh * centered * -0.5 * inv[j].powi(3);
                    dmean[j] -= gh * inv[j];
                }
            }
            if let BatchStats::Batch { reference_rows } = stats {
                let m = *reference_rows as f64;
                for r in 0..*reference_rows {
                    for j in 0..q {
                        let centered = xv.row(r)[j] - mean[j];
                        dx.row_mut(r)[j] += dvar[j] * 2.0 * centered / m + dmean[j] / m;
                    }
                }
            }
            vec![(*x, dx), (*gamma, Tensor::vector(dgamma)), (*beta, Tensor::vector(dbeta))]
        }
        Op::WeightNorm { v: vn, g: gn } => {
            let vt = v(vals, *vn);
            let gs = v(vals, *gn).data();
            let p = vt.cols();
            let mut dv = Tensor::zeros(vt.shape());
            let mut dg = vec![0.0; gs.len()];
            for k in 0..vt.rows() {
                let row = vt.row(k);
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                let grow = g.row(k);
                let s: f64 = grow.iter().zip(row).map(|(a, b)| a * b).sum();
                dg[k] = s / norm;
                let scale = gs[k] / norm;
                for j in 0..p {
                    dv.row_mut(k)[j] = scale * (grow[j] - s * row[j] / (norm * norm));
                }
            }
            vec![(*vn, dv), (*gn, Tensor::vector(dg))]
        }
    }
}

/// Dual-number tangent of one node given operand values and tangents.
fn tangent_op(
    op: &Op,
    vals: &[Option<Tensor>],
    tans: &[Option<Tensor>],
    computed: Option<&ColumnStats>,
    out: &Tensor,
) -> Tensor {
    let t = |id: &NodeId| tans[id.0].as_ref().expect("tangent evaluated before use");
    match op {
        Op::Leaf(_) => unreachable!(),
        Op::MatMul(a, b) => {
            let left = t(a).matmul(v(vals, *b)).expect("shape");
            let right = v(vals, *a).matmul(t(b)).expect("shape");
            left.zip_map(&right, |x, y| x + y)
        }
        Op::Transpose(a) => t(a).transpose(),
        Op::Add(a, b) => t(a).zip_map(t(b), |x, y| x + y),
        Op::Sub(a, b) => t(a).zip_map(t(b), |x, y| x - y),
        Op::Mul(a, b) => {
            let l = t(a).zip_map(v(vals, *b), |x, y| x * y);
            let r = v(vals, *a).zip_map(t(b), |x, y| x * y);
            l.zip_map(&r, |x, y| x + y)
        }
        Op::AddRow(a, r) => {
            let mut out = t(a).clone();
            let row = t(r).data();
            for chunk in out.data_mut().chunks_mut(row.len()) {
                chunk.iter_mut().zip(row).for_each(|(o, b)| *o += b);
            }
            out
        }
        Op::Scale(a, c) => t(a).map(|x| x * c),
        Op::AddScalar(a, _) => t(a).clone(),
        Op::Relu(a) => t(a).zip_map(v(vals, *a), |dx, x| if x > 0.0 { dx } else { 0.0 }),
        Op::Square(a) => t(a).zip_map(v(vals, *a), |dx, x| 2.0 * x * dx),
        Op::Log(a) => t(a).zip_map(v(vals, *a), |dx, x| if x <= LOG_FLOOR { 0.0 } else { dx / x }),
        Op::Softmax(a) => {
            let mut dy = t(a).clone();
            let c = out.cols();
            for (drow, yrow) in dy.data_mut().chunks_mut(c).zip(out.iter_rows()) {
                let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                drow.iter_mut().zip(yrow).for_each(|(d, y)| *d = y * (*d - dot));
            }
            dy
        }
        Op::Sum(a) => Tensor::scalar(t(a).sum()),
        Op::MeanRows(a) => {
            let dx = t(a);
            let mut out = vec![0.0; dx.cols()];
            for row in dx.iter_rows() {
                out.iter_mut().zip(row).for_each(|(o, r)| *o += r);
            }
            let n = dx.rows() as f64;
            out.iter_mut().for_each(|o| *o /= n);
            Tensor::vector(out)
        }
        Op::SliceRows { x, start, len } => {
            let idx: Vec<usize> = (*start..start + len).collect();
            t(x).select_rows(&idx)
        }
        Op::TileRows { x, times } => {
            let parts: Vec<&Tensor> = std::iter::repeat_n(t(x), *times).collect();
            Tensor::vstack(&parts).expect("shape")
        }
        Op::BatchNorm { x, gamma, beta, stats } => {
            let (xv, dx) = (v(vals, *x), t(x));
            let (gm, dgm, dbt) = (v(vals, *gamma).data(), t(gamma).data(), t(beta).data());
            let (mean, var) = bn_stats(stats, computed);
            let q = xv.cols();
            let (dmean, dvar) = match stats {
                BatchStats::Fixed { .. } => (vec![0.0; q], vec![0.0; q]),
                BatchStats::Batch { reference_rows } => {
                    let m = *reference_rows as f64;
                    let mut dmean = vec![0.0; q];
                    let mut dvar = vec![0.0; q];
                    for r in 0..*reference_rows {
                        for j in 0..q {
                            dmean[j] += dx.row(r)[j] / m;
                            dvar[j] += 2.0 * (xv.row(r)[j] - mean[j]) * dx.row(r)[j] / m;
                        }
                    }
                    (dmean, dvar)
                }
            };
            let mut dy = Tensor::zeros(xv.shape());
            for r in 0..xv.rows() {
                for j in 0..q {
                    let inv = 1.0 / (var[j] + BN_EPS).sqrt();
                    let dinv = -0.5 * inv.powi(3) * dvar[j];
                    let centered = xv.row(r)[j] - mean[j];
                    let dxhat = (dx.row(r)[j] - dmean[j]) * inv + centered * dinv;
                    dy.row_mut(r)[j] = gm[j] * dxhat + dgm[j] * centered * inv + dbt[j];
                }
            }
            dy
        }
        Op::WeightNorm { v: vn, g: gn } => {
            let (vt, dv) = (v(vals, *vn), t(vn));
            let (gs, dg) = (v(vals, *gn).data(), t(gn).data());
            let mut dw = Tensor::zeros(vt.shape());
            for k in 0..vt.rows() {
                let row = vt.row(k);
                let drow = dv.row(k);
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = row.iter().zip(drow).map(|(a, b)| a * b).sum();
                for j in 0..row.len() {
                    dw.row_mut(k)[j] =
                        dg[k] * row[j] / norm + gs[k] / norm * (drow[j] - row[j] * dot / (norm * norm));
                }
            }
            dw
        }
    }
}

/// `J(x) v` for the graph output with respect to input `input_name`, by
/// dual-number propagation. Other inputs are taken from `inputs`.
pub fn directional_derivative(
    graph: &Graph,
    inputs: &[(&str, &Tensor)],
    input_name: &str,
    direction: &Tensor,
    output: NodeId,
) -> Result<Tensor> {
    graph.jvp(inputs, &[(input_name, direction)], output).map(|(_, t)| t)
}

/// Central-difference gradient of a scalar function.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Central-difference Jacobian of a vector function, shaped
/// `outputs x inputs` (both flattened).
pub fn numeric_jacobian(mut f: impl FnMut(&Tensor) -> Tensor, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut columns = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        columns.push(up.zip_map(&down, |a, b| (a - b) / (2.0 * h)).into_data());
    }
    let k = columns.first().map_or(0, Vec::len);
    let mut data = vec![0.0; k * x.len()];
    for (i, col) in columns.iter().enumerate() {
        for (r, val) in col.iter().enumerate() {
            data[r * x.len() + i] = *val;
        }
    }
    Tensor::matrix(k, x.len(), data).expect("consistent jacobian shape")
}
