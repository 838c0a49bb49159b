//! Differentiable computation graph over dense `f64` arrays.
//!
//! Every gradient produced by [`Tape::grad`] is itself a node on the same
//! tape, so gradients can be composed into further expressions and
//! differentiated again. This is what lets an outer loss be differentiated
//! through an unrolled sequence of inner gradient steps.
//!
//! Node shapes are inferred when a node is created; values are computed
//! lazily by [`Tape::evaluate`] and memoized on the node.

use std::collections::HashMap;
use std::fmt;

use ndarray::{concatenate, Array2, ArrayD, Axis, Ix2, IxDyn};
use thiserror::Error;

/// Dense real array used for every node value.
pub type Array = ArrayD<f64>;

/// Index of a node on a [`Tape`]. Ids are assigned in creation order, which
/// is also a valid topological order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Arithmetic precision of evaluated values.
///
/// `F32` keeps the same code path but rounds every computed node value to
/// the nearest `f32`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    #[inline]
    fn round(self, a: &mut Array) {
        if self == Precision::F32 {
            a.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{op}: node {lhs} has shape {lhs_shape:?} but node {rhs} has shape {rhs_shape:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: NodeId,
        lhs_shape: Vec<usize>,
        rhs: NodeId,
        rhs_shape: Vec<usize>,
    },
    #[error("{op}: node {node} has shape {shape:?}, expected {expected}")]
    BadShape {
        op: &'static str,
        node: NodeId,
        shape: Vec<usize>,
        expected: &'static str,
    },
    #[error("gradient requested of node {node} with non-scalar shape {shape:?}")]
    NotScalar { node: NodeId, shape: Vec<usize> },
    #[error("node {0} does not exist on this tape")]
    UnknownNode(NodeId),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Operation recorded by a node.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Constant,
    Parameter,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product of equally shaped nodes.
    Mul(NodeId, NodeId),
    /// Array times a single-element node.
    MulScalar(NodeId, NodeId),
    /// Array divided by a single-element node; yields zero where the divisor is zero.
    DivScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Sine(NodeId),
    Cosine(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    /// Heaviside mask `x > 0`; treated as locally constant.
    Step(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// `[m, n] -> [n]`.
    SumRows(NodeId),
    /// `[n] -> [m, n]`.
    Broadcast(NodeId, usize),
    /// Single-element node expanded to a full shape.
    Fill(NodeId),
    Reshape(NodeId),
    /// Column-wise concatenation of 2-d nodes.
    Concat(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    /// Zero padding placing the input at column `start` of a `total`-wide result.
    PadCols(NodeId, usize, usize),
    /// Euclidean norm over all elements.
    Norm2(NodeId),
    StopGradient(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Parameter => "parameter",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulScalar(..) => "mul_scalar",
            Op::DivScalar(..) => "div_scalar",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Sine(..) => "sine",
            Op::Cosine(..) => "cosine",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Step(..) => "step",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::Broadcast(..) => "broadcast",
            Op::Fill(..) => "fill",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::SliceCols(..) => "slice_cols",
            Op::PadCols(..) => "pad_cols",
            Op::Norm2(..) => "norm2",
            Op::StopGradient(..) => "stop_gradient",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Parameter => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::DivScalar(a, b)
            | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Shift(a, _)
            | Op::Transpose(a)
            | Op::Sine(a)
            | Op::Cosine(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Step(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::Broadcast(a, _)
            | Op::Fill(a)
            | Op::Reshape(a)
            | Op::SliceCols(a, ..)
            | Op::PadCols(a, ..)
            | Op::Norm2(a)
            | Op::StopGradient(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphNode {
    pub id: NodeId,
    pub op: Op,
    pub shape: Vec<usize>,
    value: Option<Array>,
}

impl GraphNode {
    pub fn value(&self) -> Option<&Array> {
        self.value.as_ref()
    }
}

/// Append-only node store. A tape has a single writer; independent tapes
/// can be built and evaluated concurrently.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<GraphNode>,
    roots: Vec<NodeId>,
    precision: Precision,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Total number of array elements across all nodes, an activation-memory proxy.
    pub fn element_count(&self) -> usize {
        self.nodes.iter().map(|n| numel(&n.shape)).sum()
    }

    /// Parameter leaves in creation order.
    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    pub fn node(&self, id: NodeId) -> Result<&GraphNode> {
        self.nodes.get(id.0).ok_or(GraphError::UnknownNode(id))
    }

    pub fn shape(&self, id: NodeId) -> Result<&[usize]> {
        Ok(&self.node(id)?.shape)
    }

    fn leaf(&mut self, op: Op, mut value: Array) -> NodeId {
        self.precision.round(&mut value);
        let id = NodeId(self.nodes.len());
        self.nodes.push(GraphNode {
            id,
            op,
            shape: value.shape().to_vec(),
            value: Some(value),
        });
        id
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.leaf(Op::Constant, value)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Trainable leaf; recorded in [`Tape::roots`].
    pub fn parameter(&mut self, value: Array) -> NodeId {
        let id = self.leaf(Op::Parameter, value);
        self.roots.push(id);
        id
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(GraphNode {
            id,
            op,
            shape,
            value: None,
        });
        id
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let sa = self.shape(a)?;
        let sb = self.shape(b)?;
        if sa != sb {
            return Err(GraphError::ShapeMismatch {
                op,
                lhs: a,
                lhs_shape: sa.to_vec(),
                rhs: b,
                rhs_shape: sb.to_vec(),
            });
        }
        Ok(sa.to_vec())
    }

    fn expect(&self, op: &'static str, node: NodeId, ok: bool, expected: &'static str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(GraphError::BadShape {
                op,
                node,
                shape: self.shape(node)?.to_vec(),
                expected,
            })
        }
    }

    fn unary(&mut self, op: Op, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a)?.to_vec();
        Ok(self.push(op, shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let ok = numel(self.shape(s)?) == 1;
        self.expect("mul_scalar", s, ok, "a single element")?;
        self.unary(Op::MulScalar(a, s), a)
    }

    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let ok = numel(self.shape(s)?) == 1;
        self.expect("div_scalar", s, ok, "a single element")?;
        self.unary(Op::DivScalar(a, s), a)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Op::Scale(a, c), a)
    }

    pub fn shift(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Op::Shift(a, c), a)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a)?.to_vec();
        let sb = self.shape(b)?.to_vec();
        self.expect("matmul", a, sa.len() == 2, "a matrix")?;
        self.expect("matmul", b, sb.len() == 2, "a matrix")?;
        if sa[1] != sb[0] {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                lhs: a,
                lhs_shape: sa,
                rhs: b,
                rhs_shape: sb,
            });
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a)?.to_vec();
        self.expect("transpose", a, s.len() == 2, "a matrix")?;
        Ok(self.push(Op::Transpose(a), vec![s[1], s[0]]))
    }

    pub fn sine(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sine(a), a)
    }

    pub fn cosine(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Cosine(a), a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid(a), a)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu(a), a)
    }

    pub fn step(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Step(a), a)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Square(a), a)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.node(a)?;
        Ok(self.push(Op::Sum(a), vec![]))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let ok = numel(self.shape(a)?) > 0;
        self.expect("mean", a, ok, "a non-empty array")?;
        Ok(self.push(Op::Mean(a), vec![]))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a)?.to_vec();
        self.expect("sum_rows", a, s.len() == 2, "a matrix")?;
        Ok(self.push(Op::SumRows(a), vec![s[1]]))
    }

    pub fn broadcast(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let s = self.shape(a)?.to_vec();
        self.expect("broadcast", a, s.len() == 1, "a vector")?;
        Ok(self.push(Op::Broadcast(a, rows), vec![rows, s[0]]))
    }

    /// Expands a single-element node to `shape`.
    pub fn fill(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let ok = numel(self.shape(a)?) == 1;
        self.expect("fill", a, ok, "a single element")?;
        Ok(self.push(Op::Fill(a), shape.to_vec()))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let ok = numel(self.shape(a)?) == numel(shape);
        self.expect("reshape", a, ok, "the same element count as the target shape")?;
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(GraphError::UnknownNode(NodeId(usize::MAX)))?;
        let s0 = self.shape(first)?.to_vec();
        self.expect("concat", first, s0.len() == 2, "a matrix")?;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p)?.to_vec();
            if s.len() != 2 || s[0] != s0[0] {
                return Err(GraphError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    lhs_shape: s0,
                    rhs: p,
                    rhs_shape: s,
                });
            }
            cols += s[1];
        }
        Ok(self.push(Op::Concat(parts.to_vec()), vec![s0[0], cols]))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(a)?.to_vec();
        let ok = s.len() == 2 && start <= end && end <= s[1];
        self.expect("slice_cols", a, ok, "a matrix wide enough for the column range")?;
        Ok(self.push(Op::SliceCols(a, start, end), vec![s[0], end - start]))
    }

    pub fn pad_cols(&mut self, a: NodeId, start: usize, total: usize) -> Result<NodeId> {
        let s = self.shape(a)?.to_vec();
        let ok = s.len() == 2 && start + s[1] <= total;
        self.expect("pad_cols", a, ok, "a matrix fitting inside the padded width")?;
        Ok(self.push(Op::PadCols(a, start, total), vec![s[0], total]))
    }

    pub fn norm2(&mut self, a: NodeId) -> Result<NodeId> {
        self.node(a)?;
        Ok(self.push(Op::Norm2(a), vec![]))
    }

    /// Identity in the forward direction; blocks every gradient path.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::StopGradient(a), a)
    }

    /// Value of a node if it has already been computed.
    pub fn value(&self, id: NodeId) -> Option<&Array> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    /// Computes (and memoizes) the value of `id` and everything it depends on.
    pub fn evaluate(&mut self, id: NodeId) -> Result<&Array> {
        self.node(id)?;
        if self.nodes[id.0].value.is_none() {
            let mut pending = Vec::new();
            let mut stack = vec![id];
            let mut seen = vec![false; id.0 + 1];
            while let Some(n) = stack.pop() {
                if seen[n.0] || self.nodes[n.0].value.is_some() {
                    continue;
                }
                seen[n.0] = true;
                pending.push(n);
                stack.extend(self.nodes[n.0].op.inputs());
            }
            pending.sort_unstable();
            for n in pending {
                let mut v = self.compute(n);
                self.precision.round(&mut v);
                self.nodes[n.0].value = Some(v);
            }
        }
        Ok(self.nodes[id.0].value.as_ref().expect("evaluated"))
    }

    /// Evaluates a single-element node and returns it as a scalar.
    pub fn evaluate_scalar(&mut self, id: NodeId) -> Result<f64> {
        let v = self.evaluate(id)?;
        match v.iter().next() {
            Some(&x) if v.len() == 1 => Ok(x),
            _ => Err(GraphError::NotScalar {
                node: id,
                shape: v.shape().to_vec(),
            }),
        }
    }

    fn val(&self, id: NodeId) -> &Array {
        self.nodes[id.0].value.as_ref().expect("inputs evaluated first")
    }

    fn first(&self, id: NodeId) -> f64 {
        *self.val(id).iter().next().expect("single element")
    }

    fn mat(&self, id: NodeId) -> ndarray::ArrayView2<'_, f64> {
        self.val(id).view().into_dimensionality::<Ix2>().expect("matrix shape checked")
    }

    fn compute(&self, id: NodeId) -> Array {
        let node = &self.nodes[id.0];
        let shape = node.shape.clone();
        match &node.op {
            Op::Constant | Op::Parameter => unreachable!("leaves always carry values"),
            Op::Add(a, b) => self.val(*a) + self.val(*b),
            Op::Sub(a, b) => self.val(*a) - self.val(*b),
            Op::Mul(a, b) => self.val(*a) * self.val(*b),
            Op::MulScalar(a, s) => self.val(*a) * self.first(*s),
            Op::DivScalar(a, s) => {
                let d = self.first(*s);
                if d == 0.0 {
                    Array::zeros(IxDyn(&shape))
                } else {
                    self.val(*a) / d
                }
            }
            Op::Scale(a, c) => self.val(*a) * *c,
            Op::Shift(a, c) => self.val(*a) + *c,
            Op::MatMul(a, b) => self.mat(*a).dot(&self.mat(*b)).into_dyn(),
            Op::Transpose(a) => self.mat(*a).t().to_owned().into_dyn(),
            Op::Sine(a) => self.val(*a).mapv(f64::sin),
            Op::Cosine(a) => self.val(*a).mapv(f64::cos),
            Op::Sigmoid(a) => self.val(*a).mapv(sigmoid),
            Op::Relu(a) => self.val(*a).mapv(|v| v.max(0.0)),
            Op::Step(a) => self.val(*a).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Op::Square(a) => self.val(*a).mapv(|v| v * v),
            Op::Sum(a) => ArrayD::from_elem(IxDyn(&[]), self.val(*a).sum()),
            Op::Mean(a) => {
                let v = self.val(*a);
                ArrayD::from_elem(IxDyn(&[]), v.sum() / v.len() as f64)
            }
            Op::SumRows(a) => self.mat(*a).sum_axis(Axis(0)).into_dyn(),
            Op::Broadcast(a, rows) => {
                let v = self.val(*a);
                let cols = v.len();
                v.broadcast(IxDyn(&[*rows, cols]))
                    .expect("vector broadcast")
                    .to_owned()
            }
            Op::Fill(a) => Array::from_elem(IxDyn(&shape), self.first(*a)),
            Op::Reshape(a) => self
                .val(*a)
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(&shape))
                .expect("element count checked"),
            Op::Concat(parts) => {
                let views: Vec<_> = parts.iter().map(|p| self.mat(*p)).collect();
                concatenate(Axis(1), &views).expect("rows checked").into_dyn()
            }
            Op::SliceCols(a, start, end) => self
                .mat(*a)
                .slice(ndarray::s![.., *start..*end])
                .to_owned()
                .into_dyn(),
            Op::PadCols(a, start, total) => {
                let v = self.mat(*a);
                let mut out = Array2::zeros((v.nrows(), *total));
                out.slice_mut(ndarray::s![.., *start..*start + v.ncols()]).assign(&v);
                out.into_dyn()
            }
            Op::Norm2(a) => {
                let v = self.val(*a);
                ArrayD::from_elem(IxDyn(&[]), v.iter().map(|x| x * x).sum::<f64>().sqrt())
            }
            Op::StopGradient(a) => self.val(*a).clone(),
        }
    }

    /// Builds gradient nodes of `scalar` with respect to each node in `wrt`.
    ///
    /// The returned nodes are ordinary graph nodes and may be differentiated
    /// again. Contributions to a node's adjoint are summed in ascending
    /// order of the consuming node's id. A `wrt` node that `scalar` does not
    /// depend on receives a zero constant of matching shape.
    pub fn grad(&mut self, scalar: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let out_shape = self.shape(scalar)?.to_vec();
        if out_shape.len() > 1 || numel(&out_shape) != 1 {
            return Err(GraphError::NotScalar {
                node: scalar,
                shape: out_shape,
            });
        }
        for &w in wrt {
            self.node(w)?;
        }

        let last = scalar.0;
        let mut depends = vec![false; last + 1];
        for &w in wrt {
            if w.0 <= last {
                depends[w.0] = true;
            }
        }
        for i in 0..=last {
            if depends[i] {
                continue;
            }
            depends[i] = match &self.nodes[i].op {
                Op::StopGradient(_) | Op::Step(_) => false,
                op => op.inputs().iter().any(|j| depends[j.0]),
            };
        }

        let mut adjoints: HashMap<usize, NodeId> = HashMap::new();
        let mut pending: HashMap<usize, Vec<(usize, NodeId)>> = HashMap::new();
        if depends[last] {
            let one = self.constant(Array::ones(IxDyn(&out_shape)));
            pending.insert(last, vec![(usize::MAX, one)]);
        }

        for i in (0..=last).rev() {
            if !depends[i] {
                continue;
            }
            let Some(mut contribs) = pending.remove(&i) else {
                continue;
            };
            contribs.sort_by_key(|(consumer, _)| *consumer);
            let mut adj = contribs[0].1;
            for &(_, c) in &contribs[1..] {
                adj = self.add(adj, c)?;
            }
            adjoints.insert(i, adj);

            let op = self.nodes[i].op.clone();
            for (slot, input) in op.inputs().into_iter().enumerate() {
                if !depends[input.0] {
                    continue;
                }
                let g = self.vjp(NodeId(i), &op, slot, adj)?;
                pending.entry(input.0).or_default().push((i, g));
            }
        }

        wrt.iter()
            .map(|w| match adjoints.get(&w.0) {
                Some(&g) => Ok(g),
                None => {
                    let shape = self.shape(*w)?.to_vec();
                    Ok(self.constant(Array::zeros(IxDyn(&shape))))
                }
            })
            .collect()
    }

    /// Vector-Jacobian product of `node` for its input at position `slot`,
    /// given the adjoint `g` of the node's output.
    fn vjp(&mut self, node: NodeId, op: &Op, slot: usize, g: NodeId) -> Result<NodeId> {
        match *op {
            Op::Constant | Op::Parameter | Op::StopGradient(_) | Op::Step(_) => {
                unreachable!("no gradient flows into leaves or detached nodes")
            }
            Op::Add(..) => Ok(g),
            Op::Sub(..) => {
                if slot == 0 {
                    Ok(g)
                } else {
                    self.neg(g)
                }
            }
            Op::Mul(a, b) => {
                let other = if slot == 0 { b } else { a };
                self.mul(g, other)
            }
            Op::MulScalar(a, s) => {
                if slot == 0 {
                    self.mul_scalar(g, s)
                } else {
                    let ga = self.mul(g, a)?;
                    let total = self.sum(ga)?;
                    let shape = self.shape(s)?.to_vec();
                    self.reshape(total, &shape)
                }
            }
            Op::DivScalar(_, s) => {
                if slot == 0 {
                    self.div_scalar(g, s)
                } else {
                    // d(a/s)/ds = -(a/s)/s
                    let gq = self.mul(g, node)?;
                    let total = self.sum(gq)?;
                    let q = self.div_scalar(total, s)?;
                    let neg = self.neg(q)?;
                    let shape = self.shape(s)?.to_vec();
                    self.reshape(neg, &shape)
                }
            }
            Op::Scale(_, c) => self.scale(g, c),
            Op::Shift(..) => Ok(g),
            Op::MatMul(a, b) => {
                if slot == 0 {
                    let bt = self.transpose(b)?;
                    self.matmul(g, bt)
                } else {
                    let at = self.transpose(a)?;
                    self.matmul(at, g)
                }
            }
            Op::Transpose(_) => self.transpose(g),
            Op::Sine(a) => {
                let c = self.cosine(a)?;
                self.mul(g, c)
            }
            Op::Cosine(a) => {
                let s = self.sine(a)?;
                let gs = self.mul(g, s)?;
                self.neg(gs)
            }
            Op::Sigmoid(_) => {
                // s (1 - s)
                let one_minus = self.scale(node, -1.0)?;
                let one_minus = self.shift(one_minus, 1.0)?;
                let d = self.mul(node, one_minus)?;
                self.mul(g, d)
            }
            Op::Relu(a) => {
                let mask = self.step(a)?;
                self.mul(g, mask)
            }
            Op::Square(a) => {
                let ga = self.mul(g, a)?;
                self.scale(ga, 2.0)
            }
            Op::Sum(a) => {
                let shape = self.shape(a)?.to_vec();
                self.fill(g, &shape)
            }
            Op::Mean(a) => {
                let shape = self.shape(a)?.to_vec();
                let n = numel(&shape) as f64;
                let gs = self.scale(g, 1.0 / n)?;
                self.fill(gs, &shape)
            }
            Op::SumRows(a) => {
                let rows = self.shape(a)?[0];
                self.broadcast(g, rows)
            }
            Op::Broadcast(..) => self.sum_rows(g),
            Op::Fill(a) => {
                let total = self.sum(g)?;
                let shape = self.shape(a)?.to_vec();
                self.reshape(total, &shape)
            }
            Op::Reshape(a) => {
                let shape = self.shape(a)?.to_vec();
                self.reshape(g, &shape)
            }
            Op::Concat(ref parts) => {
                let mut start = 0;
                for p in &parts[..slot] {
                    start += self.shape(*p)?[1];
                }
                let width = self.shape(parts[slot])?[1];
                self.slice_cols(g, start, start + width)
            }
            Op::SliceCols(a, start, _) => {
                let total = self.shape(a)?[1];
                self.pad_cols(g, start, total)
            }
            Op::PadCols(_, start, _) => {
                let width = self.shape(node)?[1];
                let inner = match op {
                    Op::PadCols(a, ..) => self.shape(*a)?[1],
                    _ => unreachable!(),
                };
                debug_assert!(start + inner <= width);
                self.slice_cols(g, start, start + inner)
            }
            Op::Norm2(a) => {
                // x / |x|, defined as zero at the origin
                let unit = self.div_scalar(g, node)?;
                self.mul_scalar(a, unit)
            }
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
