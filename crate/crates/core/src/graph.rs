//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once from root nodes (bound inputs or embedded
//! constants) and operations. [`Graph::forward`] evaluates the ancestors of
//! an output node and caches every intermediate value; [`Graph::grad`] then
//! replays the recorded operations in reverse to produce exact gradients of a
//! scalar output with respect to any set of input roots.
//!
//! Node ids are handed out in construction order, so the node list is always
//! a topological order.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::tensor::{sum_f64, Element, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid tensor shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: unsupported operand shape {shape:?}")]
    BadOperand { op: &'static str, shape: Vec<usize> },
    #[error("{op}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        op: &'static str,
        label: usize,
        classes: usize,
    },
    #[error("root `{0}` is not bound")]
    UnboundRoot(String),
    #[error("gradient requested for output of shape {0:?}; expected a scalar of shape [1]")]
    NotScalar(Vec<usize>),
    #[error("node {0} is not an input root of this graph")]
    NotARoot(usize),
    #[error("node {0} does not exist in this graph")]
    UnknownNode(usize),
    #[error("node {0} has not been evaluated; run forward first")]
    NotEvaluated(usize),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

pub type GraphResult<T> = Result<T, GraphError>;

/// Index of a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input {
        name: String,
    },
    Constant(Arc<Tensor<T>>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, T),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    L2Normalize(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Arc<Vec<usize>>,
    },
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    QuadForm {
        v: NodeId,
        m: NodeId,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Relu(_) => "relu",
            Op::L2Normalize(_) => "l2_normalize",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::QuadForm { .. } => "quad_form",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Constant(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::QuadForm { v, m } => vec![*v, *m],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::L2Normalize(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Tensors bound to the input roots of a graph.
#[derive(Debug, Clone)]
pub struct Bindings<T = f32> {
    map: HashMap<NodeId, Arc<Tensor<T>>>,
}

impl<T: Element> Default for Bindings<T> {
    fn default() -> Self {
        Self {
            map: HashMap::new(),
        }
    }
}

impl<T: Element> Bindings<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, root: NodeId, value: impl Into<Arc<Tensor<T>>>) -> &mut Self {
        self.map.insert(root, value.into());
        self
    }

    pub fn with(mut self, root: NodeId, value: impl Into<Arc<Tensor<T>>>) -> Self {
        self.bind(root, value);
        self
    }

    pub fn get(&self, root: NodeId) -> Option<&Tensor<T>> {
        self.map.get(&root).map(|t| t.as_ref())
    }

    pub fn cast<U: Element>(&self) -> Bindings<U> {
        Bindings {
            map: self
                .map
                .iter()
                .map(|(k, v)| (*k, Arc::new(v.cast::<U>())))
                .collect(),
        }
    }
}

/// A computation graph over tensors of element type `T`.
#[derive(Debug, Clone)]
pub struct Graph<T = f32> {
    ops: Vec<Op<T>>,
    values: Vec<Option<Arc<Tensor<T>>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op<T>) -> NodeId {
        for input in op.inputs() {
            assert!(
                input.0 < self.ops.len(),
                "node {} used before it was created",
                input.0
            );
        }
        self.ops.push(op);
        self.values.push(None);
        NodeId(self.ops.len() - 1)
    }

    /// Root whose value is supplied through [`Bindings`] at forward time.
    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input { name: name.into() })
    }

    /// Root with an embedded value. Constants never receive gradients.
    pub fn constant(&mut self, value: impl Into<Arc<Tensor<T>>>) -> NodeId {
        self.push(Op::Constant(value.into()))
    }

    /// Element-wise sum. `b` may also be a row vector (`[d]` or `[1, d]`)
    /// broadcast over the rows of a `[n, d]` operand, or a single value.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    /// Element-wise `a - b` with the same broadcasting rules as [`Graph::add`].
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    /// Normalizes each vector along the last axis to unit L2 norm. A zero
    /// vector maps to zero and passes back a zero gradient.
    pub fn l2_normalize(&mut self, a: NodeId) -> NodeId {
        self.push(Op::L2Normalize(a))
    }

    /// Mean softmax cross-entropy of `[n, c]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy {
            logits,
            labels: Arc::new(labels),
        })
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    /// Row-wise quadratic form `vᵢᵀ M vᵢ`: `[n, d]` gives `[n, 1]`, `[d]` gives `[1]`.
    pub fn quad_form(&mut self, v: NodeId, m: NodeId) -> NodeId {
        self.push(Op::QuadForm { v, m })
    }

    /// Cached forward value of a node.
    pub fn value(&self, node: NodeId) -> GraphResult<&Tensor<T>> {
        self.values
            .get(node.0)
            .ok_or(GraphError::UnknownNode(node.0))?
            .as_deref()
            .ok_or(GraphError::NotEvaluated(node.0))
    }

    /// Whether `node` is an input root (as opposed to a constant or operation).
    pub fn is_input(&self, node: NodeId) -> bool {
        matches!(self.ops.get(node.0), Some(Op::Input { .. }))
    }

    /// Copy of this graph in another precision. Cached values are dropped.
    pub fn cast<U: Element>(&self) -> Graph<U> {
        let ops = self
            .ops
            .iter()
            .map(|op| match op {
                Op::Input { name } => Op::Input { name: name.clone() },
                Op::Constant(t) => Op::Constant(Arc::new(t.cast::<U>())),
                Op::Add(a, b) => Op::Add(*a, *b),
                Op::Sub(a, b) => Op::Sub(*a, *b),
                Op::Scale(a, s) => Op::Scale(*a, U::from_f64_lossy(s.as_f64())),
                Op::MatMul(a, b) => Op::MatMul(*a, *b),
                Op::Relu(a) => Op::Relu(*a),
                Op::L2Normalize(a) => Op::L2Normalize(*a),
                Op::SoftmaxCrossEntropy { logits, labels } => Op::SoftmaxCrossEntropy {
                    logits: *logits,
                    labels: labels.clone(),
                },
                Op::Square(a) => Op::Square(*a),
                Op::Sum(a) => Op::Sum(*a),
                Op::Mean(a) => Op::Mean(*a),
                Op::QuadForm { v, m } => Op::QuadForm { v: *v, m: *m },
            })
            .collect::<Vec<_>>();
        let values = vec![None; ops.len()];
        Graph { ops, values }
    }

    fn check_node(&self, node: NodeId) -> GraphResult<()> {
        if node.0 < self.ops.len() {
            Ok(())
        } else {
            Err(GraphError::UnknownNode(node.0))
        }
    }

    /// Marks the ancestors of `output` (inclusive).
    fn ancestors(&self, output: NodeId) -> Vec<bool> {
        let mut needed = vec![false; self.ops.len()];
        needed[output.0] = true;
        for i in (0..=output.0).rev() {
            if needed[i] {
                for input in self.ops[i].inputs() {
                    needed[input.0] = true;
                }
            }
        }
        needed
    }

    /// Clears cached values, binds roots and evaluates every ancestor of
    /// `output`.
    pub fn forward(&mut self, bindings: &Bindings<T>, output: NodeId) -> GraphResult<&Tensor<T>> {
        self.check_node(output)?;
        self.values.iter_mut().for_each(|v| *v = None);
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Input { .. } = op {
                if let Some(t) = bindings.map.get(&NodeId(i)) {
                    self.values[i] = Some(t.clone());
                }
            }
        }
        self.resume(output)
    }

    /// Evaluates the ancestors of `output` that do not yet have a cached
    /// value, keeping the bindings and values of the previous pass. This lets
    /// callers inspect intermediate values, append data-dependent nodes and
    /// continue without recomputing shared prefixes.
    pub fn resume(&mut self, output: NodeId) -> GraphResult<&Tensor<T>> {
        self.check_node(output)?;
        let needed = self.ancestors(output);
        for (i, &need) in needed.iter().enumerate().take(output.0 + 1) {
            if !need || self.values[i].is_some() {
                continue;
            }
            let value = match &self.ops[i] {
                Op::Input { name } => return Err(GraphError::UnboundRoot(name.clone())),
                Op::Constant(t) => t.clone(),
                op => Arc::new(eval_op(op, &self.values)?),
            };
            self.values[i] = Some(value);
        }
        self.value(output)
    }

    /// Reverse-mode gradients of the scalar `output` with respect to each
    /// root in `wrt`, in the same order. Requires a prior forward pass.
    pub fn grad(&self, output: NodeId, wrt: &[NodeId]) -> GraphResult<Vec<Tensor<T>>> {
        self.check_node(output)?;
        for &root in wrt {
            self.check_node(root)?;
            if !self.is_input(root) {
                return Err(GraphError::NotARoot(root.0));
            }
        }
        let out = self.value(output)?;
        if out.shape() != [1] {
            return Err(GraphError::NotScalar(out.shape().to_vec()));
        }

        let needed = self.ancestors(output);
        let mut requires = vec![false; self.ops.len()];
        for &root in wrt {
            requires[root.0] = true;
        }
        for i in 0..=output.0 {
            if !requires[i] {
                requires[i] = self.ops[i].inputs().iter().any(|n| requires[n.0]);
            }
        }

        let mut adjoints: Vec<Option<Tensor<T>>> = vec![None; self.ops.len()];
        adjoints[output.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=output.0).rev() {
            if !needed[i] || !requires[i] {
                continue;
            }
            let Some(upstream) = adjoints[i].take() else {
                continue;
            };
            let op = &self.ops[i];
            if matches!(op, Op::Input { .. }) {
                adjoints[i] = Some(upstream);
                continue;
            }
            for (input, g) in self.backward_op(op, i, &upstream, &requires)? {
                accumulate(&mut adjoints[input.0], g);
            }
        }

        wrt.iter()
            .map(|&root| {
                let shape = self.value(root)?.shape().to_vec();
                Ok(adjoints[root.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(shape)))
            })
            .collect()
    }

    fn backward_op(
        &self,
        op: &Op<T>,
        index: usize,
        g: &Tensor<T>,
        requires: &[bool],
    ) -> GraphResult<Vec<(NodeId, Tensor<T>)>> {
        let val = |n: NodeId| self.value(n);
        let wants = |n: NodeId| requires[n.0];
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Input { .. } | Op::Constant(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(op, Op::Sub(..));
                if wants(*a) {
                    out.push((*a, g.clone()));
                }
                if wants(*b) {
                    let av = val(*a)?;
                    let bv = val(*b)?;
                    let kind = broadcast_kind(op.name(), av.shape(), bv.shape())?;
                    let mut gb = reduce_broadcast(g, bv.shape(), kind);
                    if negate {
                        gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                    }
                    out.push((*b, gb));
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    out.push((*a, g.map(|v| v * *s)));
                }
            }
            Op::MatMul(a, b) => {
                let av = val(*a)?;
                let bv = val(*b)?;
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga);
                    out.push((*a, Tensor::from_parts(vec![m, k], ga)));
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, av.data(), true, g.data(), false, &mut gb);
                    out.push((*b, Tensor::from_parts(vec![k, n], gb)));
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let av = val(*a)?;
                    let data = av
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                        .collect();
                    out.push((*a, Tensor::from_parts(av.shape().to_vec(), data)));
                }
            }
            Op::L2Normalize(a) => {
                if wants(*a) {
                    let av = val(*a)?;
                    let y = self.value(NodeId(index))?;
                    let d = av.last_dim();
                    let mut ga = vec![T::zero(); av.numel()];
                    for (row, ((x, yr), gr)) in av
                        .data()
                        .chunks(d)
                        .zip(y.data().chunks(d))
                        .zip(g.data().chunks(d))
                        .enumerate()
                    {
                        let norm = sum_sq_f64(x).sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let dot: f64 = yr
                            .iter()
                            .zip(gr)
                            .map(|(&yv, &gv)| yv.as_f64() * gv.as_f64())
                            .sum();
                        for j in 0..d {
                            let v = (gr[j].as_f64() - yr[j].as_f64() * dot) / norm;
                            ga[row * d + j] = T::from_f64_lossy(v);
                        }
                    }
                    out.push((*a, Tensor::from_parts(av.shape().to_vec(), ga)));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                if wants(*logits) {
                    let lv = val(*logits)?;
                    let (n, c) = (lv.shape()[0], lv.shape()[1]);
                    let upstream = g.data()[0].as_f64() / n as f64;
                    let mut gl = vec![T::zero(); n * c];
                    for (i, row) in lv.data().chunks(c).enumerate() {
                        let probs = softmax_f64(row);
                        for j in 0..c {
                            let target = if labels[i] == j { 1.0 } else { 0.0 };
                            gl[i * c + j] = T::from_f64_lossy((probs[j] - target) * upstream);
                        }
                    }
                    out.push((*logits, Tensor::from_parts(vec![n, c], gl)));
                }
            }
            Op::Square(a) => {
                if wants(*a) {
                    let av = val(*a)?;
                    let two = T::one() + T::one();
                    let data = av
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| two * x * gv)
                        .collect();
                    out.push((*a, Tensor::from_parts(av.shape().to_vec(), data)));
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if wants(*a) {
                    let av = val(*a)?;
                    let mut gv = g.data()[0];
                    if matches!(op, Op::Mean(_)) {
                        gv = T::from_f64_lossy(gv.as_f64() / av.numel() as f64);
                    }
                    out.push((
                        *a,
                        Tensor::from_parts(av.shape().to_vec(), vec![gv; av.numel()]),
                    ));
                }
            }
            Op::QuadForm { v, m } => {
                let vv = val(*v)?;
                let mv = val(*m)?;
                let d = mv.shape()[0];
                let rows = vv.numel() / d;
                if wants(*v) {
                    // gv_i = g_i (M + Mᵀ) v_i
                    let mut vm = vec![T::zero(); rows * d];
                    let mut vmt = vec![T::zero(); rows * d];
                    T::gemm(rows, d, d, vv.data(), false, mv.data(), false, &mut vm);
                    T::gemm(rows, d, d, vv.data(), false, mv.data(), true, &mut vmt);
                    let mut gvd = vec![T::zero(); rows * d];
                    for i in 0..rows {
                        let gi = g.data()[i];
                        for j in 0..d {
                            gvd[i * d + j] = gi * (vm[i * d + j] + vmt[i * d + j]);
                        }
                    }
                    out.push((*v, Tensor::from_parts(vv.shape().to_vec(), gvd)));
                }
                if wants(*m) {
                    // gM = Σ_i g_i v_i v_iᵀ
                    let mut scaled = vec![T::zero(); rows * d];
                    for i in 0..rows {
                        let gi = g.data()[i];
                        for j in 0..d {
                            scaled[i * d + j] = gi * vv.data()[i * d + j];
                        }
                    }
                    let mut gm = vec![T::zero(); d * d];
                    T::gemm(d, rows, d, vv.data(), true, &scaled, false, &mut gm);
                    out.push((*m, Tensor::from_parts(vec![d, d], gm)));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Rows,
    Scalar,
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> GraphResult<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if a.len() == 2 && (b == [a[1]] || b == [1, a[1]]) {
        return Ok(Broadcast::Rows);
    }
    if b.iter().product::<usize>() == 1 {
        return Ok(Broadcast::Scalar);
    }
    Err(GraphError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    })
}

fn reduce_broadcast<T: Element>(g: &Tensor<T>, b_shape: &[usize], kind: Broadcast) -> Tensor<T> {
    match kind {
        Broadcast::Same => g.clone(),
        Broadcast::Rows => {
            let d = g.last_dim();
            let mut acc = vec![0.0f64; d];
            for row in g.data().chunks(d) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v.as_f64();
                }
            }
            Tensor::from_parts(
                b_shape.to_vec(),
                acc.into_iter().map(T::from_f64_lossy).collect(),
            )
        }
        Broadcast::Scalar => {
            Tensor::from_parts(b_shape.to_vec(), vec![T::from_f64_lossy(sum_f64(g.data()))])
        }
    }
}

fn sum_sq_f64<T: Element>(x: &[T]) -> f64 {
    x.iter().map(|v| v.as_f64() * v.as_f64()).sum()
}

fn softmax_f64<T: Element>(row: &[T]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn eval_op<T: Element>(op: &Op<T>, values: &[Option<Arc<Tensor<T>>>]) -> GraphResult<Tensor<T>> {
    let val = |n: &NodeId| -> GraphResult<&Tensor<T>> {
        values[n.0].as_deref().ok_or(GraphError::NotEvaluated(n.0))
    };
    let name = op.name();
    match op {
        Op::Input { .. } | Op::Constant(_) => unreachable!("roots are not evaluated"),
        Op::Add(a, b) | Op::Sub(a, b) => {
            let (av, bv) = (val(a)?, val(b)?);
            let kind = broadcast_kind(name, av.shape(), bv.shape())?;
            let bd = bv.data();
            let d = av.last_dim();
            let subtract = matches!(op, Op::Sub(..));
            let data = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = match kind {
                        Broadcast::Same => bd[i],
                        Broadcast::Rows => bd[i % d],
                        Broadcast::Scalar => bd[0],
                    };
                    if subtract {
                        x - y
                    } else {
                        x + y
                    }
                })
                .collect();
            Ok(Tensor::from_parts(av.shape().to_vec(), data))
        }
        Op::Scale(a, s) => Ok(val(a)?.map(|v| v * *s)),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a)?, val(b)?);
            if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
                return Err(GraphError::ShapeMismatch {
                    op: name,
                    left: av.shape().to_vec(),
                    right: bv.shape().to_vec(),
                });
            }
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut c = vec![T::zero(); m * n];
            T::gemm(m, k, n, av.data(), false, bv.data(), false, &mut c);
            Ok(Tensor::from_parts(vec![m, n], c))
        }
        Op::Relu(a) => Ok(val(a)?.map(|v| if v > T::zero() { v } else { T::zero() })),
        Op::L2Normalize(a) => {
            let av = val(a)?;
            let d = av.last_dim();
            let mut data = Vec::with_capacity(av.numel());
            for row in av.data().chunks(d) {
                let norm = sum_sq_f64(row).sqrt();
                if norm == 0.0 {
                    data.extend(std::iter::repeat_n(T::zero(), d));
                } else {
                    data.extend(row.iter().map(|v| T::from_f64_lossy(v.as_f64() / norm)));
                }
            }
            Ok(Tensor::from_parts(av.shape().to_vec(), data))
        }
        Op::SoftmaxCrossEntropy { logits, labels } => {
            let lv = val(logits)?;
            if lv.shape().len() != 2 {
                return Err(GraphError::BadOperand {
                    op: name,
                    shape: lv.shape().to_vec(),
                });
            }
            let (n, c) = (lv.shape()[0], lv.shape()[1]);
            if labels.len() != n {
                return Err(GraphError::ShapeMismatch {
                    op: name,
                    left: lv.shape().to_vec(),
                    right: vec![labels.len()],
                });
            }
            let mut total = 0.0f64;
            for (row, &label) in lv.data().chunks(c).zip(labels.iter()) {
                if label >= c {
                    return Err(GraphError::LabelOutOfRange {
                        op: name,
                        label,
                        classes: c,
                    });
                }
                let max = row
                    .iter()
                    .map(|v| v.as_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = max
                    + row
                        .iter()
                        .map(|v| (v.as_f64() - max).exp())
                        .sum::<f64>()
                        .ln();
                total += lse - row[label].as_f64();
            }
            Ok(Tensor::scalar(T::from_f64_lossy(total / n as f64)))
        }
        Op::Square(a) => Ok(val(a)?.map(|v| v * v)),
        Op::Sum(a) => Ok(Tensor::scalar(T::from_f64_lossy(sum_f64(val(a)?.data())))),
        Op::Mean(a) => {
            let av = val(a)?;
            Ok(Tensor::scalar(T::from_f64_lossy(
                sum_f64(av.data()) / av.numel() as f64,
            )))
        }
        Op::QuadForm { v, m } => {
            let (vv, mv) = (val(v)?, val(m)?);
            let ms = mv.shape();
            if ms.len() != 2 || ms[0] != ms[1] {
                return Err(GraphError::BadOperand {
                    op: name,
                    shape: ms.to_vec(),
                });
            }
            let d = ms[0];
            let rows = match vv.shape() {
                [len] if *len == d => 1,
                [r, len] if *len == d => *r,
                other => {
                    return Err(GraphError::ShapeMismatch {
                        op: name,
                        left: other.to_vec(),
                        right: ms.to_vec(),
                    })
                }
            };
            let mut vm = vec![T::zero(); rows * d];
            T::gemm(rows, d, d, vv.data(), false, mv.data(), false, &mut vm);
            let data: Vec<T> = vm
                .chunks(d)
                .zip(vv.data().chunks(d))
                .map(|(w, x)| {
                    T::from_f64_lossy(w.iter().zip(x).map(|(a, b)| a.as_f64() * b.as_f64()).sum())
                })
                .collect();
            let shape = if vv.shape().len() == 1 {
                vec![1]
            } else {
                vec![rows, 1]
            };
            Ok(Tensor::from_parts(shape, data))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_forward() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.matmul(a, b);
        let bind = Bindings::new()
            .with(a, t(&[2, 2], &[1., 2., 3., 4.]))
            .with(b, t(&[2, 1], &[1., 1.]));
        let out = g.forward(&bind, c).unwrap();
        assert_eq!(out.shape(), [2, 1]);
        assert_eq!(out.data(), [3., 7.]);
    }

    #[test]
    fn relu_and_normalize_forward() {
        let mut g = Graph::new();
        let x = g.input("x");
        let r = g.relu(x);
        let bind = Bindings::new().with(x, Tensor::vector(vec![-1.0f32, 0.0, 2.0]));
        assert_eq!(g.forward(&bind, r).unwrap().data(), [0., 0., 2.]);

        let mut g = Graph::new();
        let x = g.input("x");
        let n = g.l2_normalize(x);
        let bind = Bindings::new().with(x, Tensor::vector(vec![3.0f32, 4.0]));
        let out = g.forward(&bind, n).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-7);
        assert!((out.data()[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.input("x");
        let sq = g.square(x);
        let s = g.sum(sq);
        let bind = Bindings::new().with(x, Tensor::vector(vec![1.0f32, 2.0, 3.0]));
        g.forward(&bind, s).unwrap();
        let grads = g.grad(s, &[x]).unwrap();
        assert_eq!(grads[0].data(), [2., 4., 6.]);
    }

    #[test]
    fn relu_gradient_at_negative_and_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.input("x");
        let r = g.relu(x);
        let s = g.sum(r);
        let bind = Bindings::new().with(x, Tensor::vector(vec![-1.0f32, 5.0, 0.0]));
        g.forward(&bind, s).unwrap();
        assert_eq!(g.grad(s, &[x]).unwrap()[0].data(), [0., 1., 0.]);
    }

    #[test]
    fn normalized_sum_gradient() {
        // d/dx sum(x/|x|) at (3,4): ((1 - 0.6*1.4)/5, (1 - 0.8*1.4)/5)
        let mut g = Graph::new();
        let x = g.input("x");
        let n = g.l2_normalize(x);
        let s = g.sum(n);
        let bind = Bindings::new().with(x, Tensor::vector(vec![3.0f32, 4.0]));
        g.forward(&bind, s).unwrap();
        let grad = &g.grad(s, &[x]).unwrap()[0];
        assert!((grad.data()[0] - 0.032).abs() < 1e-6);
        assert!((grad.data()[1] + 0.024).abs() < 1e-6);
    }

    #[test]
    fn zero_vector_normalizes_to_zero_with_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input("x");
        let n = g.l2_normalize(x);
        let s = g.sum(n);
        let bind = Bindings::new().with(x, Tensor::vector(vec![0.0f32, 0.0]));
        assert_eq!(g.forward(&bind, n).unwrap().data(), [0., 0.]);
        g.forward(&bind, s).unwrap();
        assert_eq!(g.grad(s, &[x]).unwrap()[0].data(), [0., 0.]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.matmul(a, b);
        let bind = Bindings::new()
            .with(a, t(&[2, 3], &[0.; 6]))
            .with(b, t(&[2, 3], &[0.; 6]));
        let err = g.forward(&bind, c).unwrap_err();
        assert_eq!(
            err,
            GraphError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn unbound_root_is_named() {
        let mut g = Graph::<f32>::new();
        let a = g.input("weights");
        let s = g.sum(a);
        let err = g.forward(&Bindings::new(), s).unwrap_err();
        assert_eq!(err, GraphError::UnboundRoot("weights".into()));
    }

    #[test]
    fn grad_rejects_non_scalar_and_non_roots() {
        let mut g = Graph::new();
        let x = g.input("x");
        let sq = g.square(x);
        let s = g.sum(sq);
        let bind = Bindings::new().with(x, Tensor::vector(vec![1.0f32, 2.0]));
        g.forward(&bind, s).unwrap();
        assert!(matches!(g.grad(sq, &[x]), Err(GraphError::NotScalar(_))));
        assert!(matches!(g.grad(s, &[sq]), Err(GraphError::NotARoot(_))));
        assert!(matches!(
            g.grad(s, &[NodeId(99)]),
            Err(GraphError::UnknownNode(99))
        ));
    }

    #[test]
    fn row_broadcast_bias_gradient_sums_rows() {
        let mut g = Graph::new();
        let x = g.input("x");
        let b = g.input("b");
        let y = g.add(x, b);
        let s = g.sum(y);
        let bind = Bindings::new()
            .with(x, t(&[3, 2], &[0.; 6]))
            .with(b, Tensor::vector(vec![1.0f32, 2.0]));
        let out = g.forward(&bind, y).unwrap();
        assert_eq!(out.data(), [1., 2., 1., 2., 1., 2.]);
        g.forward(&bind, s).unwrap();
        assert_eq!(g.grad(s, &[b]).unwrap()[0].data(), [3., 3.]);
    }

    #[test]
    fn softmax_cross_entropy_matches_hand_value() {
        let mut g = Graph::new();
        let z = g.input("z");
        let l = g.softmax_cross_entropy(z, vec![0]);
        let bind = Bindings::new().with(z, t(&[1, 2], &[0., 0.]));
        let v = g.forward(&bind, l).unwrap().item().unwrap();
        assert!((v - std::f32::consts::LN_2).abs() < 1e-6);
        let grad = &g.grad(l, &[z]).unwrap()[0];
        assert!((grad.data()[0] + 0.5).abs() < 1e-6);
        assert!((grad.data()[1] - 0.5).abs() < 1e-6);

        let mut g2 = Graph::new();
        let z2 = g2.input("z");
        let l2 = g2.softmax_cross_entropy(z2, vec![2]);
        let bind2 = Bindings::new().with(z2, t(&[1, 2], &[0., 0.]));
        assert!(matches!(
            g2.forward(&bind2, l2),
            Err(GraphError::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn quad_form_matches_hand_value() {
        let mut g = Graph::new();
        let v = g.input("v");
        let m = g.constant(t(&[2, 2], &[2., 0., 0., 1.]));
        let q = g.quad_form(v, m);
        let bind = Bindings::new().with(v, Tensor::vector(vec![1.0f32, 1.0]));
        assert_eq!(g.forward(&bind, q).unwrap().data(), [3.]);
    }

    #[test]
    fn resume_extends_a_forward_pass() {
        let mut g = Graph::new();
        let x = g.input("x");
        let sq = g.square(x);
        let bind = Bindings::new().with(x, Tensor::vector(vec![1.0f32, 2.0]));
        g.forward(&bind, sq).unwrap();
        let s = g.sum(sq);
        assert_eq!(g.resume(s).unwrap().data(), [5.]);
        assert_eq!(g.grad(s, &[x]).unwrap()[0].data(), [2., 4.]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut g = Graph::new();
        let a = g.input("a");
        let w = g.constant(t(&[3, 2], &[0.1, -0.7, 0.3, 0.9, -1.3, 0.2]));
        let h = g.matmul(a, w);
        let r = g.relu(h);
        let n = g.l2_normalize(r);
        let bind = Bindings::new().with(a, t(&[2, 3], &[0.3, 0.1, -0.4, 1.5, 0.2, 0.8]));
        let first = g.forward(&bind, n).unwrap().clone();
        let second = g.forward(&bind, n).unwrap().clone();
        assert_eq!(first, second);
    }
}
