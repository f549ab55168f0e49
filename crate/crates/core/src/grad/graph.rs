use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{self, Conv3dGeom};
use super::{GradError, Scalar, Tensor};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Lower clamp applied to binary-cross-entropy predictions (and `1 - BCE_CLAMP`
/// as the upper clamp).
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a value recorded in one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    graph: u64,
    index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Primitive catalog accepted by [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Elementwise `a + b` (identical shapes).
    Add,
    /// Elementwise `a - b`.
    Sub,
    /// Elementwise `a * b`.
    Mul,
    /// `c * a`.
    Scale(f64),
    /// `[m,k] @ [k,n]`.
    MatMul,
    /// `[m,n] + row[n]`, the row broadcast to every row.
    AddRow,
    /// Kernel-size-1 convolution: `(x[Cin,N], w[Cout,Cin], b[Cout]) -> [Cout,N]`.
    Conv1d,
    /// Direct 3D convolution: `(x[Cin,D,H,W], w[Cout,Cin,kd,kh,kw], b[Cout])`.
    Conv3d {
        stride: usize,
        padding: usize,
    },
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Concat {
        axis: usize,
    },
    Reshape(Vec<usize>),
    /// 2D transpose.
    Transpose,
    /// Maximum along one axis; the axis is removed from the shape.
    MaxReduce {
        axis: usize,
    },
    /// Mean along one axis, or over everything (scalar) when `axis` is `None`.
    MeanReduce {
        axis: Option<usize>,
    },
    /// `mean((a - b)^2)`.
    Mse,
    /// `mean(-(t ln p + (1 - t) ln(1 - p)))`, predictions clamped to
    /// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    Bce,
    /// `(mu, logvar, noise) -> mu + exp(logvar / 2) * noise`.
    Reparameterize,
    /// `(mu, logvar) -> -0.5 * sum(1 + logvar - mu^2 - exp(logvar))`.
    KlStdNormal,
    /// Symmetric mean squared nearest-neighbour distance between `[N,d]` and `[M,d]`.
    Chamfer,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::MatMul => "matmul",
            Primitive::AddRow => "add_row",
            Primitive::Conv1d => "conv1d",
            Primitive::Conv3d { .. } => "conv3d",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Concat { .. } => "concat",
            Primitive::Reshape(_) => "reshape",
            Primitive::Transpose => "transpose",
            Primitive::MaxReduce { .. } => "max_reduce",
            Primitive::MeanReduce { .. } => "mean_reduce",
            Primitive::Mse => "mse",
            Primitive::Bce => "bce",
            Primitive::Reparameterize => "reparameterize",
            Primitive::KlStdNormal => "kl_std_normal",
            Primitive::Chamfer => "chamfer",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::Scale(_)
            | Primitive::Relu
            | Primitive::Sigmoid
            | Primitive::Tanh
            | Primitive::Exp
            | Primitive::Reshape(_)
            | Primitive::Transpose
            | Primitive::MaxReduce { .. }
            | Primitive::MeanReduce { .. } => 1,
            Primitive::Conv1d | Primitive::Conv3d { .. } | Primitive::Reparameterize => 3,
            Primitive::Concat { .. } => usize::MAX,
            _ => 2,
        }
    }
}

/// Recorded operation plus whatever the backward pass needs beyond the
/// input and output values.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul { m: usize, k: usize, n: usize },
    AddRow { rows: usize, cols: usize },
    Conv1d { cout: usize, cin: usize, n: usize },
    Conv3d(Conv3dGeom),
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Concat { outer: usize, chunks: Vec<usize> },
    Reshape,
    Transpose { rows: usize, cols: usize },
    MaxReduce { argmax: Vec<usize> },
    MeanReduce { outer: usize, len: usize, inner: usize },
    Mse,
    Bce,
    Reparameterize,
    KlStdNormal,
    Chamfer { dim: usize, ab: Vec<usize>, ba: Vec<usize> },
}

struct Node<S> {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Arc<Vec<S>>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in creation order, so every input
/// refers to an earlier node and the reverse pass is a backwards walk.
pub struct Graph<S> {
    id: u64,
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as a leaf, sharing its buffer. Gradients are tracked
    /// iff the tensor requires them.
    pub fn leaf(&mut self, t: &Tensor<S>) -> NodeId {
        self.push(Op::Leaf, Vec::new(), t.shape().to_vec(), Arc::clone(t.shared()), t.requires_grad())
    }

    /// Records a tensor as a constant, whatever its `requires_grad` flag.
    pub fn constant(&mut self, t: &Tensor<S>) -> NodeId {
        self.push(Op::Leaf, Vec::new(), t.shape().to_vec(), Arc::clone(t.shared()), false)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<S>) -> Result<NodeId, GradError> {
        Ok(self.constant(&Tensor::new(shape, data)?))
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.node(id).value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.node(id).requires_grad
    }

    /// Detached tensor holding the node's current value.
    pub fn tensor(&self, id: NodeId) -> Tensor<S> {
        let n = self.node(id);
        Tensor::from_shared(n.shape.clone(), Arc::clone(&n.value))
    }

    fn node(&self, id: NodeId) -> &Node<S> {
        assert_eq!(id.graph, self.id, "node id belongs to another graph");
        &self.nodes[id.index]
    }

    fn owns(&self, id: NodeId) -> bool {
        id.graph == self.id && id.index < self.nodes.len()
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, shape: Vec<usize>, value: Arc<Vec<S>>, rg: bool) -> NodeId {
        debug_assert!(inputs.iter().all(|&i| i < self.nodes.len()));
        self.nodes.push(Node { op, inputs, shape, value, requires_grad: rg });
        NodeId { graph: self.id, index: self.nodes.len() - 1 }
    }

    /// Evaluates one primitive and records it.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId, GradError> {
        let name = prim.name();
        let arity = prim.arity();
        if (arity == usize::MAX && inputs.is_empty()) || (arity != usize::MAX && inputs.len() != arity) {
            return Err(mismatch(name, format!("expected {arity} inputs, got {}", inputs.len())));
        }
        if let Some(bad) = inputs.iter().find(|&&i| !self.owns(i)) {
            return Err(GradError::Detached(bad.index));
        }
        let idx: Vec<usize> = inputs.iter().map(|i| i.index).collect();
        let (op, shape, value) = {
            let vals: Vec<&[S]> = idx.iter().map(|&i| self.nodes[i].value.as_slice()).collect();
            let shapes: Vec<&[usize]> = idx.iter().map(|&i| self.nodes[i].shape.as_slice()).collect();
            forward(&prim, &vals, &shapes)?
        };
        let rg = idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(op, idx, shape, Arc::new(value), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, GradError> {
        self.apply(Primitive::Scale(c), &[a])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::AddRow, &[a, row])
    }
    /// `x[1,in] @ w[in,out] + b[out]`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Conv1d, &[x, w, b])
    }
    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, GradError> {
        self.apply(Primitive::Conv3d { stride, padding }, &[x, w, b])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, GradError> {
        self.apply(Primitive::Concat { axis }, parts)
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, GradError> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn max_reduce(&mut self, a: NodeId, axis: usize) -> Result<NodeId, GradError> {
        self.apply(Primitive::MaxReduce { axis }, &[a])
    }
    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId, GradError> {
        self.apply(Primitive::MeanReduce { axis }, &[a])
    }
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Mse, &[a, b])
    }
    pub fn bce(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Bce, &[pred, target])
    }
    pub fn reparameterize(&mut self, mu: NodeId, logvar: NodeId, noise: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Reparameterize, &[mu, logvar, noise])
    }
    pub fn kl_std_normal(&mut self, mu: NodeId, logvar: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::KlStdNormal, &[mu, logvar])
    }
    pub fn chamfer(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Chamfer, &[a, b])
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Gradients are accumulated in exact reverse creation order. Every leaf
    /// that requires grad ends up with an entry, zero-filled when the loss
    /// does not depend on it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>, GradError> {
        if !self.owns(loss) {
            return Err(GradError::Detached(loss.index));
        }
        let ln = &self.nodes[loss.index];
        if ln.value.len() != 1 {
            return Err(GradError::NotScalar(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        if ln.requires_grad {
            grads[loss.index] = Some(vec![S::one()]);
        }
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            let need: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let vals: Vec<&[S]> = node.inputs.iter().map(|&j| self.nodes[j].value.as_slice()).collect();
            let input_grads = backward_op(&node.op, &vals, &node.value, &gout, &need);
            for ((&j, g), needed) in node.inputs.iter().zip(input_grads).zip(need) {
                if !needed {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let leaf_param = node.requires_grad && matches!(node.op, Op::Leaf);
            out.push(if leaf_param { Some(g.unwrap_or_else(|| vec![S::zero(); node.value.len()])) } else { None });
        }
        Ok(Gradients { graph: self.id, grads: out })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    graph: u64,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&[S]> {
        if id.graph != self.graph {
            return None;
        }
        self.grads.get(id.index).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<S>> {
        if id.graph != self.graph {
            return None;
        }
        self.grads.get_mut(id.index).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, detail: String) -> GradError {
    GradError::ShapeMismatch { op, detail }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), GradError> {
    if a != b {
        return Err(mismatch(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn rank(op: &'static str, what: &str, shape: &[usize], r: usize) -> Result<(), GradError> {
    if shape.len() != r {
        return Err(mismatch(op, format!("{what} must be rank {r}, got {shape:?}")));
    }
    Ok(())
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

type Forward<S> = (Op, Vec<usize>, Vec<S>);

fn forward<S: Scalar>(prim: &Primitive, v: &[&[S]], s: &[&[usize]]) -> Result<Forward<S>, GradError> {
    let name = prim.name();
    let scalar = vec![1usize];
    Ok(match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            same_shape(name, s[0], s[1])?;
            let (a, b) = (v[0], v[1]);
            let (op, out): (Op, Vec<S>) = match prim {
                Primitive::Add => (Op::Add, a.iter().zip(b).map(|(x, y)| *x + *y).collect()),
                Primitive::Sub => (Op::Sub, a.iter().zip(b).map(|(x, y)| *x - *y).collect()),
                _ => (Op::Mul, a.iter().zip(b).map(|(x, y)| *x * *y).collect()),
            };
            (op, s[0].to_vec(), out)
        }
        Primitive::Scale(c) => {
            let cs = S::from_f64_lossy(*c);
            (Op::Scale(*c), s[0].to_vec(), v[0].iter().map(|x| *x * cs).collect())
        }
        Primitive::MatMul => {
            rank(name, "lhs", s[0], 2)?;
            rank(name, "rhs", s[1], 2)?;
            let (m, k, k2, n) = (s[0][0], s[0][1], s[1][0], s[1][1]);
            if k != k2 {
                return Err(mismatch(name, format!("{:?} @ {:?}", s[0], s[1])));
            }
            (Op::MatMul { m, k, n }, vec![m, n], kernels::matmul(v[0], v[1], m, k, n))
        }
        Primitive::AddRow => {
            rank(name, "input", s[0], 2)?;
            let (rows, cols) = (s[0][0], s[0][1]);
            if v[1].len() != cols {
                return Err(mismatch(name, format!("row of {} for {:?}", v[1].len(), s[0])));
            }
            let mut out = v[0].to_vec();
            for r in out.chunks_exact_mut(cols) {
                r.iter_mut().zip(v[1]).for_each(|(a, b)| *a += *b);
            }
            (Op::AddRow { rows, cols }, s[0].to_vec(), out)
        }
        Primitive::Conv1d => {
            rank(name, "input", s[0], 2)?;
            rank(name, "weight", s[1], 2)?;
            let (cin, n) = (s[0][0], s[0][1]);
            let (cout, wcin) = (s[1][0], s[1][1]);
            if wcin != cin || v[2].len() != cout {
                return Err(mismatch(name, format!("input {:?}, weight {:?}, bias {:?}", s[0], s[1], s[2])));
            }
            let y = kernels::conv1d(v[1], v[2], v[0], cout, cin, n);
            (Op::Conv1d { cout, cin, n }, vec![cout, n], y)
        }
        Primitive::Conv3d { stride, padding } => {
            rank(name, "input", s[0], 4)?;
            rank(name, "weight", s[1], 5)?;
            let cin = s[0][0];
            let cout = s[1][0];
            if s[1][1] != cin || v[2].len() != cout {
                return Err(mismatch(name, format!("input {:?}, weight {:?}, bias {:?}", s[0], s[1], s[2])));
            }
            let g =
                Conv3dGeom::new(cin, cout, [s[0][1], s[0][2], s[0][3]], [s[1][2], s[1][3], s[1][4]], *stride, *padding)
                    .ok_or_else(|| mismatch(name, format!("kernel {:?} does not fit input {:?}", s[1], s[0])))?;
            let y = kernels::conv3d(&g, v[0], v[1], v[2]);
            let shape = vec![cout, g.output[0], g.output[1], g.output[2]];
            (Op::Conv3d(g), shape, y)
        }
        Primitive::Relu => (Op::Relu, s[0].to_vec(), v[0].iter().map(|x| x.max(S::zero())).collect()),
        Primitive::Sigmoid => (Op::Sigmoid, s[0].to_vec(), v[0].iter().map(|x| sigmoid(*x)).collect()),
        Primitive::Tanh => (Op::Tanh, s[0].to_vec(), v[0].iter().map(|x| x.tanh()).collect()),
        Primitive::Exp => (Op::Exp, s[0].to_vec(), v[0].iter().map(|x| x.exp()).collect()),
        Primitive::Concat { axis } => {
            let axis = *axis;
            let first = s[0];
            if axis >= first.len() {
                return Err(mismatch(name, format!("axis {axis} out of range for {first:?}")));
            }
            let mut total = 0;
            for sh in s {
                let ok = sh.len() == first.len()
                    && sh.iter().zip(first.iter()).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !ok {
                    return Err(mismatch(name, format!("{sh:?} incompatible with {first:?} on axis {axis}")));
                }
                total += sh[axis];
            }
            let outer: usize = first[..axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let chunks: Vec<usize> = s.iter().map(|sh| sh[axis] * inner).collect();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (val, &c) in v.iter().zip(&chunks) {
                    out.extend_from_slice(&val[o * c..(o + 1) * c]);
                }
            }
            let mut shape = first.to_vec();
            shape[axis] = total;
            (Op::Concat { outer, chunks }, shape, out)
        }
        Primitive::Reshape(shape) => {
            let n: Option<usize> = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if shape.is_empty() || shape.contains(&0) || n != Some(v[0].len()) {
                return Err(mismatch(name, format!("cannot view {:?} as {shape:?}", s[0])));
            }
            (Op::Reshape, shape.clone(), v[0].to_vec())
        }
        Primitive::Transpose => {
            rank(name, "input", s[0], 2)?;
            let (rows, cols) = (s[0][0], s[0][1]);
            let mut out = vec![S::zero(); rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = v[0][r * cols + c];
                }
            }
            (Op::Transpose { rows, cols }, vec![cols, rows], out)
        }
        Primitive::MaxReduce { axis } => {
            let (outer, len, inner, shape) = split_axis(name, s[0], *axis)?;
            let mut out = vec![S::zero(); outer * inner];
            let mut argmax = vec![0usize; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let (mut best, mut at) = (S::neg_infinity(), o * len * inner + i);
                    for a in 0..len {
                        let p = (o * len + a) * inner + i;
                        let x = v[0][p];
                        if x > best || x.is_nan() {
                            best = x;
                            at = p;
                        }
                    }
                    out[o * inner + i] = best;
                    argmax[o * inner + i] = at;
                }
            }
            (Op::MaxReduce { argmax }, shape, out)
        }
        Primitive::MeanReduce { axis } => match axis {
            None => {
                let n = v[0].len();
                (Op::MeanReduce { outer: 1, len: n, inner: 1 }, scalar, vec![kernels::sum(v[0]) / S::from_count(n)])
            }
            Some(axis) => {
                let (outer, len, inner, shape) = split_axis(name, s[0], *axis)?;
                let ls = S::from_count(len);
                let mut out = vec![S::zero(); outer * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += v[0][base + i];
                        }
                    }
                }
                out.iter_mut().for_each(|x| *x /= ls);
                (Op::MeanReduce { outer, len, inner }, shape, out)
            }
        },
        Primitive::Mse => {
            same_shape(name, s[0], s[1])?;
            let d: Vec<S> = v[0].iter().zip(v[1]).map(|(a, b)| *a - *b).collect();
            let m = kernels::dot(&d, &d) / S::from_count(d.len());
            (Op::Mse, scalar, vec![m])
        }
        Primitive::Bce => {
            same_shape(name, s[0], s[1])?;
            let (lo, hi) = (S::from_f64_lossy(BCE_CLAMP), S::one() - S::from_f64_lossy(BCE_CLAMP));
            let mut acc = Vec::with_capacity(v[0].len());
            for (i, (&p, &t)) in v[0].iter().zip(v[1]).enumerate() {
                if !(p >= S::zero() && p <= S::one()) {
                    return Err(GradError::Domain { op: name, detail: format!("prediction {p} at {i} outside [0,1]") });
                }
                if t != S::zero() && t != S::one() {
                    return Err(GradError::Domain { op: name, detail: format!("target {t} at {i} not in {{0,1}}") });
                }
                let pc = p.max(lo).min(hi);
                acc.push(-(t * pc.ln() + (S::one() - t) * (S::one() - pc).ln()));
            }
            let m = kernels::sum(&acc) / S::from_count(acc.len());
            (Op::Bce, scalar, vec![m])
        }
        Primitive::Reparameterize => {
            same_shape(name, s[0], s[1])?;
            same_shape(name, s[0], s[2])?;
            let half = S::from_f64_lossy(0.5);
            let out = (0..v[0].len()).map(|i| v[0][i] + (half * v[1][i]).exp() * v[2][i]).collect();
            (Op::Reparameterize, s[0].to_vec(), out)
        }
        Primitive::KlStdNormal => {
            same_shape(name, s[0], s[1])?;
            let terms: Vec<S> = v[0].iter().zip(v[1]).map(|(&m, &lv)| S::one() + lv - m * m - lv.exp()).collect();
            let kl = -S::from_f64_lossy(0.5) * kernels::sum(&terms);
            (Op::KlStdNormal, scalar, vec![kl])
        }
        Primitive::Chamfer => {
            rank(name, "lhs", s[0], 2)?;
            rank(name, "rhs", s[1], 2)?;
            let dim = s[0][1];
            if s[1][1] != dim {
                return Err(mismatch(name, format!("{:?} vs {:?}", s[0], s[1])));
            }
            let (ab, dab) = if dim == 3 { kernels::nearest3(v[0], v[1]) } else { kernels::nearest(v[0], v[1], dim) };
            let (ba, dba) = if dim == 3 { kernels::nearest3(v[1], v[0]) } else { kernels::nearest(v[1], v[0], dim) };
            let c = kernels::sum(&dab) / S::from_count(dab.len()) + kernels::sum(&dba) / S::from_count(dba.len());
            (Op::Chamfer { dim, ab, ba }, scalar, vec![c])
        }
    })
}

fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize, Vec<usize>), GradError> {
    if axis >= shape.len() {
        return Err(mismatch(op, format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    let mut out: Vec<usize> = shape.iter().enumerate().filter(|&(d, _)| d != axis).map(|(_, &n)| n).collect();
    if out.is_empty() {
        out.push(1);
    }
    Ok((outer, shape[axis], inner, out))
}

fn backward_op<S: Scalar>(op: &Op, v: &[&[S]], out: &[S], g: &[S], need: &[bool]) -> Vec<Option<Vec<S>>> {
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    let elementwise = |f: &dyn Fn(usize) -> S| Some((0..g.len()).map(f).collect::<Vec<S>>());
    match op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
        Op::Sub => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.iter().map(|x| -*x).collect())],
        Op::Mul => vec![
            if want(0) { elementwise(&|i| g[i] * v[1][i]) } else { None },
            if want(1) { elementwise(&|i| g[i] * v[0][i]) } else { None },
        ],
        Op::Scale(c) => {
            let cs = S::from_f64_lossy(*c);
            vec![Some(g.iter().map(|x| *x * cs).collect())]
        }
        Op::MatMul { m, k, n } => vec![
            want(0).then(|| kernels::matmul_grad_a(g, v[1], *m, *k, *n)),
            want(1).then(|| kernels::matmul_grad_b(g, v[0], *m, *k, *n)),
        ],
        Op::AddRow { rows, cols } => {
            let row = want(1).then(|| {
                let mut r = vec![S::zero(); *cols];
                for chunk in g.chunks_exact(*cols).take(*rows) {
                    r.iter_mut().zip(chunk).for_each(|(a, b)| *a += *b);
                }
                r
            });
            vec![want(0).then(|| g.to_vec()), row]
        }
        Op::Conv1d { cout, cin, n } => vec![
            want(0).then(|| kernels::conv1d_grad_x(v[1], g, *cout, *cin, *n)),
            want(1).then(|| kernels::conv1d_grad_w(v[0], g, *cout, *cin, *n)),
            want(2).then(|| kernels::row_sums(g, *cout, *n)),
        ],
        Op::Conv3d(geom) => {
            let ol: usize = geom.output.iter().product();
            vec![
                want(0).then(|| kernels::conv3d_grad_x(geom, v[1], g)),
                want(1).then(|| kernels::conv3d_grad_w(geom, v[0], g)),
                want(2).then(|| kernels::row_sums(g, geom.cout, ol)),
            ]
        }
        Op::Relu => vec![elementwise(&|i| if v[0][i] > S::zero() { g[i] } else { S::zero() })],
        Op::Sigmoid => vec![elementwise(&|i| g[i] * out[i] * (S::one() - out[i]))],
        Op::Tanh => vec![elementwise(&|i| g[i] * (S::one() - out[i] * out[i]))],
        Op::Exp => vec![elementwise(&|i| g[i] * out[i])],
        Op::Concat { outer, chunks } => {
            let total: usize = chunks.iter().sum();
            let mut offset = 0;
            let mut res = Vec::with_capacity(chunks.len());
            for (p, &c) in chunks.iter().enumerate() {
                if want(p) {
                    let mut part = Vec::with_capacity(outer * c);
                    for o in 0..*outer {
                        let base = o * total + offset;
                        part.extend_from_slice(&g[base..base + c]);
                    }
                    res.push(Some(part));
                } else {
                    res.push(None);
                }
                offset += c;
            }
            res
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Transpose { rows, cols } => {
            let mut d = vec![S::zero(); rows * cols];
            for r in 0..*rows {
                for c in 0..*cols {
                    d[r * cols + c] = g[c * rows + r];
                }
            }
            vec![Some(d)]
        }
        Op::MaxReduce { argmax } => {
            let mut d = vec![S::zero(); v[0].len()];
            for (gi, &at) in g.iter().zip(argmax) {
                d[at] += *gi;
            }
            vec![Some(d)]
        }
        Op::MeanReduce { outer, len, inner } => {
            let ls = S::from_count(*len);
            let mut d = vec![S::zero(); v[0].len()];
            for o in 0..*outer {
                for a in 0..*len {
                    let base = (o * len + a) * inner;
                    for i in 0..*inner {
                        d[base + i] = g[o * inner + i] / ls;
                    }
                }
            }
            vec![Some(d)]
        }
        Op::Mse => {
            let k = S::from_f64_lossy(2.0) * g[0] / S::from_count(v[0].len());
            let da: Vec<S> = v[0].iter().zip(v[1]).map(|(a, b)| k * (*a - *b)).collect();
            let db = want(1).then(|| da.iter().map(|x| -*x).collect());
            vec![want(0).then_some(da), db]
        }
        Op::Bce => {
            let (lo, hi) = (S::from_f64_lossy(BCE_CLAMP), S::one() - S::from_f64_lossy(BCE_CLAMP));
            let k = g[0] / S::from_count(v[0].len());
            let dp = want(0).then(|| {
                v[0].iter()
                    .zip(v[1])
                    .map(|(&p, &t)| if p < lo || p > hi { S::zero() } else { k * (p - t) / (p * (S::one() - p)) })
                    .collect()
            });
            let dt = want(1).then(|| {
                v[0].iter()
                    .map(|&p| {
                        let pc = p.max(lo).min(hi);
                        k * ((S::one() - pc).ln() - pc.ln())
                    })
                    .collect()
            });
            vec![dp, dt]
        }
        Op::Reparameterize => {
            let half = S::from_f64_lossy(0.5);
            let sd: Vec<S> = v[1].iter().map(|lv| (half * *lv).exp()).collect();
            vec![
                want(0).then(|| g.to_vec()),
                if want(1) { elementwise(&|i| g[i] * half * sd[i] * v[2][i]) } else { None },
                if want(2) { elementwise(&|i| g[i] * sd[i]) } else { None },
            ]
        }
        Op::KlStdNormal => {
            let half = S::from_f64_lossy(0.5);
            vec![
                want(0).then(|| v[0].iter().map(|m| g[0] * *m).collect()),
                want(1).then(|| v[1].iter().map(|lv| g[0] * half * (lv.exp() - S::one())).collect()),
            ]
        }
        Op::Chamfer { dim, ab, ba } => {
            let dim = *dim;
            let (a, b) = (v[0], v[1]);
            let ka = S::from_f64_lossy(2.0) * g[0] / S::from_count(ab.len());
            let kb = S::from_f64_lossy(2.0) * g[0] / S::from_count(ba.len());
            let mut da = vec![S::zero(); a.len()];
            let mut db = vec![S::zero(); b.len()];
            for (i, &j) in ab.iter().enumerate() {
                for t in 0..dim {
                    let e = ka * (a[i * dim + t] - b[j * dim + t]);
                    da[i * dim + t] += e;
                    db[j * dim + t] -= e;
                }
            }
            for (j, &i) in ba.iter().enumerate() {
                for t in 0..dim {
                    let e = kb * (b[j * dim + t] - a[i * dim + t]);
                    db[j * dim + t] += e;
                    da[i * dim + t] -= e;
                }
            }
            vec![want(0).then_some(da), want(1).then_some(db)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn relu_clips_negatives() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], vec![-1.0, 0.0, 2.5]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2, 2], vec![0.3, -1.0, 7.0, 2.0]));
        let l = g.mse(x, x).unwrap();
        assert_eq!(g.value(l), &[0.0]);
    }

    #[test]
    fn conv1d_identity_weights() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let x = g.leaf(&t(&[3, 4], data.clone()));
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = g.leaf(&t(&[3, 3], eye));
        let b = g.leaf(&Tensor::zeros(&[3]));
        let y = g.conv1d(x, w, b).unwrap();
        assert_eq!(g.shape(y), &[3, 4]);
        assert_eq!(g.value(y), data.as_slice());
    }

    #[test]
    fn kl_of_standard_normal_is_zero() {
        let mut g = Graph::new();
        let mu = g.leaf(&Tensor::<f64>::zeros(&[5]));
        let lv = g.leaf(&Tensor::<f64>::zeros(&[5]));
        let kl = g.kl_std_normal(mu, lv).unwrap();
        assert_eq!(g.value(kl), &[0.0]);
    }

    #[test]
    fn conv3d_all_ones_sums_kernel() {
        // direct summation: 27 products of 1 * 1
        let expected: f64 = (0..27).map(|_| 1.0 * 1.0).sum();
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 3, 3, 3], vec![1.0; 27]));
        let w = g.leaf(&t(&[1, 1, 3, 3, 3], vec![1.0; 27]));
        let b = g.leaf(&Tensor::zeros(&[1]));
        let y = g.conv3d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y), &[expected]);
        assert_eq!(expected, 27.0);
    }

    #[test]
    fn mse_gradient_matches_hand_derivative() {
        let mut g = Graph::new();
        let w = g.leaf(&t(&[1], vec![2.0]).with_grad());
        let target = g.leaf(&t(&[1], vec![0.0]));
        let l = g.mse(w, target).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[4.0]);
        assert!(grads.get(target).is_none());
    }

    #[test]
    fn disconnected_parameter_gets_zero_grad() {
        let mut g = Graph::new();
        let w = g.leaf(&t(&[1], vec![2.0]).with_grad());
        let p = g.leaf(&t(&[3], vec![1.0, 2.0, 3.0]).with_grad());
        let l = g.mse(w, w).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_accumulates_over_fan_out() {
        // L = mean(x * x) over one element, dL/dx = 2x
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1], vec![3.0]).with_grad());
        let y = g.mul(x, x).unwrap();
        let l = g.mean(y, None).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_nodes() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[2], vec![1.0, 2.0]).with_grad());
        assert!(matches!(g.backward(x), Err(GradError::NotScalar(_))));
        let mut other = Graph::<f64>::new();
        let y = other.leaf(&t(&[1], vec![1.0]));
        assert!(matches!(g.backward(y), Err(GradError::Detached(_))));
        assert!(matches!(g.relu(y), Err(GradError::Detached(_))));
    }

    #[test]
    fn shape_rules_are_enforced() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&Tensor::zeros(&[2, 3]));
        let b = g.leaf(&Tensor::zeros(&[2, 3]));
        let c = g.leaf(&Tensor::zeros(&[4]));
        assert!(g.matmul(a, b).is_err());
        assert!(g.add(a, c).is_err());
        assert!(g.reshape(a, &[4, 2]).is_err());
        assert!(g.max_reduce(a, 2).is_err());
        assert!(g.concat(&[a, c], 0).is_err());
        assert!(g.apply(Primitive::Relu, &[a, b]).is_err());
    }

    #[test]
    fn bce_rejects_out_of_domain_inputs() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(&t(&[2], vec![0.5, 1.5]));
        let q = g.leaf(&t(&[2], vec![0.5, 0.5]));
        let target = g.leaf(&t(&[2], vec![0.0, 1.0]));
        let soft = g.leaf(&t(&[2], vec![0.0, 0.3]));
        assert!(matches!(g.bce(p, target), Err(GradError::Domain { .. })));
        assert!(matches!(g.bce(q, soft), Err(GradError::Domain { .. })));
    }

    #[test]
    fn bce_clamps_saturated_predictions() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(&t(&[2], vec![0.0, 1.0]));
        let target = g.leaf(&t(&[2], vec![1.0, 0.0]));
        let l = g.bce(p, target).unwrap();
        let v = g.value(l)[0];
        assert!(v.is_finite());
        assert!((v - -(BCE_CLAMP.ln())).abs() < 1e-6);
    }

    #[test]
    fn max_reduce_routes_gradient_to_argmax_only() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2, 3], vec![1.0, 5.0, 2.0, 7.0, 0.0, 3.0]).with_grad());
        let m = g.max_reduce(x, 1).unwrap();
        assert_eq!(g.value(m), &[5.0, 7.0]);
        let s = g.mean(m, None).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.5, 0.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn concat_middle_axis() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[2, 1], vec![1.0, 2.0]));
        let b = g.leaf(&t(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3]);
        assert_eq!(g.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn chamfer_hand_value() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[1, 3], vec![0.0, 0.0, 0.0]));
        let b = g.leaf(&t(&[1, 3], vec![1.0, 0.0, 0.0]));
        let c = g.chamfer(a, b).unwrap();
        assert_eq!(g.value(c), &[2.0]);
        let z = g.chamfer(a, a).unwrap();
        assert_eq!(g.value(z), &[0.0]);
    }
}
