//! Define-by-run computation record and reverse-mode sweep.
//!
//! A [`Graph`] is an append-only list of nodes. Every op appends its output
//! after its inputs, so the reverse sweep is a single backwards pass over the
//! node list. Nodes whose inputs carry no gradient are stored as constants.

use std::cell::RefCell;
use std::rc::Rc;

use super::conv::{self, ConvGeom};
use super::value::numel;
use super::{Scalar, Tensor, TensorError};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Square,
    Sqrt,
    Abs,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Transpose(NodeId),
    /// `bcast`: rhs is rank-1 and repeats over the leading axes of lhs.
    Binary { kind: BinaryKind, a: NodeId, b: NodeId, bcast: bool },
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Unary(UnaryKind, NodeId),
    Powi(NodeId, i32),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    Reshape(NodeId),
    Slice { input: NodeId, axis: usize, start: usize },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Conv2d { input: NodeId, weight: NodeId, bias: Option<NodeId>, geom: ConvGeom },
    ConvTranspose2d { input: NodeId, weight: NodeId, bias: Option<NodeId>, geom: ConvGeom },
    BceWithLogits { logits: NodeId, target: NodeId },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Binary { a, b, .. } => vec![*a, *b],
            Op::BceWithLogits { logits, target } => vec![*logits, *target],
            Op::Transpose(x)
            | Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::Unary(_, x)
            | Op::Powi(x, _)
            | Op::Clamp(x, _, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumRows(x)
            | Op::Reshape(x)
            | Op::Slice { input: x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv2d { input, weight, bias, .. } | Op::ConvTranspose2d { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Unary(k, _) => match k {
                UnaryKind::Relu => "relu",
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Tanh => "tanh",
                UnaryKind::Exp => "exp",
                UnaryKind::Log => "log",
                UnaryKind::Square => "square",
                UnaryKind::Sqrt => "sqrt",
                UnaryKind::Abs => "abs",
            },
            Op::Powi(..) => "powi",
            Op::Clamp(..) => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation record. Rebuilt for every forward pass.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: NodeId,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (parameter or probe point).
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn id(&self) -> usize {
        self as *const Self as usize
    }

    /// Records `value` as the output of `op`. The op is only kept when some
    /// input needs a gradient; otherwise the node is a constant.
    pub(crate) fn push(&self, value: Tensor<T>, op: Op) -> Result<Var<'_, T>, TensorError> {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|&i| self.requires_grad(i));
        if cfg!(debug_assertions) && !value.all_finite() {
            let nodes = self.nodes.borrow();
            if inputs.iter().all(|&i| nodes[i].value.all_finite()) {
                return Err(TensorError::NonFinite { op: op.name() });
            }
        }
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Ok(Var { graph: self, id: nodes.len() - 1 })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        if loss.graph.id() != self.id() {
            return Err(TensorError::ForeignVar);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar { shape: root.value.shape().to_vec() });
        }
        if !root.requires_grad {
            return Err(TensorError::DetachedLoss);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, dg) in local_grads(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(dg.shape(), nodes[input].value.shape(), "{} grad shape", node.op.name());
                match &mut grads[input] {
                    Some(acc) => acc.data_mut().iter_mut().zip(dg.data()).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { graph: self.id(), grads, shapes })
    }
}

/// Gradients of a scalar with respect to the leaves of one graph.
pub struct Gradients<T> {
    graph: usize,
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf; zeros when the leaf did not influence the loss.
    pub fn get(&self, var: Var<'_, T>) -> Result<Tensor<T>, TensorError> {
        if var.graph.id() != self.graph {
            return Err(TensorError::ForeignVar);
        }
        Ok(match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[var.id].clone()),
        })
    }
}

fn tensor<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape.to_vec(), data).expect("gradient shape")
}

/// Vector-Jacobian products of one node with respect to each of its inputs.
fn local_grads<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Vec<(NodeId, Tensor<T>)> {
    let val = |id: NodeId| nodes[id].value.as_ref();
    let out = node.value.as_ref();
    let gd = g.data();
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(*a), val(*b));
            let mut res = Vec::new();
            if nodes[*a].requires_grad {
                let da = if !ta { matmul_raw(g, false, bv, !tb) } else { matmul_raw(bv, *tb, g, true) };
                res.push((*a, tensor(av.shape(), da)));
            }
            if nodes[*b].requires_grad {
                let db = if !tb { matmul_raw(av, !ta, g, false) } else { matmul_raw(g, true, av, *ta) };
                res.push((*b, tensor(bv.shape(), db)));
            }
            res
        }
        Op::Transpose(x) => vec![(*x, transpose2(g))],
        Op::Binary { kind, a, b, bcast } => {
            let (av, bv) = (val(*a), val(*b));
            let n = bv.numel();
            let bat = |i: usize| if *bcast { bv.data()[i % n.max(1)] } else { bv.data()[i] };
            let mut res = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                let da: Vec<T> = match kind {
                    BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
                    BinaryKind::Mul => gd.iter().enumerate().map(|(i, &x)| x * bat(i)).collect(),
                    BinaryKind::Div => gd.iter().enumerate().map(|(i, &x)| x / bat(i)).collect(),
                };
                res.push((*a, tensor(av.shape(), da)));
            }
            if nodes[*b].requires_grad {
                let db_full: Vec<T> = match kind {
                    BinaryKind::Add => gd.to_vec(),
                    BinaryKind::Sub => gd.iter().map(|&x| -x).collect(),
                    BinaryKind::Mul => gd.iter().zip(av.data()).map(|(&x, &a)| x * a).collect(),
                    BinaryKind::Div => gd
                        .iter()
                        .zip(av.data())
                        .enumerate()
                        .map(|(i, (&x, &a))| {
                            let bi = bat(i);
                            -x * a / (bi * bi)
                        })
                        .collect(),
                };
                let db = if *bcast { fold_rows(&db_full, n) } else { db_full };
                res.push((*b, tensor(bv.shape(), db)));
            }
            res
        }
        Op::AddScalar(x) => vec![(*x, g.clone())],
        Op::MulScalar(x, c) => {
            let c = T::lit(*c);
            vec![(*x, g.map(|v| v * c))]
        }
        Op::Unary(kind, x) => {
            let xv = val(*x).data();
            let y = out.data();
            let d: Vec<T> = (0..gd.len())
                .map(|i| {
                    let local = match kind {
                        UnaryKind::Relu => {
                            if xv[i] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Sigmoid => y[i] * (T::one() - y[i]),
                        UnaryKind::Tanh => T::one() - y[i] * y[i],
                        UnaryKind::Exp => y[i],
                        UnaryKind::Log => T::one() / xv[i],
                        UnaryKind::Square => T::lit(2.0) * xv[i],
                        UnaryKind::Sqrt => T::lit(0.5) / y[i],
                        UnaryKind::Abs => {
                            if xv[i] > T::zero() {
                                T::one()
                            } else if xv[i] < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        }
                    };
                    gd[i] * local
                })
                .collect();
            vec![(*x, tensor(out.shape(), d))]
        }
        Op::Powi(x, k) => {
            let xv = val(*x).data();
            let kf = T::lit(*k as f64);
            let d = gd.iter().zip(xv).map(|(&gi, &xi)| gi * kf * xi.powi(k - 1)).collect();
            vec![(*x, tensor(out.shape(), d))]
        }
        Op::Clamp(x, lo, hi) => {
            let (lo, hi) = (T::lit(*lo), T::lit(*hi));
            let xv = val(*x).data();
            let d = gd
                .iter()
                .zip(xv)
                .map(|(&gi, &xi)| if xi >= lo && xi <= hi { gi } else { T::zero() })
                .collect();
            vec![(*x, tensor(out.shape(), d))]
        }
        Op::Sum(x) => {
            let xv = val(*x);
            vec![(*x, Tensor::full(xv.shape().to_vec(), gd[0]))]
        }
        Op::Mean(x) => {
            let xv = val(*x);
            let scale = gd[0] / T::lit(xv.numel().max(1) as f64);
            vec![(*x, Tensor::full(xv.shape().to_vec(), scale))]
        }
        Op::SumRows(x) => {
            let xv = val(*x);
            let inner = gd.len();
            let d = (0..xv.numel()).map(|i| gd[i % inner.max(1)]).collect();
            vec![(*x, tensor(xv.shape(), d))]
        }
        Op::Reshape(x) => vec![(*x, tensor(val(*x).shape(), gd.to_vec()))],
        Op::Slice { input, axis, start } => {
            let xv = val(*input);
            let mut d = vec![T::zero(); xv.numel()];
            let (outer, inner) = split_axis(xv.shape(), *axis);
            let full = xv.shape()[*axis];
            let len = g.shape()[*axis];
            for o in 0..outer {
                let src = &gd[o * len * inner..(o + 1) * len * inner];
                let dst_off = (o * full + start) * inner;
                d[dst_off..dst_off + len * inner].copy_from_slice(src);
            }
            vec![(*input, tensor(xv.shape(), d))]
        }
        Op::Concat { inputs, axis } => {
            let (outer, inner) = split_axis(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut res = Vec::with_capacity(inputs.len());
            let mut offset = 0;
            for &id in inputs {
                let xv = val(id);
                let len = xv.shape()[*axis];
                let mut d = Vec::with_capacity(xv.numel());
                for o in 0..outer {
                    let s = (o * total + offset) * inner;
                    d.extend_from_slice(&gd[s..s + len * inner]);
                }
                offset += len;
                res.push((id, tensor(xv.shape(), d)));
            }
            res
        }
        Op::Conv2d { input, weight, bias, geom } => {
            let (xv, wv) = (val(*input), val(*weight));
            let (dx, dw, db) = conv::conv2d_backward(geom, xv.data(), wv.data(), gd, nodes[*input].requires_grad);
            let mut res = vec![(*input, tensor(xv.shape(), dx)), (*weight, tensor(wv.shape(), dw))];
            if let Some(b) = bias {
                res.push((*b, tensor(val(*b).shape(), db)));
            }
            res
        }
        Op::ConvTranspose2d { input, weight, bias, geom } => {
            let (xv, wv) = (val(*input), val(*weight));
            let (dx, dw, db) = conv::conv_transpose2d_backward(geom, xv.data(), wv.data(), gd);
            let mut res = vec![(*input, tensor(xv.shape(), dx)), (*weight, tensor(wv.shape(), dw))];
            if let Some(b) = bias {
                res.push((*b, tensor(val(*b).shape(), db)));
            }
            res
        }
        Op::BceWithLogits { logits, target } => {
            let (lv, tv) = (val(*logits), val(*target));
            let dl = gd
                .iter()
                .zip(lv.data().iter().zip(tv.data()))
                .map(|(&gi, (&l, &t))| gi * (sigmoid(l) - t))
                .collect();
            let dt = gd.iter().zip(lv.data()).map(|(&gi, &l)| -gi * l).collect();
            vec![(*logits, tensor(lv.shape(), dl)), (*target, tensor(tv.shape(), dt))]
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// (product of extents before `axis`, product of extents after `axis`).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

/// Sums a row-major buffer over its leading rows, leaving `n` columns.
fn fold_rows<T: Scalar>(data: &[T], n: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); n];
    if n == 0 {
        return acc;
    }
    for row in data.chunks(n) {
        acc.iter_mut().zip(row).for_each(|(a, &x)| *a = *a + x);
    }
    acc
}

fn transpose2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut d = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            d[j * r + i] = x.data()[i * c + j];
        }
    }
    tensor(&[c, r], d)
}

/// `op(a) · op(b)` for rank-2 tensors, `op` being an optional transpose.
pub(crate) fn matmul_raw<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Vec<T> {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let a_strides = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let b_strides = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a.data(), a_strides, b.data(), b_strides, T::zero(), &mut c, (n as isize, 1));
    c
}

pub(crate) fn same_graph<T>(a: &Graph<T>, b: &Graph<T>) -> bool {
    std::ptr::eq(a, b)
}
