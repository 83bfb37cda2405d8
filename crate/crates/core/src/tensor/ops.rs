//! Forward primitives on [`Var`].

use std::rc::Rc;

use super::conv::{self, ConvGeom};
use super::graph::{matmul_raw, same_graph, sigmoid, split_axis, BinaryKind, Op, UnaryKind};
use super::value::numel;
use super::{Graph, Scalar, Tensor, TensorError, Var};

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Value of a one-element tensor as `f64`.
    pub fn item(&self) -> Result<f64, TensorError> {
        self.value().item().map(Scalar::f64)
    }

    fn check(&self, other: &Var<'g, T>) -> Result<(), TensorError> {
        if same_graph(self.graph, other.graph) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    fn unary(&self, kind: UnaryKind, f: impl Fn(T) -> T) -> Result<Self, TensorError> {
        let out = self.value().map(f);
        self.graph.push(out, Op::Unary(kind, self.id))
    }

    fn binary(&self, other: &Var<'g, T>, kind: BinaryKind, f: impl Fn(T, T) -> T) -> Result<Self, TensorError> {
        self.check(other)?;
        let (a, b) = (self.value(), other.value());
        let bcast = if a.shape() == b.shape() {
            false
        } else if b.rank() == 1 && a.rank() >= 1 && a.shape().last() == Some(&b.shape()[0]) {
            true
        } else {
            let op = match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            };
            return Err(TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
        };
        let n = b.numel();
        let data = if bcast {
            a.data().iter().enumerate().map(|(i, &x)| f(x, b.data()[i % n])).collect()
        } else {
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.graph.push(out, Op::Binary { kind, a: self.id, b: other.id, bcast })
    }

    /// Elementwise sum. `other` may be rank-1 over the last axis (bias broadcast).
    pub fn add(&self, other: &Var<'g, T>) -> Result<Self, TensorError> {
        self.binary(other, BinaryKind::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Result<Self, TensorError> {
        self.binary(other, BinaryKind::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'g, T>) -> Result<Self, TensorError> {
        self.binary(other, BinaryKind::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'g, T>) -> Result<Self, TensorError> {
        self.binary(other, BinaryKind::Div, |a, b| a / b)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Self, TensorError> {
        let c_t = T::lit(c);
        let out = self.value().map(|x| x + c_t);
        self.graph.push(out, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Self, TensorError> {
        let c_t = T::lit(c);
        let out = self.value().map(|x| x * c_t);
        self.graph.push(out, Op::MulScalar(self.id, c))
    }

    pub fn neg(&self) -> Result<Self, TensorError> {
        self.mul_scalar(-1.0)
    }

    pub fn relu(&self) -> Result<Self, TensorError> {
        self.unary(UnaryKind::Relu, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Result<Self, TensorError> {
        self.unary(UnaryKind::Sigmoid, sigmoid)
    }

    pub fn tanh(&self) -> Result<Self, TensorError> {
        self.unary(UnaryKind::Tanh, |x| x.tanh())
    }

    pub fn exp(&self) -> Result<Self, TensorError> {
        self.unary(UnaryKind::Exp, |x| x.exp())
    }

    pub fn log(&self) -> Result<Self, TensorError> {
        self.unary(UnaryKind::Log, |x| x.ln())
    }

    pub fn square(&self) -> Result<Self, TensorError> {
        self.unary(UnaryKind::Square, |x| x * x)
    }

    pub fn sqrt(&self) -> Result<Self, TensorError> {
        self.unary(UnaryKind::Sqrt, |x| x.sqrt())
    }

    pub fn abs(&self) -> Result<Self, TensorError> {
        self.unary(UnaryKind::Abs, |x| x.abs())
    }

    pub fn powi(&self, k: i32) -> Result<Self, TensorError> {
        if k == 1 {
            return Ok(*self);
        }
        let out = self.value().map(|x| x.powi(k));
        self.graph.push(out, Op::Powi(self.id, k))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Self, TensorError> {
        if lo > hi {
            return Err(TensorError::InvalidAttr { op: "clamp", detail: format!("lo {lo} > hi {hi}") });
        }
        let (l, h) = (T::lit(lo), T::lit(hi));
        let out = self.value().map(|x| x.max(l).min(h));
        self.graph.push(out, Op::Clamp(self.id, lo, hi))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Self, TensorError> {
        let s = self.value().data().iter().copied().sum::<T>();
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&self) -> Result<Self, TensorError> {
        let v = self.value();
        if v.numel() == 0 {
            return Err(TensorError::InvalidShape { op: "mean", detail: "empty tensor".into() });
        }
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        self.graph.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Sum over the leading axis: `[n, rest..] -> [rest..]`.
    pub fn sum_rows(&self) -> Result<Self, TensorError> {
        let v = self.value();
        if v.rank() == 0 {
            return Err(TensorError::InvalidShape { op: "sum_rows", detail: "rank-0 input".into() });
        }
        let rest = v.shape()[1..].to_vec();
        let inner = numel(&rest);
        let mut acc = vec![T::zero(); inner];
        if inner > 0 {
            for row in v.data().chunks(inner) {
                acc.iter_mut().zip(row).for_each(|(a, &x)| *a = *a + x);
            }
        }
        self.graph.push(Tensor::new(rest, acc)?, Op::SumRows(self.id))
    }

    /// Mean over the leading axis.
    pub fn mean_rows(&self) -> Result<Self, TensorError> {
        let rows = self.shape().first().copied().unwrap_or(0);
        if rows == 0 {
            return Err(TensorError::InvalidShape { op: "mean_rows", detail: "no rows".into() });
        }
        self.sum_rows()?.mul_scalar(1.0 / rows as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let v = self.value();
        if numel(shape) != v.numel() {
            return Err(TensorError::ShapeMismatch { op: "reshape", lhs: v.shape().to_vec(), rhs: shape.to_vec() });
        }
        let out = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        self.graph.push(out, Op::Reshape(self.id))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self, TensorError> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(TensorError::InvalidShape { op: "transpose", detail: format!("rank {}", v.rank()) });
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut d = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = v.data()[i * c + j];
            }
        }
        self.graph.push(Tensor::new(vec![c, r], d)?, Op::Transpose(self.id))
    }

    /// Matrix product of rank-2 tensors.
    pub fn matmul(&self, other: &Var<'g, T>) -> Result<Self, TensorError> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where `op` transposes when the flag is set.
    pub fn matmul_t(&self, other: &Var<'g, T>, ta: bool, tb: bool) -> Result<Self, TensorError> {
        self.check(other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
        }
        let (m, ka) = if ta { (a.shape()[1], a.shape()[0]) } else { (a.shape()[0], a.shape()[1]) };
        let (kb, n) = if tb { (b.shape()[1], b.shape()[0]) } else { (b.shape()[0], b.shape()[1]) };
        if ka != kb {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
        }
        let out = Tensor::new(vec![m, n], matmul_raw(&a, ta, &b, tb))?;
        self.graph.push(out, Op::MatMul { a: self.id, b: other.id, ta, tb })
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self, TensorError> {
        let v = self.value();
        if axis >= v.rank() || start + len > v.shape()[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                detail: format!("axis {axis} range {start}..{} of shape {:?}", start + len, v.shape()),
            });
        }
        let (outer, inner) = split_axis(v.shape(), axis);
        let full = v.shape()[axis];
        let mut d = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            d.extend_from_slice(&v.data()[s..s + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        self.graph.push(Tensor::new(shape, d)?, Op::Slice { input: self.id, axis, start })
    }

    /// Binary cross-entropy of `sigmoid(self)` against `target`, elementwise.
    ///
    /// Computed as `max(l, 0) - l·t + ln(1 + e^{-|l|})`. Differentiable in both arguments.
    pub fn bce_with_logits(&self, target: &Var<'g, T>) -> Result<Self, TensorError> {
        self.check(target)?;
        let (l, t) = (self.value(), target.value());
        if l.shape() != t.shape() {
            return Err(TensorError::ShapeMismatch { op: "bce_with_logits", lhs: l.shape().to_vec(), rhs: t.shape().to_vec() });
        }
        let d = l
            .data()
            .iter()
            .zip(t.data())
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p())
            .collect();
        self.graph.push(Tensor::new(l.shape().to_vec(), d)?, Op::BceWithLogits { logits: self.id, target: target.id })
    }

    /// 2-D convolution. `self`: N×C×H×W, `weight`: O×C×k×k, `bias`: O.
    pub fn conv2d(&self, weight: &Var<'g, T>, bias: Option<&Var<'g, T>>, stride: usize, padding: usize) -> Result<Self, TensorError> {
        self.check(weight)?;
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 4 || w.rank() != 4 || w.shape()[1] != x.shape()[1] || w.shape()[2] != w.shape()[3] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: x.shape().to_vec(), rhs: w.shape().to_vec() });
        }
        let k = w.shape()[2];
        let geom = ConvGeom {
            batch: x.shape()[0],
            image_c: x.shape()[1],
            image_h: x.shape()[2],
            image_w: x.shape()[3],
            grid_c: w.shape()[0],
            grid_h: conv::conv2d_out_extent(x.shape()[2], k, stride, padding)?,
            grid_w: conv::conv2d_out_extent(x.shape()[3], k, stride, padding)?,
            kernel: k,
            stride,
            padding,
        };
        let bias_val = match bias {
            Some(b) => {
                self.check(b)?;
                let bv = b.value();
                if bv.shape() != [geom.grid_c] {
                    return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: vec![geom.grid_c], rhs: bv.shape().to_vec() });
                }
                Some(bv)
            }
            None => None,
        };
        let out = conv::conv2d_forward(&geom, x.data(), w.data(), bias_val.as_ref().map(|b| b.data()));
        let shape = vec![geom.batch, geom.grid_c, geom.grid_h, geom.grid_w];
        self.graph.push(
            Tensor::new(shape, out)?,
            Op::Conv2d { input: self.id, weight: weight.id, bias: bias.map(|b| b.id), geom },
        )
    }

    /// Transposed 2-D convolution. `self`: N×Cin×H×W, `weight`: Cin×Cout×k×k, `bias`: Cout.
    pub fn conv_transpose2d(
        &self,
        weight: &Var<'g, T>,
        bias: Option<&Var<'g, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        self.check(weight)?;
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 4 || w.rank() != 4 || w.shape()[0] != x.shape()[1] || w.shape()[2] != w.shape()[3] {
            return Err(TensorError::ShapeMismatch { op: "conv_transpose2d", lhs: x.shape().to_vec(), rhs: w.shape().to_vec() });
        }
        let k = w.shape()[2];
        let geom = ConvGeom {
            batch: x.shape()[0],
            image_c: w.shape()[1],
            image_h: conv::conv_transpose2d_out_extent(x.shape()[2], k, stride, padding)?,
            image_w: conv::conv_transpose2d_out_extent(x.shape()[3], k, stride, padding)?,
            grid_c: x.shape()[1],
            grid_h: x.shape()[2],
            grid_w: x.shape()[3],
            kernel: k,
            stride,
            padding,
        };
        let bias_val = match bias {
            Some(b) => {
                self.check(b)?;
                let bv = b.value();
                if bv.shape() != [geom.image_c] {
                    return Err(TensorError::ShapeMismatch { op: "conv_transpose2d", lhs: vec![geom.image_c], rhs: bv.shape().to_vec() });
                }
                Some(bv)
            }
            None => None,
        };
        let out = conv::conv_transpose2d_forward(&geom, x.data(), w.data(), bias_val.as_ref().map(|b| b.data()));
        let shape = vec![geom.batch, geom.image_c, geom.image_h, geom.image_w];
        self.graph.push(
            Tensor::new(shape, out)?,
            Op::ConvTranspose2d { input: self.id, weight: weight.id, bias: bias.map(|b| b.id), geom },
        )
    }
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat<'g, T: Scalar>(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>, TensorError> {
    let first = parts.first().ok_or_else(|| TensorError::InvalidShape { op: "concat", detail: "no inputs".into() })?;
    let values: Vec<_> = parts
        .iter()
        .map(|p| first.check(p).map(|_| p.value()))
        .collect::<Result<_, _>>()?;
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(TensorError::InvalidShape { op: "concat", detail: format!("axis {axis} of rank {}", base.len()) });
    }
    let mut total = 0;
    for v in &values {
        let s = v.shape();
        let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(TensorError::ShapeMismatch { op: "concat", lhs: base, rhs: s.to_vec() });
        }
        total += s[axis];
    }
    let (outer, inner) = split_axis(&base, axis);
    let mut d = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let len = v.shape()[axis] * inner;
            d.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    first.graph.push(
        Tensor::new(shape, d)?,
        Op::Concat { inputs: parts.iter().map(|p| p.id).collect(), axis },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = numel(shape);
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check<F>(f: F, point: Tensor<f64>)
    where
        F: for<'g> Fn(Var<'g, f64>) -> Result<Var<'g, f64>, TensorError>,
    {
        let report = grad_check(f, &point, 1e-5, 1e-4).unwrap();
        assert!(report.passed, "max rel error {}: {:?} vs {:?}", report.max_rel_error, report.analytic, report.numeric);
    }

    #[test]
    fn matmul_by_hand() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_f64([2, 1], &[1.0, 1.0]).unwrap());
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_dims() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        match a.matmul(&b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!((lhs, rhs), (vec![2, 3], vec![2, 3]));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(a.add(&g.constant(Tensor::zeros([3, 2]))), Err(TensorError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = x.sigmoid().unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
        let y = x.square().unwrap().sum().unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let unused = g.param(Tensor::ones([2, 2]));
        let y = x.sum().unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(unused).unwrap(), Tensor::zeros([2, 2]));
    }

    #[test]
    fn backward_rejects_bad_losses() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::ones([2]));
        assert!(matches!(g.backward(x.exp().unwrap()), Err(TensorError::NotScalar { .. })));
        let c = g.constant(Tensor::ones([2])).sum().unwrap();
        assert!(matches!(g.backward(c), Err(TensorError::DetachedLoss)));
        let other = Graph::<f64>::new();
        let y = other.param(Tensor::ones([1])).sum().unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::ForeignVar)));
        assert!(matches!(x.add(&other.param(Tensor::ones([2]))), Err(TensorError::ForeignVar)));
    }

    #[test]
    fn grad_of_linear_function_is_exact() {
        let report = grad_check(|x| x.sum(), &randn(&[4], 1), 1e-5, 0.0).unwrap();
        assert!(report.analytic.iter().all(|&a| a == 1.0));
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn grad_check_reports_non_finite_probes() {
        let x = Tensor::from_f64([1], &[0.0]).unwrap();
        let err = grad_check(|x| x.abs()?.log()?.sum(), &x, 1e-300, 1e-4);
        assert!(err.is_err());
    }

    #[test]
    fn matmul_relu_chain_matches_finite_differences() {
        let w1 = randn(&[4, 5], 2);
        let w2 = randn(&[5, 3], 3);
        check(
            move |x| {
                let g = x.graph();
                let h = x.matmul(&g.constant(w1.clone()))?.relu()?;
                h.matmul(&g.constant(w2.clone()))?.tanh()?.sum()
            },
            randn(&[6, 4], 4),
        );
    }

    #[test]
    fn transposed_matmul_gradients() {
        // op(lhs) is 3x4 and op(rhs) is 4x2 for every flag combination.
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let lhs_shape = if ta { [4, 3] } else { [3, 4] };
            let rhs_shape = if tb { [2, 4] } else { [4, 2] };
            let rhs = randn(&rhs_shape, 5);
            check(move |x| x.matmul_t(&x.graph().constant(rhs.clone()), ta, tb)?.square()?.sum(), randn(&lhs_shape, 6));
            let lhs = randn(&lhs_shape, 7);
            check(move |x| x.graph().constant(lhs.clone()).matmul_t(&x, ta, tb)?.square()?.sum(), randn(&rhs_shape, 8));
        }
    }

    #[test]
    fn elementwise_primitives_match_finite_differences() {
        let pos = randn(&[3, 4], 8).map(|v| v.abs() + 0.5);
        let any = randn(&[3, 4], 9);
        check(|x| x.relu()?.mul_scalar(1.5)?.sum(), any.map(|v| if v.abs() < 0.05 { 0.3 } else { v }));
        check(|x| x.sigmoid()?.sum(), any.clone());
        check(|x| x.tanh()?.sum(), any.clone());
        check(|x| x.exp()?.sum(), any.clone());
        check(|x| x.log()?.sum(), pos.clone());
        check(|x| x.sqrt()?.sum(), pos.clone());
        check(|x| x.square()?.mean(), any.clone());
        check(|x| x.abs()?.sum(), pos.clone());
        check(|x| x.powi(3)?.sum(), any.clone());
        check(|x| x.clamp(-0.5, 0.5)?.sum(), any.map(|v| if (v.abs() - 0.5).abs() < 0.05 { 0.1 } else { v }));
        check(|x| x.add_scalar(2.0)?.neg()?.square()?.sum(), any.clone());
    }

    #[test]
    fn binary_primitives_match_finite_differences() {
        let other = randn(&[3, 4], 10);
        let row = randn(&[4], 11).map(|v| v + 2.0);
        for kind in 0..4 {
            let o = other.map(|v| v + 3.0);
            check(
                move |x| {
                    let c = x.graph().constant(o.clone());
                    let y = match kind {
                        0 => x.add(&c)?,
                        1 => c.sub(&x)?,
                        2 => x.mul(&c)?,
                        _ => c.div(&x.add_scalar(3.0)?)?,
                    };
                    y.square()?.sum()
                },
                randn(&[3, 4], 12),
            );
            let m = other.clone();
            // gradient with respect to a broadcast row operand
            check(
                move |b| {
                    let c = b.graph().constant(m.clone());
                    let y = match kind {
                        0 => c.add(&b)?,
                        1 => c.sub(&b)?,
                        2 => c.mul(&b)?,
                        _ => c.div(&b)?,
                    };
                    y.square()?.sum()
                },
                row.clone(),
            );
        }
    }

    #[test]
    fn structural_primitives_match_finite_differences() {
        let w = randn(&[2, 3, 4], 13);
        check(
            move |x| {
                let a = x.slice(1, 1, 2)?;
                let b = x.slice(2, 0, 3)?.reshape(&[2, 9])?;
                let w = x.graph().constant(w.clone());
                let c = concat(&[x, w], 0)?.mul(&concat(&[w, x], 0)?)?;
                Ok(a.square()?.sum()?.add(&b.sum_rows()?.exp()?.sum()?)?.add(&c.sum()?)?)
            },
            randn(&[2, 3, 4], 14),
        );
        check(|x| x.transpose()?.mean_rows()?.square()?.sum(), randn(&[3, 5], 15));
    }

    #[test]
    fn bce_with_logits_matches_reference_and_gradients() {
        let g = Graph::<f64>::new();
        let l = g.constant(Tensor::from_f64([3], &[-2.0, 0.0, 10.0]).unwrap());
        let t = g.constant(Tensor::from_f64([3], &[0.25, 1.0, 0.0]).unwrap());
        let y = l.bce_with_logits(&t).unwrap().value();
        for ((&lv, &tv), &yv) in [-2.0f64, 0.0, 10.0].iter().zip(&[0.25, 1.0, 0.0]).zip(y.data()) {
            let p = 1.0 / (1.0 + (-lv).exp());
            let reference = -(tv * p.ln() + (1.0 - tv) * (1.0 - p).max(1e-300).ln());
            assert!((reference - yv).abs() < 1e-9, "{reference} vs {yv}");
        }
        let target = randn(&[2, 5], 16).map(|v| v.abs());
        let tt = target.clone();
        check(move |x| x.bce_with_logits(&x.graph().constant(tt.clone()))?.sum(), randn(&[2, 5], 17).map(|v| 3.0 * v));
        let logits = randn(&[2, 5], 18);
        check(move |t| x_bce(t, &logits), target);

        fn x_bce<'g>(t: Var<'g, f64>, logits: &Tensor<f64>) -> Result<Var<'g, f64>, TensorError> {
            t.graph().constant(logits.clone()).bce_with_logits(&t)?.sum()
        }
    }

    #[test]
    fn conv_primitives_match_finite_differences() {
        let w = randn(&[3, 2, 3, 3], 19);
        let b = randn(&[3], 20);
        let (w2, b2) = (w.clone(), b.clone());
        check(
            move |x| {
                let g = x.graph();
                x.conv2d(&g.constant(w2.clone()), Some(&g.constant(b2.clone())), 2, 1)?.square()?.sum()
            },
            randn(&[2, 2, 5, 5], 21),
        );
        let x = randn(&[2, 2, 5, 5], 22);
        let (x2, b2) = (x.clone(), b.clone());
        check(
            move |w| {
                let g = w.graph();
                g.constant(x2.clone()).conv2d(&w, Some(&g.constant(b2.clone())), 2, 1)?.square()?.sum()
            },
            w.clone(),
        );
        let x2 = x.clone();
        let w2 = w.clone();
        check(move |b| b.graph().constant(x2.clone()).conv2d(&b.graph().constant(w2.clone()), Some(&b), 1, 0)?.square()?.sum(), b);

        let wt = randn(&[2, 3, 4, 4], 23);
        let bt = randn(&[3], 24);
        let (wt2, bt2) = (wt.clone(), bt.clone());
        check(
            move |x| {
                let g = x.graph();
                x.conv_transpose2d(&g.constant(wt2.clone()), Some(&g.constant(bt2.clone())), 2, 1)?.square()?.sum()
            },
            randn(&[2, 2, 3, 3], 25),
        );
        let xt = randn(&[2, 2, 3, 3], 26);
        let (xt2, bt2) = (xt.clone(), bt.clone());
        check(
            move |w| {
                let g = w.graph();
                g.constant(xt2.clone()).conv_transpose2d(&w, Some(&g.constant(bt2.clone())), 2, 1)?.square()?.sum()
            },
            wt.clone(),
        );
        check(
            move |b| {
                let g = b.graph();
                g.constant(xt.clone()).conv_transpose2d(&g.constant(wt.clone()), Some(&b), 4, 0)?.square()?.sum()
            },
            bt,
        );
    }

    #[test]
    fn conv_extents_follow_the_size_rules() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 1, 33, 33]));
        let w = g.constant(Tensor::zeros([32, 1, 4, 4]));
        assert_eq!(x.conv2d(&w, None, 2, 1).unwrap().shape(), vec![1, 32, 16, 16]);
        let x = g.constant(Tensor::zeros([1, 32, 8, 8]));
        let w = g.constant(Tensor::zeros([32, 1, 5, 5]));
        assert_eq!(x.conv_transpose2d(&w, None, 4, 0).unwrap().shape(), vec![1, 1, 33, 33]);
        let tiny = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let w = g.constant(Tensor::zeros([1, 1, 5, 5]));
        assert!(matches!(tiny.conv2d(&w, None, 1, 0), Err(TensorError::NonPositiveExtent { .. })));
    }

    #[test]
    fn debug_mode_flags_non_finite_outputs() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64([1], &[-1.0]).unwrap());
        let r = x.log();
        if cfg!(debug_assertions) {
            assert!(matches!(r, Err(TensorError::NonFinite { op: "log" })));
        }
    }

    #[test]
    fn zero_extent_slices_are_allowed() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::ones([4, 3]));
        let empty = x.slice(1, 3, 0).unwrap();
        assert_eq!(empty.shape(), vec![4, 0]);
        let y = concat(&[x, empty], 1).unwrap().sum().unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap(), Tensor::ones([4, 3]));
    }

    proptest! {
        #[test]
        fn element_count_matches_shape(r in 1usize..5, c in 1usize..5, s in 0u64..1000) {
            let g = Graph::<f64>::new();
            let x = g.param(randn(&[r, c], s));
            let y = x.transpose().unwrap().reshape(&[c * r]).unwrap();
            let v = y.value();
            prop_assert_eq!(v.numel(), v.shape().iter().product::<usize>());
        }

        #[test]
        fn gradients_have_parameter_shapes(r in 1usize..5, c in 1usize..5, s in 0u64..1000) {
            let g = Graph::<f64>::new();
            let x = g.param(randn(&[r, c], s));
            let w = g.param(randn(&[c, 2], s + 1));
            let b = g.param(randn(&[2], s + 2));
            let y = x.matmul(&w).unwrap().add(&b).unwrap().sigmoid().unwrap().sum().unwrap();
            let grads = g.backward(y).unwrap();
            for p in [x, w, b] {
                prop_assert_eq!(grads.get(p).unwrap().shape().to_vec(), p.shape());
            }
        }

        #[test]
        fn sum_is_linear_in_gradient(v in proptest::collection::vec(-5.0f64..5.0, 1..20), k in -3.0f64..3.0) {
            let g = Graph::<f64>::new();
            let x = g.param(Tensor::new(vec![v.len()], v.clone()).unwrap());
            let y = x.mul_scalar(k).unwrap().sum().unwrap();
            let grad = g.backward(y).unwrap().get(x).unwrap();
            prop_assert!(grad.data().iter().all(|&d| (d - k).abs() < 1e-12));
        }
    }
}
