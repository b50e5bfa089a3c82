use std::ops::Deref;
use std::sync::Arc;

use crate::{Array, DiffError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Array),
    Shared(Arc<Array>),
}

impl Deref for Value {
    type Target = Array;

    fn deref(&self) -> &Array {
        match self {
            Value::Owned(a) => a,
            Value::Shared(a) => a,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    ExpExcess(Var),
    Log(Var),
    Softmax(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Square(Var),
    Scale(Var, f64),
    Offset(Var),
    Clamp { input: Var, lo: f64, hi: f64 },
    Reshape(Var),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations in evaluation order so that gradients can be
/// replayed in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Raw adjoint of `var`, or `None` when the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of `var` as an array shaped like the variable (zeros when the
    /// root does not depend on it).
    pub fn wrt(&self, var: Var) -> Array {
        let shape = self.shapes[var.0].clone();
        match self.get(var) {
            Some(g) => Array::from_parts(shape, g.to_vec()),
            None => Array::zeros(&shape),
        }
    }
}

/// How the smaller operand of an elementwise op maps onto the larger one.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    /// rhs repeats over leading dims of lhs
    Rhs,
    /// lhs repeats over leading dims of rhs
    Lhs,
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast, DiffError> {
    if a == b {
        Ok(Bcast::Same)
    } else if a.len() > b.len() && a.ends_with(b) {
        Ok(Bcast::Rhs)
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok(Bcast::Lhs)
    } else {
        Err(DiffError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() })
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Plain `a (m×k) · b (k×n)` product.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`; handles past that point become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, var: Var) -> &Array {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.value(var).data()[0]
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input sharing storage with a parameter set.
    pub fn shared_leaf(&mut self, value: Arc<Array>) -> Var {
        self.nodes.push(Node { value: Value::Shared(value), op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op: Op::Constant, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Shared-storage input that never receives a gradient.
    pub fn shared_constant(&mut self, value: Arc<Array>) -> Var {
        self.nodes.push(Node { value: Value::Shared(value), op: Op::Constant, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(name, va.shape(), vb.shape())?;
        let (shape, data) = match kind {
            Bcast::Same => (
                va.shape().to_vec(),
                va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>(),
            ),
            Bcast::Rhs => {
                let n = vb.len();
                let d = va.data().iter().enumerate().map(|(i, &x)| f(x, vb.data()[i % n])).collect();
                (va.shape().to_vec(), d)
            }
            Bcast::Lhs => {
                let n = va.len();
                let d = vb.data().iter().enumerate().map(|(i, &y)| f(va.data()[i % n], y)).collect();
                (vb.shape().to_vec(), d)
            }
        };
        let g = self.grad_of(&[a, b]);
        self.push(Array::from_parts(shape, data), op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Product of a 2-D `m×k` and a 2-D `k×n` array.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(va.data(), vb.data(), m, k, n);
        let g = self.grad_of(&[a, b]);
        self.push(Array::from_parts(vec![m, n], out), Op::MatMul(a, b), g)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, DiffError> {
        let out = self.value(a).map(f);
        let g = self.grad_of(&[a]);
        self.push(out, op, g)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// exp(x) - 1 - x elementwise, evaluated without cancellation so the
    /// result is never negative.
    pub fn exp_excess(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, |x| x.exp_m1() - x, Op::ExpExcess(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, DiffError> {
        self.unary(a, |v| v * factor, Op::Scale(a, factor))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, DiffError> {
        self.scale(a, -1.0)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, shift: f64) -> Result<Var, DiffError> {
        self.unary(a, |v| v + shift, Op::Offset(a))
    }

    /// Elementwise clamp; the gradient is passed through only strictly inside
    /// `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, DiffError> {
        self.unary(a, |v| v.clamp(lo, hi), Op::Clamp { input: a, lo, hi })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let va = self.value(a);
        let cols = *va.shape().last().expect("arrays have at least one axis");
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = va.shape().to_vec();
        let g = self.grad_of(&[a]);
        self.push(Array::from_parts(shape, out), Op::Softmax(a), g)
    }

    /// Joins arrays along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = inputs.first().ok_or(DiffError::EmptyConcat)?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(DiffError::InvalidAxis { op: "concat", axis, shape: base });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(DiffError::ShapeMismatch { op: "concat", lhs: base, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let val = self.value(*v);
                let chunk = val.shape()[axis] * inner;
                data.extend_from_slice(&val.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let g = self.grad_of(inputs);
        self.push(Array::from_parts(shape, data), Op::Concat { inputs: inputs.to_vec(), axis }, g)
    }

    /// Sub-range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, DiffError> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        if axis >= shape.len() {
            return Err(DiffError::InvalidAxis { op: "slice", axis, shape });
        }
        if start >= end || end > shape[axis] {
            return Err(DiffError::SliceRange { start, end, extent: shape[axis] });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let width = (end - start) * inner;
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * len * inner + start * inner;
            data.extend_from_slice(&va.data()[base..base + width]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let g = self.grad_of(&[a]);
        self.push(Array::from_parts(out_shape, data), Op::Slice { input: a, axis, start }, g)
    }

    /// Sum of all elements, as a one-element array.
    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let total = self.value(a).data().iter().sum();
        let g = self.grad_of(&[a]);
        self.push(Array::scalar(total), Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let va = self.value(a);
        let m = va.data().iter().sum::<f64>() / va.len() as f64;
        let g = self.grad_of(&[a]);
        self.push(Array::scalar(m), Op::Mean(a), g)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let out = self.value(a).reshape(shape)?;
        let g = self.grad_of(&[a]);
        self.push(out, Op::Reshape(a), g)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(DiffError::NonScalarRoot { shape: root_val.shape().to_vec() });
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        let slot = grads[var.0].get_or_insert_with(|| vec![0.0; self.nodes[var.0].value.len()]);
        contrib(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (la, lb) = (self.value(*a).len(), self.value(*b).len());
                self.accumulate(grads, *a, |s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % la] += gv;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % lb] += sign * gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (la, lb) = (va.len(), vb.len());
                self.accumulate(grads, *a, |s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % la] += gv * vb[i % lb];
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % lb] += gv * va[i % la];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                // dA = G · Bᵀ
                self.accumulate(grads, *a, |s| {
                    let bd = vb.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            s[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · G
                self.accumulate(grads, *b, |s| {
                    let ad = va.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, &gv) in s[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Tanh(a) => self.accumulate(grads, *a, |s| {
                for i in 0..g.len() {
                    s[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Sigmoid(a) => self.accumulate(grads, *a, |s| {
                for i in 0..g.len() {
                    s[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Exp(a) => self.accumulate(grads, *a, |s| {
                for i in 0..g.len() {
                    s[i] += g[i] * out[i];
                }
            }),
            Op::ExpExcess(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] * va[i].exp_m1();
                    }
                })
            }
            Op::Log(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] / va[i];
                    }
                })
            }
            Op::Square(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..g.len() {
                        s[i] += 2.0 * g[i] * va[i];
                    }
                })
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, |s| {
                for i in 0..g.len() {
                    s[i] += g[i] * f;
                }
            }),
            Op::Offset(a) | Op::Reshape(a) => self.accumulate(grads, *a, |s| {
                for i in 0..g.len() {
                    s[i] += g[i];
                }
            }),
            Op::Clamp { input, lo, hi } => {
                let va = self.value(*input).data();
                self.accumulate(grads, *input, |s| {
                    for i in 0..g.len() {
                        if va[i] > *lo && va[i] < *hi {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::Softmax(a) => {
                let cols = *node.value.shape().last().expect("non-empty shape");
                self.accumulate(grads, *a, |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for j in 0..cols {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                })
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    self.accumulate(grads, *v, |s| {
                        let chunk = len * inner;
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..][..chunk];
                            for (d, &x) in s[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input).to_vec();
                let (outer, len, inner) = split_axis(&in_shape, *axis);
                let width = node.value.shape()[*axis] * inner;
                self.accumulate(grads, *input, |s| {
                    for o in 0..outer {
                        let base = o * len * inner + start * inner;
                        for (d, &x) in s[base..base + width].iter_mut().zip(&g[o * width..(o + 1) * width]) {
                            *d += x;
                        }
                    }
                })
            }
            Op::Sum(a) => self.accumulate(grads, *a, |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|v| *v += g[0] / n))
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Constant => "constant",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::MatMul(..) => "matmul",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::Exp(_) => "exp",
        Op::ExpExcess(_) => "exp_excess",
        Op::Log(_) => "log",
        Op::Softmax(_) => "softmax",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::Square(_) => "square",
        Op::Scale(..) => "scale",
        Op::Offset(_) => "offset",
        Op::Clamp { .. } => "clamp",
        Op::Reshape(_) => "reshape",
    }
}
