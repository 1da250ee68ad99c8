//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns a
//! [`Gradients`] map. Constants enter the tape through [`Tape::constant`] and
//! never receive gradient, which is how teacher features and detached
//! weights are kept out of the backward pass.
//!
//! ```
//! use s2dc::autograd::Tape;
//! use s2dc::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).item(), 6.0);
//! ```

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{axis_split, matmul_nt, matmul_tn, Tensor};

/// Floor applied before every logarithm.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Softmax(usize, usize),
    LogSumExp(usize, usize),
    SumAll(usize),
    SumAxis(usize, usize),
    MaxAxis(usize, usize, Vec<usize>),
    NormalizeRows(usize, Vec<f64>),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    Element(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn owns(&self, v: Var<'_>) -> bool {
        std::ptr::eq(self, v.tape)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !self.owns(loss) {
            return Err(Error::Detached);
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[loss.id];
        if !out.value.is_scalar() {
            return Err(Error::NonScalarLoss(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(out.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let leaves = nodes
            .iter()
            .enumerate()
            .map(|(id, n)| {
                if matches!(n.op, Op::Leaf) && n.requires_grad {
                    Some(
                        grads[id]
                            .take()
                            .unwrap_or_else(|| Tensor::zeros(n.value.shape())),
                    )
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { leaves })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let y = &node.value;
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    let like = |i: usize, data: Vec<f64>| Tensor::new(nodes[i].value.shape().to_vec(), data).unwrap();

    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).cols();
            if wants(*a) {
                let ga = matmul_nt(g.data(), val(*b).data(), m, n, k);
                accumulate(grads, *a, like(*a, ga));
            }
            if wants(*b) {
                let gb = matmul_tn(val(*a).data(), g.data(), m, k, n);
                accumulate(grads, *b, like(*b, gb));
            }
        }
        Op::Transpose(a) => {
            if wants(*a) {
                accumulate(grads, *a, g.transpose().unwrap());
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if wants(*a) {
                accumulate(grads, *a, g.clone());
            }
            if wants(*b) {
                accumulate(grads, *b, g.map(|v| sign * v));
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                accumulate(grads, *a, g.zip_map(val(*b), |gv, bv| gv * bv));
            }
            if wants(*b) {
                accumulate(grads, *b, g.zip_map(val(*a), |gv, av| gv * av));
            }
        }
        Op::Div(a, b) => {
            if wants(*a) {
                accumulate(grads, *a, g.zip_map(val(*b), |gv, bv| gv / bv));
            }
            if wants(*b) {
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(val(*b).data())
                    .map(|((gv, yv), bv)| -gv * yv / bv)
                    .collect();
                accumulate(grads, *b, like(*b, gb));
            }
        }
        Op::AddRow(a, v) => {
            let (m, n) = (y.rows(), y.cols());
            if wants(*a) {
                accumulate(grads, *a, g.clone());
            }
            if wants(*v) {
                let mut gv = vec![0.0; n];
                for i in 0..m {
                    for (acc, x) in gv.iter_mut().zip(g.row(i)) {
                        *acc += x;
                    }
                }
                accumulate(grads, *v, like(*v, gv));
            }
        }
        Op::AddCol(a, v) => {
            let m = y.rows();
            if wants(*a) {
                accumulate(grads, *a, g.clone());
            }
            if wants(*v) {
                let gv = (0..m).map(|i| g.row(i).iter().sum()).collect();
                accumulate(grads, *v, like(*v, gv));
            }
        }
        Op::MulCol(a, v) => {
            let (m, n) = (y.rows(), y.cols());
            let av = val(*a);
            let vv = val(*v).data();
            if wants(*a) {
                let mut ga = g.clone();
                for i in 0..m {
                    for j in 0..n {
                        ga.data_mut()[i * n + j] *= vv[i];
                    }
                }
                accumulate(grads, *a, ga);
            }
            if wants(*v) {
                let gv = (0..m)
                    .map(|i| g.row(i).iter().zip(av.row(i)).map(|(x, z)| x * z).sum())
                    .collect();
                accumulate(grads, *v, like(*v, gv));
            }
        }
        Op::Scale(a, c) => {
            if wants(*a) {
                accumulate(grads, *a, g.map(|v| v * c));
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if wants(*a) {
                accumulate(grads, *a, like(*a, g.data().to_vec()));
            }
        }
        Op::Tanh(a) => {
            if wants(*a) {
                accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)));
            }
        }
        Op::Exp(a) => {
            if wants(*a) {
                accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * yv));
            }
        }
        Op::Ln(a) => {
            if wants(*a) {
                let ga = g.zip_map(val(*a), |gv, x| if x > LOG_EPS { gv / x } else { 0.0 });
                accumulate(grads, *a, ga);
            }
        }
        Op::Sqrt(a) => {
            if wants(*a) {
                let ga = g.zip_map(y, |gv, yv| if yv > 0.0 { gv / (2.0 * yv) } else { 0.0 });
                accumulate(grads, *a, ga);
            }
        }
        Op::Softmax(a, axis) => {
            if wants(*a) {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + r;
                        let dot: f64 = (0..len).map(|i| g.data()[idx(i)] * y.data()[idx(i)]).sum();
                        for i in 0..len {
                            ga[idx(i)] = y.data()[idx(i)] * (g.data()[idx(i)] - dot);
                        }
                    }
                }
                accumulate(grads, *a, like(*a, ga));
            }
        }
        Op::LogSumExp(a, axis) => {
            if wants(*a) {
                let x = val(*a);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let mut ga = vec![0.0; x.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let lse = y.data()[o * inner + r];
                        let gr = g.data()[o * inner + r];
                        for i in 0..len {
                            let k = (o * len + i) * inner + r;
                            ga[k] = gr * (x.data()[k] - lse).exp();
                        }
                    }
                }
                accumulate(grads, *a, like(*a, ga));
            }
        }
        Op::SumAll(a) => {
            if wants(*a) {
                let gv = g.item();
                accumulate(grads, *a, Tensor::full(val(*a).shape(), gv));
            }
        }
        Op::SumAxis(a, axis) => {
            if wants(*a) {
                let x = val(*a);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let mut ga = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..len {
                        for r in 0..inner {
                            ga[(o * len + i) * inner + r] = g.data()[o * inner + r];
                        }
                    }
                }
                accumulate(grads, *a, like(*a, ga));
            }
        }
        Op::MaxAxis(a, axis, argmax) => {
            if wants(*a) {
                let x = val(*a);
                let (_, len, inner) = axis_split(x.shape(), *axis);
                let mut ga = vec![0.0; x.len()];
                for (k, &i) in argmax.iter().enumerate() {
                    let (o, r) = (k / inner, k % inner);
                    ga[(o * len + i) * inner + r] = g.data()[k];
                }
                accumulate(grads, *a, like(*a, ga));
            }
        }
        Op::NormalizeRows(a, norms) => {
            if wants(*a) {
                let (m, n) = (y.rows(), y.cols());
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        ga[i * n + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                accumulate(grads, *a, like(*a, ga));
            }
        }
        Op::ConcatRows(parts) => {
            let n = y.cols();
            let mut offset = 0;
            for &p in parts {
                let rows = val(p).rows();
                if wants(p) {
                    let chunk = g.data()[offset * n..(offset + rows) * n].to_vec();
                    accumulate(grads, p, like(p, chunk));
                }
                offset += rows;
            }
        }
        Op::Element(a, idx) => {
            if wants(*a) {
                let mut ga = vec![0.0; val(*a).len()];
                ga[*idx] = g.item();
                accumulate(grads, *a, like(*a, ga));
            }
        }
    }
}

/// Gradients of one backward pass, keyed by leaf.
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a `param` leaf. Unused leaves get zeros; constants and
    /// interior nodes yield `None`.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(v.id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::wrt`] but panics for non-parameter handles.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| panic!("node {} is not a parameter leaf", v.id))
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn item(&self) -> f64 {
        self.with_value(|t| t.data()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the value as a constant on the same tape.
    pub fn detach(self) -> Var<'t> {
        let v = self.value();
        self.tape.constant(v)
    }

    fn check(self, other: Var<'t>) -> Result<()> {
        if self.tape.owns(other) {
            Ok(())
        } else {
            Err(Error::Detached)
        }
    }

    fn unary(self, op: Op, value: Tensor) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, op: Op, value: Tensor) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn same_shape(self, other: Var<'t>, op: &'static str) -> Result<()> {
        self.check(other)?;
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::ShapeMismatch {
                op,
                left: a,
                right: b,
            });
        }
        Ok(())
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check(other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[other.id].value)?
        };
        Ok(self.binary(other, Op::MatMul(self.id, other.id), value))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.with_value(Tensor::transpose)?;
        Ok(self.unary(Op::Transpose(self.id), value))
    }

    fn elementwise(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_shape(other, name)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.zip_map(&nodes[other.id].value, f)
        };
        Ok(self.binary(other, op, value))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    fn broadcast_check(self, v: Var<'t>, op: &'static str, axis: usize) -> Result<(usize, usize)> {
        self.check(v)?;
        let (m, n) = self.with_value(|t| t.dims2(op))?;
        let vs = v.shape();
        let want = if axis == 0 { n } else { m };
        if vs.iter().product::<usize>() != want {
            return Err(Error::ShapeMismatch {
                op,
                left: vec![m, n],
                right: vs,
            });
        }
        Ok((m, n))
    }

    /// `self[i, j] + v[j]`.
    pub fn add_row(self, v: Var<'t>) -> Result<Var<'t>> {
        let (m, n) = self.broadcast_check(v, "add_row", 0)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[v.id].value);
            let data = (0..m * n).map(|k| a.data()[k] + b.data()[k % n]).collect();
            Tensor::matrix(m, n, data)?
        };
        Ok(self.binary(v, Op::AddRow(self.id, v.id), value))
    }

    /// `self[i, j] + v[i]`.
    pub fn add_col(self, v: Var<'t>) -> Result<Var<'t>> {
        let (m, n) = self.broadcast_check(v, "add_col", 1)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[v.id].value);
            let data = (0..m * n).map(|k| a.data()[k] + b.data()[k / n]).collect();
            Tensor::matrix(m, n, data)?
        };
        Ok(self.binary(v, Op::AddCol(self.id, v.id), value))
    }

    /// `self[i, j] * v[i]`.
    pub fn mul_col(self, v: Var<'t>) -> Result<Var<'t>> {
        let (m, n) = self.broadcast_check(v, "mul_col", 1)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[v.id].value);
            let data = (0..m * n).map(|k| a.data()[k] * b.data()[k / n]).collect();
            Tensor::matrix(m, n, data)?
        };
        Ok(self.binary(v, Op::MulCol(self.id, v.id), value))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.with_value(|t| t.map(|v| v * c));
        self.unary(Op::Scale(self.id, c), value)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.with_value(|t| t.map(|v| v + c));
        self.unary(Op::AddScalar(self.id), value)
    }

    pub fn tanh(self) -> Var<'t> {
        let value = self.with_value(|t| t.map(f64::tanh));
        self.unary(Op::Tanh(self.id), value)
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.with_value(|t| t.map(f64::exp));
        self.unary(Op::Exp(self.id), value)
    }

    /// Natural log with the argument clamped to [`LOG_EPS`].
    pub fn ln(self) -> Var<'t> {
        let value = self.with_value(|t| t.map(|v| v.max(LOG_EPS).ln()));
        self.unary(Op::Ln(self.id), value)
    }

    pub fn sqrt(self) -> Var<'t> {
        let value = self.with_value(|t| t.map(|v| v.max(0.0).sqrt()));
        self.unary(Op::Sqrt(self.id), value)
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same tensor")
    }

    fn axis_ok(&self, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        Ok(shape)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.axis_ok(axis)?;
        let value = self.with_value(|t| softmax_values(t, axis));
        Ok(self.unary(Op::Softmax(self.id, axis), value))
    }

    /// `log Σ exp` along `axis`; the axis is removed from the shape.
    pub fn logsumexp(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.axis_ok(axis)?;
        let value = self.with_value(|t| {
            let (outer, len, inner) = axis_split(&shape, axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for r in 0..inner {
                    let at = |i: usize| t.data()[(o * len + i) * inner + r];
                    let mx = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = (0..len).map(|i| (at(i) - mx).exp()).sum();
                    out[o * inner + r] = mx + s.ln();
                }
            }
            Tensor::new(reduced_shape(&shape, axis), out)
        })?;
        Ok(self.unary(Op::LogSumExp(self.id, axis), value))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.with_value(Tensor::sum));
        self.unary(Op::SumAll(self.id), value)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.with_value(Tensor::len) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.axis_ok(axis)?;
        let value = self.with_value(|t| {
            let (outer, len, inner) = axis_split(&shape, axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..len {
                    for r in 0..inner {
                        out[o * inner + r] += t.data()[(o * len + i) * inner + r];
                    }
                }
            }
            Tensor::new(reduced_shape(&shape, axis), out)
        })?;
        Ok(self.unary(Op::SumAxis(self.id, axis), value))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let len = self.axis_ok(axis)?[axis] as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / len))
    }

    /// Max along `axis`; gradient flows to the first maximal entry.
    pub fn max_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.axis_ok(axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let (out, arg) = self.with_value(|t| {
            let mut out = vec![0.0; outer * inner];
            let mut arg = vec![0usize; outer * inner];
            for o in 0..outer {
                for r in 0..inner {
                    let mut best = 0;
                    for i in 1..len {
                        if t.data()[(o * len + i) * inner + r] > t.data()[(o * len + best) * inner + r] {
                            best = i;
                        }
                    }
                    out[o * inner + r] = t.data()[(o * len + best) * inner + r];
                    arg[o * inner + r] = best;
                }
            }
            (out, arg)
        });
        let value = Tensor::new(reduced_shape(&shape, axis), out)?;
        Ok(self.unary(Op::MaxAxis(self.id, axis, arg), value))
    }

    /// Divide each row of a 2-D tensor by its L2 norm.
    pub fn normalize_rows(self) -> Result<Var<'t>> {
        let (value, norms) = self.with_value(|t| -> Result<_> {
            let (m, n) = t.dims2("normalize_rows")?;
            let mut out = t.data().to_vec();
            let mut norms = Vec::with_capacity(m);
            for i in 0..m {
                let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-12 || !norm.is_finite() {
                    return Err(Error::ZeroNormToken { index: i });
                }
                for v in &mut out[i * n..(i + 1) * n] {
                    *v /= norm;
                }
                norms.push(norm);
            }
            Ok((Tensor::matrix(m, n, out)?, norms))
        })?;
        Ok(self.unary(Op::NormalizeRows(self.id, norms), value))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|t| t.reshape(shape))?;
        Ok(self.unary(Op::Reshape(self.id), value))
    }

    /// Scalar at flat index `idx`.
    pub fn element(self, idx: usize) -> Result<Var<'t>> {
        let len = self.with_value(Tensor::len);
        if idx >= len {
            return Err(Error::IndexOutOfRange { index: idx, len });
        }
        let value = Tensor::scalar(self.with_value(|t| t.data()[idx]));
        Ok(self.unary(Op::Element(self.id, idx), value))
    }
}

/// Stack 2-D tensors with equal column counts along the row axis.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = *parts.first().ok_or(Error::TooFewElements {
        what: "concat_rows",
        min: 1,
        got: 0,
    })?;
    let tape = first.tape;
    let cols = first.with_value(|t| t.dims2("concat_rows"))?.1;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut rg = false;
    for p in parts {
        first.check(*p)?;
        let (r, c) = p.with_value(|t| t.dims2("concat_rows"))?;
        if c != cols {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                left: first.shape(),
                right: p.shape(),
            });
        }
        p.with_value(|t| data.extend_from_slice(t.data()));
        rows += r;
        rg |= p.requires_grad();
    }
    let value = Tensor::matrix(rows, cols, data)?;
    Ok(tape.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg))
}

pub(crate) fn softmax_values(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let mut out = t.data().to_vec();
    for o in 0..outer {
        for r in 0..inner {
            let idx = |i: usize| (o * len + i) * inner + r;
            let mx = (0..len).map(|i| t.data()[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for i in 0..len {
                let e = (t.data()[idx(i)] - mx).exp();
                out[idx(i)] = e;
                s += e;
            }
            for i in 0..len {
                out[idx(i)] /= s;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("shape preserved")
}

/// Softmax of a plain tensor along `axis`, outside any tape.
pub fn softmax(t: &Tensor, axis: usize) -> Tensor {
    softmax_values(t, axis)
}
