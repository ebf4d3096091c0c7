//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Tape`] is an append-only arena of nodes; handles are [`VarId`]s.
//! Forward methods validate shapes, compute values eagerly and record the
//! op. [`Tape::backward`] walks the tape in reverse, accumulating gradients
//! additively — two backward passes without [`Tape::zero_grads`] double
//! every gradient.
//!
//! The tape is rebuilt per training step. A tape is a plain value: building
//! one per thread is the supported way to evaluate a shared read-only model
//! concurrently.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct VarId(usize);

/// Activation applied by [`Tape::dense`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    Identity,
    Relu,
    Elu,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output value.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            // relu'(0) := 0 by convention.
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if out > 0.0 {
                    1.0
                } else {
                    out + 1.0
                }
            }
            Activation::Sigmoid => out * (1.0 - out),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(VarId, VarId),
    Dense {
        x: VarId,
        w: VarId,
        b: VarId,
        act: Activation,
    },
    Add(VarId, VarId),
    AddBias(VarId, VarId),
    AddScalar(VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    Exp(VarId),
    Log(VarId),
    Square(VarId),
    Relu(VarId),
    Elu(VarId),
    Sigmoid(VarId),
    Softplus(VarId),
    Clamp(VarId, f64, f64),
    Concat(Vec<VarId>, usize),
    Sum(VarId, usize),
    Mean(VarId, usize),
    SumAll(VarId),
    Slice {
        a: VarId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(VarId),
    RepeatRows(VarId, usize),
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    needs: Vec<bool>,
    ops: Vec<Op>,
}

/// `(outer, axis extent, inner)` decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of nodes currently recorded; pass to [`Tape::truncate`] to
    /// roll the tape back to this point.
    pub fn mark(&self) -> usize {
        self.values.len()
    }

    /// Drops every node recorded after `mark`.
    pub fn truncate(&mut self, mark: usize) {
        self.values.truncate(mark);
        self.grads.truncate(mark);
        self.needs.truncate(mark);
        self.ops.truncate(mark);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.values[id.0].shape()
    }

    pub fn scalar_value(&self, id: VarId) -> Result<f64> {
        self.values[id.0].item()
    }

    /// Accumulated gradient of `id`, if backward has reached it.
    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn grad_tensor(&self, id: VarId) -> Option<Tensor> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[id.0].shape().to_vec(), g.clone()).unwrap())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor, needs: bool, op: Op) -> VarId {
        self.values.push(value);
        self.grads.push(None);
        self.needs.push(needs);
        self.ops.push(op);
        VarId(self.values.len() - 1)
    }

    fn push_dep(&mut self, value: Tensor, deps: &[VarId], op: Op) -> VarId {
        let needs = deps.iter().any(|d| self.needs[d.0]);
        self.push(value, needs, op)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(
            m,
            k,
            n,
            self.values[a.0].data(),
            self.values[b.0].data(),
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_dep(value, &[a, b], Op::Matmul(a, b)))
    }

    /// Fused `act(x @ w + b)`. `x`: (rows, in), `w`: (in, out), `b`: (out).
    pub fn dense(&mut self, x: VarId, w: VarId, b: VarId, act: Activation) -> Result<VarId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if sb.len() != 1 || sb[0] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                lhs: sw.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (rows, in_dim, out_dim) = (sx[0], sx[1], sw[1]);
        let mut out = vec![0.0; rows * out_dim];
        kernels::gemm_nn(
            rows,
            in_dim,
            out_dim,
            self.values[x.0].data(),
            self.values[w.0].data(),
            &mut out,
            false,
        );
        let bias = self.values[b.0].data();
        for row in out.chunks_mut(out_dim) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v = act.apply(*v + bv);
            }
        }
        let value = Tensor::new(vec![rows, out_dim], out)?;
        Ok(self.push_dep(value, &[x, w, b], Op::Dense { x, w, b, act }))
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: VarId,
        b: VarId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_dep(value, &[a, b], op))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + bias` with `bias` broadcast over every leading axis; `bias` is a
    /// rank-1 tensor matching the last axis of `a`.
    pub fn add_bias(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        let last = *sa.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != last {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bv = self.values[bias.0].data();
        let mut data = self.values[a.0].data().to_vec();
        for row in data.chunks_mut(last) {
            for (v, b) in row.iter_mut().zip(bv) {
                *v += b;
            }
        }
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push_dep(value, &[a, bias], Op::AddBias(a, bias)))
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> Result<VarId> {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    fn unary(&mut self, a: VarId, f: impl Fn(f64) -> f64, op: Op) -> Result<VarId> {
        let data = self.values[a.0].data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_dep(value, &[a], op))
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        if let Some(&bad) = self.values[a.0].data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::LogDomain { value: bad });
        }
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, |x| Activation::Relu.apply(x), Op::Relu(a))
    }

    pub fn elu(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, |x| Activation::Elu.apply(x), Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Clamps values to `[lo, hi]`; gradient passes through inside the
    /// closed interval and is zero outside.
    pub fn clamp(&mut self, a: VarId, lo: f64, hi: f64) -> Result<VarId> {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> Result<VarId> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut mid_total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            mid_total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = mid_total;
        let mut data = vec![0.0; outer * mid_total * inner];
        let mut offset = 0;
        for p in parts {
            let s = self.shape(*p);
            let mid = s[axis];
            let src = self.values[p.0].data();
            for o in 0..outer {
                let dst_base = (o * mid_total + offset) * inner;
                let src_base = o * mid * inner;
                data[dst_base..dst_base + mid * inner]
                    .copy_from_slice(&src[src_base..src_base + mid * inner]);
            }
            offset += mid;
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push_dep(value, parts, Op::Concat(parts.to_vec(), axis)))
    }

    fn check_axis(&self, op: &'static str, a: VarId, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::InvalidAxis {
                op,
                axis,
                shape: self.shape(a).to_vec(),
            });
        }
        Ok(())
    }

    fn sum_values(&self, a: VarId, axis: usize) -> (Vec<usize>, Vec<f64>) {
        let shape = self.shape(a);
        let (outer, mid, inner) = axis_split(shape, axis);
        let src = self.values[a.0].data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    out[dst + i] += src[base + i];
                }
            }
        }
        (drop_axis(shape, axis), out)
    }

    /// Sums along `axis`, dropping it from the shape.
    pub fn sum(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        self.check_axis("sum", a, axis)?;
        let (shape, data) = self.sum_values(a, axis);
        let value = Tensor::new(shape, data)?;
        Ok(self.push_dep(value, &[a], Op::Sum(a, axis)))
    }

    /// Mean along `axis`: exactly `sum(axis)` scaled by `1/extent`.
    pub fn mean(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        self.check_axis("mean", a, axis)?;
        let mid = self.shape(a)[axis];
        let (shape, mut data) = self.sum_values(a, axis);
        let inv = 1.0 / mid as f64;
        for v in &mut data {
            *v *= inv;
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push_dep(value, &[a], Op::Mean(a, axis)))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum_all(&mut self, a: VarId) -> Result<VarId> {
        let total: f64 = self.values[a.0].data().iter().sum();
        let value = Tensor::scalar(total);
        Ok(self.push_dep(value, &[a], Op::SumAll(a)))
    }

    pub fn slice(&mut self, a: VarId, axis: usize, start: usize, len: usize) -> Result<VarId> {
        self.check_axis("slice", a, axis)?;
        let shape = self.shape(a).to_vec();
        if start + len > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {}) exceeds axis {axis} extent {}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, mid, inner) = axis_split(&shape, axis);
        let src = self.values[a.0].data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_base = (o * mid + start) * inner;
            let dst_base = o * len * inner;
            out[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_dep(value, &[a], Op::Slice { a, axis, start, len }))
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let value = self.values[a.0].reshaped(shape)?;
        Ok(self.push_dep(value, &[a], Op::Reshape(a)))
    }

    /// Repeats each leading-axis row `k` times consecutively:
    /// (rows, …) → (rows·k, …).
    pub fn repeat_rows(&mut self, a: VarId, k: usize) -> Result<VarId> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || k == 0 {
            return Err(Error::InvalidArgument(format!(
                "repeat_rows: shape {shape:?}, k {k}"
            )));
        }
        let rows = shape[0];
        let row_len = self.values[a.0].len() / rows.max(1);
        let src = self.values[a.0].data();
        let mut out = Vec::with_capacity(src.len() * k);
        for r in 0..rows {
            let row = &src[r * row_len..(r + 1) * row_len];
            for _ in 0..k {
                out.extend_from_slice(row);
            }
        }
        let mut out_shape = shape;
        out_shape[0] = rows * k;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_dep(value, &[a], Op::RepeatRows(a, k)))
    }

    // ── backward ─────────────────────────────────────────────────────

    fn ensure_grad(&mut self, id: VarId) {
        if self.grads[id.0].is_none() {
            self.grads[id.0] = Some(vec![0.0; self.values[id.0].len()]);
        }
    }

    fn accumulate(&mut self, id: VarId, contribution: impl Iterator<Item = f64>) {
        if !self.needs[id.0] {
            return;
        }
        self.ensure_grad(id);
        let g = self.grads[id.0].as_mut().unwrap();
        for (slot, c) in g.iter_mut().zip(contribution) {
            *slot += c;
        }
    }

    /// Propagates `∂loss/∂node` to every gradient-requiring node reachable
    /// from `loss`. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.values[loss.0].shape().to_vec(),
            });
        }
        self.ensure_grad(loss);
        self.grads[loss.0].as_mut().unwrap()[0] += 1.0;

        for i in (0..=loss.0).rev() {
            if !self.needs[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = self.ops[i].clone();
            self.propagate(&op, VarId(i), &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, op: &Op, node: VarId, g: &[f64]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, n) = {
                    let s = self.shape(node);
                    (s[0], s[1])
                };
                let k = self.shape(a)[1];
                if self.needs[a.0] {
                    self.ensure_grad(a);
                    let Tape { values, grads, .. } = self;
                    let ga = grads[a.0].as_mut().unwrap();
                    kernels::gemm_nt(m, n, k, g, values[b.0].data(), ga, true);
                }
                if self.needs[b.0] {
                    self.ensure_grad(b);
                    let Tape { values, grads, .. } = self;
                    let gb = grads[b.0].as_mut().unwrap();
                    kernels::gemm_tn(k, m, n, values[a.0].data(), g, gb, true);
                }
            }
            Op::Dense { x, w, b, act } => {
                let out = self.values[node.0].data();
                let dpre: Vec<f64> = g
                    .iter()
                    .zip(out)
                    .map(|(&gv, &ov)| gv * act.derivative_from_output(ov))
                    .collect();
                let (rows, out_dim) = {
                    let s = self.shape(node);
                    (s[0], s[1])
                };
                let in_dim = self.shape(x)[1];
                if self.needs[x.0] {
                    self.ensure_grad(x);
                    let Tape { values, grads, .. } = self;
                    let gx = grads[x.0].as_mut().unwrap();
                    kernels::gemm_nt(rows, out_dim, in_dim, &dpre, values[w.0].data(), gx, true);
                }
                if self.needs[w.0] {
                    self.ensure_grad(w);
                    let Tape { values, grads, .. } = self;
                    let gw = grads[w.0].as_mut().unwrap();
                    kernels::gemm_tn(in_dim, rows, out_dim, values[x.0].data(), &dpre, gw, true);
                }
                if self.needs[b.0] {
                    self.ensure_grad(b);
                    let gb = self.grads[b.0].as_mut().unwrap();
                    for row in dpre.chunks(out_dim) {
                        for (slot, d) in gb.iter_mut().zip(row) {
                            *slot += d;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.iter().copied());
                self.accumulate(b, g.iter().copied());
            }
            Op::AddBias(a, bias) => {
                self.accumulate(a, g.iter().copied());
                if self.needs[bias.0] {
                    self.ensure_grad(bias);
                    let gb = self.grads[bias.0].as_mut().unwrap();
                    let last = gb.len();
                    for row in g.chunks(last) {
                        for (slot, d) in gb.iter_mut().zip(row) {
                            *slot += d;
                        }
                    }
                }
            }
            Op::AddScalar(a) => self.accumulate(a, g.iter().copied()),
            Op::Sub(a, b) => {
                self.accumulate(a, g.iter().copied());
                self.accumulate(b, g.iter().map(|&v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs[a.0] {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(self.values[b.0].data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.accumulate(a, contrib.into_iter());
                }
                if self.needs[b.0] {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(self.values[a.0].data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.accumulate(b, contrib.into_iter());
                }
            }
            Op::Scale(a, c) => self.accumulate(a, g.iter().map(|&v| v * c)),
            Op::Exp(a) => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(self.values[node.0].data())
                    .map(|(&gv, &ov)| gv * ov)
                    .collect();
                self.accumulate(a, contrib.into_iter());
            }
            Op::Log(a) => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(self.values[a.0].data())
                    .map(|(&gv, &xv)| gv / xv)
                    .collect();
                self.accumulate(a, contrib.into_iter());
            }
            Op::Square(a) => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(self.values[a.0].data())
                    .map(|(&gv, &xv)| 2.0 * gv * xv)
                    .collect();
                self.accumulate(a, contrib.into_iter());
            }
            Op::Relu(a) => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(self.values[a.0].data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(a, contrib.into_iter());
            }
            Op::Elu(a) => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(self.values[node.0].data())
                    .map(|(&gv, &ov)| gv * Activation::Elu.derivative_from_output(ov))
                    .collect();
                self.accumulate(a, contrib.into_iter());
            }
            Op::Sigmoid(a) => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(self.values[node.0].data())
                    .map(|(&gv, &ov)| gv * ov * (1.0 - ov))
                    .collect();
                self.accumulate(a, contrib.into_iter());
            }
            Op::Softplus(a) => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(self.values[a.0].data())
                    .map(|(&gv, &xv)| gv * sigmoid(xv))
                    .collect();
                self.accumulate(a, contrib.into_iter());
            }
            Op::Clamp(a, lo, hi) => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(self.values[a.0].data())
                    .map(|(&gv, &xv)| if xv >= lo && xv <= hi { gv } else { 0.0 })
                    .collect();
                self.accumulate(a, contrib.into_iter());
            }
            Op::Concat(ref parts, axis) => {
                let shape = self.shape(node).to_vec();
                let (outer, mid_total, inner) = axis_split(&shape, axis);
                let mut offset = 0;
                for p in parts {
                    let mid = self.shape(*p)[axis];
                    if self.needs[p.0] {
                        self.ensure_grad(*p);
                        let gp = self.grads[p.0].as_mut().unwrap();
                        for o in 0..outer {
                            let src_base = (o * mid_total + offset) * inner;
                            let dst_base = o * mid * inner;
                            for j in 0..mid * inner {
                                gp[dst_base + j] += g[src_base + j];
                            }
                        }
                    }
                    offset += mid;
                }
            }
            Op::Sum(a, axis) => self.reduce_backward(a, axis, g, 1.0),
            Op::Mean(a, axis) => {
                let inv = 1.0 / self.shape(a)[axis] as f64;
                self.reduce_backward(a, axis, g, inv);
            }
            Op::SumAll(a) => {
                let gv = g[0];
                let len = self.values[a.0].len();
                self.accumulate(a, std::iter::repeat(gv).take(len));
            }
            Op::Slice { a, axis, start, len } => {
                if self.needs[a.0] {
                    let shape = self.shape(a).to_vec();
                    let (outer, mid, inner) = axis_split(&shape, axis);
                    self.ensure_grad(a);
                    let ga = self.grads[a.0].as_mut().unwrap();
                    for o in 0..outer {
                        let dst_base = (o * mid + start) * inner;
                        let src_base = o * len * inner;
                        for j in 0..len * inner {
                            ga[dst_base + j] += g[src_base + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => self.accumulate(a, g.iter().copied()),
            Op::RepeatRows(a, k) => {
                if self.needs[a.0] {
                    let rows = self.shape(a)[0];
                    let row_len = self.values[a.0].len() / rows;
                    self.ensure_grad(a);
                    let ga = self.grads[a.0].as_mut().unwrap();
                    for r in 0..rows {
                        for rep in 0..k {
                            let src = (r * k + rep) * row_len;
                            for j in 0..row_len {
                                ga[r * row_len + j] += g[src + j];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn reduce_backward(&mut self, a: VarId, axis: usize, g: &[f64], scale: f64) {
        if !self.needs[a.0] {
            return;
        }
        let shape = self.shape(a).to_vec();
        let (outer, mid, inner) = axis_split(&shape, axis);
        self.ensure_grad(a);
        let ga = self.grads[a.0].as_mut().unwrap();
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let src = o * inner;
                for i in 0..inner {
                    ga[base + i] += g[src + i] * scale;
                }
            }
        }
    }
}
