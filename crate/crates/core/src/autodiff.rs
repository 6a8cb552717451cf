//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to its variables together with
//! the forward values needed by the vector-Jacobian product. Nodes are
//! appended in evaluation order, so the tape is always topologically sorted
//! and a reverse sweep visits every consumer before its producers.
//!
//! Leaves come in two flavours: [`Tape::leaf`] for values whose gradient is
//! wanted and [`Tape::constant`] for values that only feed the computation.
//! Gradients accumulate additively across fan-out.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed linear map applied from the left, `X -> M X`, where `M` is not
/// differentiated (graph propagation matrices).
pub trait LeftLinear: Send + Sync {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    fn apply_transpose(&self, x: &Tensor) -> Result<Tensor>;
}

impl LeftLinear for Tensor {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.matmul(x)
    }

    fn apply_transpose(&self, x: &Tensor) -> Result<Tensor> {
        self.t_matmul(x)
    }
}

/// User-defined operation with a hand-written vector-Jacobian product.
///
/// `needs[i]` is false for parents whose gradient will be discarded; the
/// implementation may return `None` for those.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn vjp(
        &self,
        parents: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Reciprocal(Var),
    Tanh(Var),
    Relu(Var),
    AddRow(Var, Var),
    SumRows(Var),
    SumCols(Var),
    Sum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    LeftMul(Arc<dyn LeftLinear>, Var),
    Custom(Arc<dyn CustomOp>, Vec<Var>),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulT(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | MulScalar(a, b)
            | AddRow(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | Reciprocal(a) | Tanh(a) | Relu(a) | SumRows(a)
            | SumCols(a) | Sum(a) | Softmax(a) | LogSoftmax(a) | SliceRows(a, _)
            | SliceCols(a, _) | LeftMul(_, a) => vec![*a],
            ConcatCols(v) | ConcatRows(v) | Custom(_, v) => v.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by a reverse sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the right shape when `v` does not
    /// influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    /// `a * b^T`, the shape of every linear layer `X W^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        self.push(v, Op::MatMulT(a, b), "matmul_t")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), "scale")
    }

    /// Multiplies every entry of `a` by the `1 x 1` variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "mul_scalar",
                lhs: self.shape(a),
                rhs: sv.shape(),
            });
        }
        let v = self.value(a).scale(sv.get(0, 0));
        self.push(v, Op::MulScalar(a, s), "mul_scalar")
    }

    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Reciprocal(a), "reciprocal")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), "relu")
    }

    /// Adds the `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(row))?;
        self.push(v, Op::AddRow(a, row), "add_row")
    }

    /// Sum over rows, producing `1 x cols`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).sum_rows();
        self.push(v, Op::SumRows(a), "sum_rows")
    }

    /// Sum over columns, producing `rows x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).sum_cols();
        self.push(v, Op::SumCols(a), "sum_cols")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), "sum")
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a), "softmax_rows")
    }

    /// Row-wise softmax where masked-out entries (`mask[r * cols + c] ==
    /// false`) receive zero probability. Every row needs at least one
    /// unmasked entry.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(Error::InvalidArgument(format!(
                "mask of length {} for a {}x{} tensor",
                mask.len(),
                x.rows(),
                x.cols()
            )));
        }
        let masked = Tensor::from_vec(
            x.rows(),
            x.cols(),
            x.data()
                .iter()
                .zip(mask)
                .map(|(v, m)| if *m { *v } else { f64::NEG_INFINITY })
                .collect(),
        )?;
        let v = softmax_rows(&masked);
        // Same VJP as the unmasked softmax: masked probabilities are exactly
        // zero, so their cotangent contribution vanishes.
        self.push(v, Op::Softmax(a), "masked_softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in out.row_mut(r) {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(a), "log_softmax_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_cols(&vals)?;
        self.push(v, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_rows(&vals)?;
        self.push(v, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, end)?;
        self.push(v, Op::SliceRows(a, start), "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, end)?;
        self.push(v, Op::SliceCols(a, start), "slice_cols")
    }

    /// `M a` for a fixed linear map `M`.
    pub fn left_mul(&mut self, m: Arc<dyn LeftLinear>, a: Var) -> Result<Var> {
        let v = m.apply(self.value(a))?;
        self.push(v, Op::LeftMul(m, a), "left_mul")
    }

    /// Records a custom operation whose forward value was computed by the
    /// caller.
    pub fn custom(&mut self, op: Arc<dyn CustomOp>, parents: &[Var], value: Tensor) -> Result<Var> {
        let name = op.name();
        self.push(value, Op::Custom(op, parents.to_vec()), name)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NotScalar(r, c));
        }
        self.backward_from(loss, Tensor::scalar(1.0))
    }

    /// Vector-Jacobian product: propagates `cotangent` from `output` to every
    /// differentiable node.
    pub fn backward_from(&self, output: Var, cotangent: Tensor) -> Result<Gradients> {
        let active: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        self.sweep(output, cotangent, &active)
    }

    /// Vector-Jacobian product restricted to the sub-graph that depends on
    /// `wrt`; cheaper than [`Tape::backward_from`] when only a few inputs
    /// matter (the implicit backward solve only needs the state).
    pub fn vjp(&self, output: Var, cotangent: Tensor, wrt: &[Var]) -> Result<Gradients> {
        let mut active = vec![false; self.nodes.len()];
        for w in wrt {
            active[w.0] = true;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !active[i] && node.op.parents().iter().any(|p| active[p.0]) {
                active[i] = true;
            }
        }
        self.sweep(output, cotangent, &active)
    }

    fn sweep(&self, output: Var, cotangent: Tensor, active: &[bool]) -> Result<Gradients> {
        if cotangent.shape() != self.shape(output) {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(output),
                rhs: cotangent.shape(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(cotangent);

        for idx in (0..=output.0).rev() {
            if !active[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let contributions = self.node_vjp(node, &g, active)?;
            grads[idx] = Some(g);
            for (parent, contrib) in contributions {
                if !active[parent.0] {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        for (i, g) in grads.iter_mut().enumerate() {
            if !active[i] {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn node_vjp(&self, node: &Node, g: &Tensor, active: &[bool]) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let on = |v: Var| active[v.0];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if on(*a) {
                    out.push((*a, g.matmul_t(val(*b))?));
                }
                if on(*b) {
                    out.push((*b, val(*a).t_matmul(g)?));
                }
            }
            Op::MatMulT(a, b) => {
                // y = a b^T: da = g b, db = g^T a
                if on(*a) {
                    out.push((*a, g.matmul(val(*b))?));
                }
                if on(*b) {
                    out.push((*b, g.t_matmul(val(*a))?));
                }
            }
            Op::Transpose(a) => out.push((*a, g.transpose())),
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.scale(-1.0)));
            }
            Op::Mul(a, b) => {
                if on(*a) {
                    out.push((*a, g.hadamard(val(*b))?));
                }
                if on(*b) {
                    out.push((*b, g.hadamard(val(*a))?));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.scale(*s))),
            Op::MulScalar(a, s) => {
                if on(*a) {
                    out.push((*a, g.scale(val(*s).get(0, 0))));
                }
                if on(*s) {
                    out.push((*s, Tensor::scalar(g.dot(val(*a)))));
                }
            }
            Op::Reciprocal(a) => {
                let y = &node.value;
                out.push((*a, g.zip_map(y, "reciprocal_vjp", |gi, yi| -gi * yi * yi)?));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                out.push((*a, g.zip_map(y, "tanh_vjp", |gi, yi| gi * (1.0 - yi * yi))?));
            }
            Op::Relu(a) => {
                out.push((
                    *a,
                    g.zip_map(val(*a), "relu_vjp", |gi, xi| if xi > 0.0 { gi } else { 0.0 })?,
                ));
            }
            Op::AddRow(a, row) => {
                out.push((*a, g.clone()));
                if on(*row) {
                    out.push((*row, g.sum_rows()));
                }
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                let mut t = Tensor::zeros(r, c);
                for i in 0..r {
                    t.row_mut(i).copy_from_slice(g.data());
                }
                out.push((*a, t));
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                let mut t = Tensor::zeros(r, c);
                for i in 0..r {
                    t.row_mut(i).fill(g.get(i, 0));
                }
                out.push((*a, t));
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                out.push((*a, Tensor::full(r, c, g.get(0, 0))));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((d, p), q) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = p * (q - inner);
                    }
                }
                out.push((*a, dx));
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for ((d, ly), gi) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *d = gi - ly.exp() * gsum;
                    }
                }
                out.push((*a, dx));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if on(*p) {
                        out.push((*p, g.slice_cols(start, start + w)?));
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = val(*p).rows();
                    if on(*p) {
                        out.push((*p, g.slice_rows(start, start + h)?));
                    }
                    start += h;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut t = Tensor::zeros(r, c);
                t.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                out.push((*a, t));
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut t = Tensor::zeros(r, c);
                for i in 0..r {
                    t.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                out.push((*a, t));
            }
            Op::LeftMul(m, a) => out.push((*a, m.apply_transpose(g)?)),
            Op::Custom(op, parents) => {
                let pv: Vec<&Tensor> = parents.iter().map(|p| val(*p)).collect();
                let needs: Vec<bool> = parents.iter().map(|p| on(*p)).collect();
                let grads = op.vjp(&pv, &node.value, g, &needs)?;
                for (p, gp) in parents.iter().zip(grads) {
                    if let Some(gp) = gp {
                        out.push((*p, gp));
                    }
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
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
    out
}
