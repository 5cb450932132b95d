//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive as a node holding its value. [`Tape::grad`]
//! walks the record backwards and expresses each vector-Jacobian product with
//! the same primitives, so the gradients are themselves tape nodes and can be
//! differentiated again. That is what lets an unrolled gradient-descent loop be
//! backpropagated through, and what powers Hessian-vector products.

use crate::error::{Error, Result};
use crate::tensor::{self, same_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    Clip(Var, f64, f64),
    Sign(Var),
    /// `[B, K] -> [K]`
    SumRows(Var),
    /// `[B, K] -> [B]`
    RowSum(Var),
    /// `[K] -> [B, K]`
    BroadcastRows(Var),
    /// `[B] -> [B, K]`
    BroadcastCols(Var),
    /// one element -> any shape
    Expand(Var),
    /// contiguous window of the source's flat data, reshaped
    Slice(Var, usize),
    /// source embedded into zeros of the output shape at a flat offset
    Scatter(Var, usize),
    /// forward value supplied by the caller, identity backward
    StraightThrough(Var),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf | Const => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Matmul(a, b) => [Some(a), Some(b)],
            Transpose(a) | Relu(a) | Softmax(a) | LogSoftmax(a) | Sum(a) | Mean(a)
            | Scale(a, _) | Clip(a, _, _) | Sign(a) | SumRows(a) | RowSum(a)
            | BroadcastRows(a) | BroadcastCols(a) | Expand(a) | Slice(a, _)
            | Scatter(a, _) | StraightThrough(a) => [Some(a), None],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Const => "const",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Matmul(..) => "matmul",
            Transpose(..) => "transpose",
            Relu(..) => "relu",
            Softmax(..) => "softmax",
            LogSoftmax(..) => "log_softmax",
            Sum(..) => "sum",
            Mean(..) => "mean",
            Scale(..) => "scale",
            Clip(..) => "clip",
            Sign(..) => "sign",
            SumRows(..) => "sum_rows",
            RowSum(..) => "row_sum",
            BroadcastRows(..) => "broadcast_rows",
            BroadcastCols(..) => "broadcast_cols",
            Expand(..) => "expand",
            Slice(..) => "slice",
            Scatter(..) => "scatter",
            StraightThrough(..) => "straight_through",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A single-owner record of one forward (and possibly backward) computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    closed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes must not be used afterwards.
    pub(crate) fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Stops further recording. Values stay readable.
    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownNode(v.0))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.closed {
            return Err(Error::TapeClosed);
        }
        value.check_finite(op.name())?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    /// An input that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Const)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.check(a)?, self.check(b)?);
        same_shape("add", x, y)?;
        let out = x.zip_map(y, |p, q| p + q);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.check(a)?, self.check(b)?);
        same_shape("sub", x, y)?;
        let out = x.zip_map(y, |p, q| p - q);
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.check(a)?, self.check(b)?);
        same_shape("mul", x, y)?;
        let out = x.zip_map(y, |p, q| p * q);
        self.push(out, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.check(a)?, self.check(b)?)?;
        self.push(out, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.check(a)?)?;
        self.push(out, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Row-wise softmax of a `[B, K]` matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.check(a)?;
        require_matrix("softmax", x)?;
        let out = tensor::softmax(x)?;
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise log-softmax of a `[B, K]` matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.check(a)?;
        require_matrix("log_softmax", x)?;
        let out = tensor::log_softmax(x)?;
        self.push(out, Op::LogSoftmax(a))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.data().iter().sum();
        self.push(Tensor::from_parts(vec![], vec![s]), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.check(a)?;
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::from_parts(vec![], vec![s]), Op::Mean(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.check(a)?.map(|v| c * v);
        self.push(out, Op::Scale(a, c))
    }

    /// Elementwise clamp to `[lo, hi]`. The gradient passes only strictly inside.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::config("clip", format!("empty interval [{lo}, {hi}]")));
        }
        let out = self.check(a)?.map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clip(a, lo, hi))
    }

    /// Elementwise sign with `sign(0) = 0`; its gradient is zero everywhere.
    pub fn sign(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.map(sign);
        self.push(out, Op::Sign(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.check(a)?;
        let (r, c) = require_matrix("sum_rows", x)?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        self.push(Tensor::from_parts(vec![c], out), Op::SumRows(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let x = self.check(a)?;
        let (r, _) = require_matrix("row_sum", x)?;
        let out = (0..r).map(|i| x.row(i).iter().sum()).collect();
        self.push(Tensor::from_parts(vec![r], out), Op::RowSum(a))
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let x = self.check(a)?;
        let k = require_vector("broadcast_rows", x)?;
        let out = x.data().repeat(rows);
        self.push(Tensor::from_parts(vec![rows, k], out), Op::BroadcastRows(a))
    }

    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let x = self.check(a)?;
        let b = require_vector("broadcast_cols", x)?;
        let out = x
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, cols))
            .collect();
        self.push(Tensor::from_parts(vec![b, cols], out), Op::BroadcastCols(a))
    }

    /// Fills `shape` with the single value of a one-element node.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.check(a)?.item()?;
        let out = Tensor::new(shape.to_vec(), vec![v; shape.iter().product()])?;
        self.push(out, Op::Expand(a))
    }

    /// Reads `product(shape)` consecutive entries of `a` starting at `offset`.
    pub fn slice(&mut self, a: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let x = self.check(a)?;
        let n: usize = shape.iter().product();
        if shape.contains(&0) || offset + n > x.len() {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), x.data()[offset..offset + n].to_vec());
        self.push(out, Op::Slice(a, offset))
    }

    /// Places `a` at `offset` inside a zero tensor of `shape`.
    pub fn scatter(&mut self, a: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let x = self.check(a)?;
        let n: usize = shape.iter().product();
        if shape.contains(&0) || offset + x.len() > n {
            return Err(Error::ShapeMismatch {
                op: "scatter",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let mut out = vec![0.0; n];
        out[offset..offset + x.len()].copy_from_slice(x.data());
        self.push(Tensor::from_parts(shape.to_vec(), out), Op::Scatter(a, offset))
    }

    /// Evaluates to `forward` but differentiates as the identity on `a`.
    pub fn straight_through(&mut self, a: Var, forward: Tensor) -> Result<Var> {
        same_shape("straight_through", self.check(a)?, &forward)?;
        self.push(forward, Op::StraightThrough(a))
    }

    /// `x + bias` with a `[K]` bias broadcast over the rows of `[B, K]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let rows = self.check(x)?.rows();
        let b = self.broadcast_rows(bias, rows)?;
        self.add(x, b)
    }

    /// Inner product of two same-shaped nodes.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// The returned nodes live on this tape, so they can be differentiated in
    /// turn. Nodes that `loss` does not depend on receive zero gradients.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.closed {
            return Err(Error::TapeClosed);
        }
        let lv = self.check(loss)?;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        for &w in wrt {
            self.check(w)?;
        }

        let end = loss.0 + 1;
        let mut needs = vec![false; end];
        for &w in wrt {
            if w.0 < end {
                needs[w.0] = true;
            }
        }
        for i in 0..end {
            if needs[i] {
                continue;
            }
            needs[i] = self.nodes[i]
                .op
                .inputs()
                .iter()
                .flatten()
                .any(|v| needs[v.0]);
        }

        let mut adj: Vec<Option<Var>> = vec![None; end];
        if needs[loss.0] {
            let seed = Tensor::full(self.shape(loss), 1.0);
            adj[loss.0] = Some(self.constant(seed)?);
        }
        for i in (0..end).rev() {
            let Some(dy) = adj[i] else { continue };
            if !needs[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.vjp(Var(i), &op, dy, &needs)? {
                adj[input.0] = Some(match adj[input.0] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let z = Tensor::zeros(self.shape(w));
                    self.constant(z)
                }
            })
            .collect()
    }

    fn vjp(&mut self, out: Var, op: &Op, dy: Var, needs: &[bool]) -> Result<Vec<(Var, Var)>> {
        let want = |v: Var| needs[v.0];
        let mut g = Vec::with_capacity(2);
        match *op {
            Op::Leaf | Op::Const | Op::Sign(_) => {}
            Op::Add(a, b) => {
                if want(a) {
                    g.push((a, dy));
                }
                if want(b) {
                    g.push((b, dy));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    g.push((a, dy));
                }
                if want(b) {
                    g.push((b, self.scale(dy, -1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    g.push((a, self.mul(dy, b)?));
                }
                if want(b) {
                    g.push((b, self.mul(dy, a)?));
                }
            }
            Op::Matmul(a, b) => {
                if want(a) {
                    let bt = self.transpose(b)?;
                    g.push((a, self.matmul(dy, bt)?));
                }
                if want(b) {
                    let at = self.transpose(a)?;
                    g.push((b, self.matmul(at, dy)?));
                }
            }
            Op::Transpose(a) => g.push((a, self.transpose(dy)?)),
            Op::Relu(a) => {
                let mask = self.value(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask)?;
                g.push((a, self.mul(dy, m)?));
            }
            Op::Clip(a, lo, hi) => {
                let mask = self
                    .value(a)
                    .map(|v| if v > lo && v < hi { 1.0 } else { 0.0 });
                let m = self.constant(mask)?;
                g.push((a, self.mul(dy, m)?));
            }
            Op::Softmax(a) => {
                // s * (dy - rowsum(dy * s))
                let cols = self.value(a).cols();
                let ds = self.mul(dy, out)?;
                let t = self.row_sum(ds)?;
                let tb = self.broadcast_cols(t, cols)?;
                let diff = self.sub(dy, tb)?;
                g.push((a, self.mul(out, diff)?));
            }
            Op::LogSoftmax(a) => {
                // dy - softmax(a) * rowsum(dy)
                let cols = self.value(a).cols();
                let s = self.softmax(a)?;
                let t = self.row_sum(dy)?;
                let tb = self.broadcast_cols(t, cols)?;
                let st = self.mul(s, tb)?;
                g.push((a, self.sub(dy, st)?));
            }
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                g.push((a, self.expand(dy, &shape)?));
            }
            Op::Mean(a) => {
                let shape = self.shape(a).to_vec();
                let n = self.value(a).len() as f64;
                let e = self.expand(dy, &shape)?;
                g.push((a, self.scale(e, 1.0 / n)?));
            }
            Op::Scale(a, c) => g.push((a, self.scale(dy, c)?)),
            Op::SumRows(a) => {
                let rows = self.value(a).rows();
                g.push((a, self.broadcast_rows(dy, rows)?));
            }
            Op::RowSum(a) => {
                let cols = self.value(a).cols();
                g.push((a, self.broadcast_cols(dy, cols)?));
            }
            Op::BroadcastRows(a) => g.push((a, self.sum_rows(dy)?)),
            Op::BroadcastCols(a) => g.push((a, self.row_sum(dy)?)),
            Op::Expand(a) => {
                let s = self.sum(dy)?;
                let shape = self.shape(a).to_vec();
                let s = if shape.is_empty() {
                    s
                } else {
                    self.slice(s, 0, &shape)?
                };
                g.push((a, s));
            }
            Op::Slice(a, offset) => {
                let shape = self.shape(a).to_vec();
                g.push((a, self.scatter(dy, offset, &shape)?));
            }
            Op::Scatter(a, offset) => {
                let shape = self.shape(a).to_vec();
                g.push((a, self.slice(dy, offset, &shape)?));
            }
            Op::StraightThrough(a) => g.push((a, dy)),
        }
        Ok(g)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

fn require_vector(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape() {
        [k] => Ok(*k),
        s => Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::config("h", "finite-difference step must be positive"));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}
