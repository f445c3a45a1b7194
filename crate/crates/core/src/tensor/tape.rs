//! Define-by-run tape with reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; node inputs always point
//! at earlier nodes, so a single reverse sweep over the node list visits the
//! graph in reverse topological order.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::value::{gemm, Tensor};
use crate::error::{HugError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Softplus(Var),
    Tanh(Var),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    Transpose(Var),
    Concat(Vec<Var>, Axis),
    Slice {
        input: Var,
        axis: Axis,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SqNorm(Var),
    Broadcast(Var),
    Clamp(Var, f64, f64),
    BlockMatMul {
        a: Var,
        b: Var,
        blocks: usize,
        trans_b: bool,
    },
    PairSqDist(Var, Arc<[(usize, usize)]>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::BlockMatMul { a, b, .. } => vec![*a, *b],
            Op::Concat(parts, _) => parts.clone(),
            Op::Slice { input, .. } => vec![*input],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Tanh(a)
            | Op::RowSoftmax(a)
            | Op::RowLogSoftmax(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SqNorm(a)
            | Op::Broadcast(a)
            | Op::Clamp(a, ..)
            | Op::PairSqDist(a, _) => vec![*a],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Tanh(_) => "tanh",
            Op::RowSoftmax(_) => "row_softmax",
            Op::RowLogSoftmax(_) => "row_log_softmax",
            Op::Transpose(_) => "transpose",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SqNorm(_) => "sq_norm",
            Op::Broadcast(_) => "broadcast",
            Op::Clamp(..) => "clamp",
            Op::BlockMatMul { .. } => "block_matmul",
            Op::PairSqDist(..) => "pair_sq_dist",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    /// Some parameter reaches this node.
    grad: bool,
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor) {
        self.map.insert(id, g);
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(HugError::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
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

    /// Handle of the `index`-th node, if it exists.
    pub fn var_at(&self, index: usize) -> Option<Var> {
        (index < self.nodes.len()).then_some(Var(index))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let grad = matches!(op, Op::Param(_)) || op.inputs().iter().any(|v| self.nodes[v.0].grad);
        self.nodes.push(Node { op, value, grad });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Trainable leaf. Binding the same id twice accumulates both gradients.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> Var {
        self.push(Op::Param(id), t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(HugError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(op, value))
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_rank2("matmul", self.value(a))?;
        let (k2, n) = require_rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(HugError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::Scale(a, c), a, |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::Offset(a), a, |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(HugError::domain(
                "ln",
                format!("input {bad} is not strictly positive"),
            ));
        }
        Ok(self.unary(Op::Ln(a), a, f64::ln))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Op::Softplus(a), a, softplus)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = require_rank2("row_softmax", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for (dst, row) in out.chunks_mut(c.max(1)).zip(src.chunks(c.max(1))) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        Ok(self.push(Op::RowSoftmax(a), Tensor::matrix(r, c, out)))
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = require_rank2("row_log_softmax", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for (dst, row) in out.chunks_mut(c.max(1)).zip(src.chunks(c.max(1))) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = x - lse;
            }
        }
        Ok(self.push(Op::RowLogSoftmax(a), Tensor::matrix(r, c, out)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = require_rank2("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose(a), Tensor::matrix(c, r, out)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(HugError::invalid("concat: no inputs"));
        }
        let (r0, c0) = require_rank2("concat", self.value(parts[0]))?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = require_rank2("concat", self.value(p))?;
            let ok = match axis {
                Axis::Rows => c == c0,
                Axis::Cols => r == r0,
            };
            if !ok {
                return Err(HugError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![r0, c0],
                    rhs: vec![r, c],
                });
            }
            dims.push((r, c));
        }
        let value = match axis {
            Axis::Rows => {
                let rows = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(rows * c0);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::matrix(rows, c0, data)
            }
            Axis::Cols => {
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::matrix(r0, cols, data)
            }
        };
        Ok(self.push(Op::Concat(parts.to_vec(), axis), value))
    }

    /// `len` rows or columns starting at `start`.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let (r, c) = require_rank2("slice", self.value(a))?;
        let extent = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if start + len > extent {
            return Err(HugError::domain(
                "slice",
                format!(
                    "range {start}..{} exceeds extent {extent} of {:?}",
                    start + len,
                    [r, c]
                ),
            ));
        }
        let src = self.value(a).data();
        let value = match axis {
            Axis::Rows => Tensor::matrix(len, c, src[start * c..(start + len) * c].to_vec()),
            Axis::Cols => {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&src[i * c + start..i * c + start + len]);
                }
                Tensor::matrix(r, len, data)
            }
        };
        Ok(self.push(
            Op::Slice {
                input: a,
                axis,
                start,
            },
            value,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(m))
    }

    /// Squared L2 norm of a vector, Frobenius norm of a matrix.
    pub fn sq_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).sq_norm();
        self.push(Op::SqNorm(a), Tensor::scalar(s))
    }

    /// Repeats a single-element tensor to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.len() != 1 {
            return Err(HugError::ShapeMismatch {
                op: "broadcast",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::full(shape, t.item());
        Ok(self.push(Op::Broadcast(a), value))
    }

    /// Gradient is zero where the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp(a, lo, hi), a, |x| x.clamp(lo, hi))
    }

    /// Batched product over `blocks` equally sized row groups.
    ///
    /// `a` is `(blocks*p) x q` and `b` is `(blocks*r) x s`. With `trans_b` the
    /// output stacks `a_i * b_i^T` (`p x r`, needs `q == s`); otherwise it
    /// stacks `a_i * b_i` (`p x s`, needs `q == r`).
    pub fn block_matmul(&mut self, a: Var, b: Var, blocks: usize, trans_b: bool) -> Result<Var> {
        let (ra, q) = require_rank2("block_matmul", self.value(a))?;
        let (rb, s) = require_rank2("block_matmul", self.value(b))?;
        let mismatch = || HugError::ShapeMismatch {
            op: "block_matmul",
            lhs: vec![ra, q],
            rhs: vec![rb, s],
        };
        if blocks == 0 || ra % blocks != 0 || rb % blocks != 0 {
            return Err(mismatch());
        }
        let (p, r) = (ra / blocks, rb / blocks);
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let (inner, oc) = if trans_b { (s, r) } else { (r, s) };
        if q != inner {
            return Err(mismatch());
        }
        let mut out = vec![0.0; blocks * p * oc];
        for i in 0..blocks {
            let sa = &ta[i * p * q..(i + 1) * p * q];
            let sb = &tb[i * r * s..(i + 1) * r * s];
            let so = &mut out[i * p * oc..(i + 1) * p * oc];
            gemm(p, q, oc, sa, false, sb, trans_b, so, false);
        }
        Ok(self.push(
            Op::BlockMatMul {
                a,
                b,
                blocks,
                trans_b,
            },
            Tensor::matrix(blocks * p, oc, out),
        ))
    }

    /// Squared Euclidean distances between listed row pairs of `a`, as `pairs.len() x 1`.
    pub fn pair_sq_dist(&mut self, a: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = require_rank2("pair_sq_dist", self.value(a))?;
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= r || j >= r) {
            return Err(HugError::ShapeMismatch {
                op: "pair_sq_dist",
                lhs: vec![r, c],
                rhs: vec![i.max(j) + 1, c],
            });
        }
        let src = self.value(a);
        let out = pairs
            .iter()
            .map(|&(i, j)| {
                src.row(i)
                    .iter()
                    .zip(src.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum()
            })
            .collect();
        Ok(self.push(
            Op::PairSqDist(a, pairs.into()),
            Tensor::matrix(pairs.len(), 1, out),
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every parameter bound on this tape gets an entry; parameters the loss
    /// does not depend on receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(HugError::ShapeMismatch {
                op: "backward",
                lhs: self.value(loss).shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        let needs: Vec<bool> = self.nodes[..=loss.0].iter().map(|n| n.grad).collect();
        let acc = |grads: &mut [Option<Tensor>], v: Var, g: Tensor| {
            if !needs[v.0] {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(_) => {
                    // Put it back; collected below.
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = zip(&g, vb, |g, y| g * y);
                    let gb = zip(&g, va, |g, x| g * x);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    if needs[a.0] {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, vb.data(), true, &mut ga, false);
                        acc(&mut grads, *a, Tensor::matrix(m, k, ga));
                    }
                    if needs[b.0] {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, va.data(), true, g.data(), false, &mut gb, false);
                        acc(&mut grads, *b, Tensor::matrix(k, n, gb));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|x| c * x)),
                Op::Offset(a) | Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, g.reshaped(&shape)?);
                }
                Op::Exp(a) => acc(&mut grads, *a, zip(&g, y, |g, y| g * y)),
                Op::Ln(a) => acc(&mut grads, *a, zip(&g, self.value(*a), |g, x| g / x)),
                Op::Sigmoid(a) => acc(&mut grads, *a, zip(&g, y, |g, y| g * y * (1.0 - y))),
                Op::Softplus(a) => acc(
                    &mut grads,
                    *a,
                    zip(&g, self.value(*a), |g, x| g * sigmoid(x)),
                ),
                Op::Tanh(a) => acc(&mut grads, *a, zip(&g, y, |g, y| g * (1.0 - y * y))),
                Op::RowSoftmax(a) => {
                    let c = y.cols().max(1);
                    let mut out = vec![0.0; y.len()];
                    for ((dst, gr), yr) in out
                        .chunks_mut(c)
                        .zip(g.data().chunks(c))
                        .zip(y.data().chunks(c))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = yi * (gi - dot);
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(y.shape().to_vec(), out)?);
                }
                Op::RowLogSoftmax(a) => {
                    let c = y.cols().max(1);
                    let mut out = vec![0.0; y.len()];
                    for ((dst, gr), yr) in out
                        .chunks_mut(c)
                        .zip(g.data().chunks(c))
                        .zip(y.data().chunks(c))
                    {
                        let total: f64 = gr.iter().sum();
                        for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = gi - yi.exp() * total;
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(y.shape().to_vec(), out)?);
                }
                Op::Transpose(a) => {
                    let (r, c) = (g.shape()[0], g.shape()[1]);
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j * r + i] = g.data()[i * c + j];
                        }
                    }
                    acc(&mut grads, *a, Tensor::matrix(c, r, out));
                }
                Op::Concat(parts, axis) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let (pr, pc) = (self.value(p).shape()[0], self.value(p).shape()[1]);
                        let piece = match axis {
                            Axis::Rows => {
                                let d = g.data()[offset * cols..(offset + pr) * cols].to_vec();
                                offset += pr;
                                Tensor::matrix(pr, pc, d)
                            }
                            Axis::Cols => {
                                let mut d = Vec::with_capacity(pr * pc);
                                for i in 0..pr {
                                    d.extend_from_slice(
                                        &g.data()[i * cols + offset..i * cols + offset + pc],
                                    );
                                }
                                offset += pc;
                                Tensor::matrix(pr, pc, d)
                            }
                        };
                        acc(&mut grads, p, piece);
                    }
                }
                Op::Slice { input, axis, start } => {
                    let src = self.value(*input);
                    let (r, c) = (src.shape()[0], src.shape()[1]);
                    let mut out = vec![0.0; r * c];
                    match axis {
                        Axis::Rows => {
                            out[start * c..start * c + g.len()].copy_from_slice(g.data());
                        }
                        Axis::Cols => {
                            let len = g.cols();
                            for i in 0..r {
                                out[i * c + start..i * c + start + len]
                                    .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                            }
                        }
                    }
                    acc(&mut grads, *input, Tensor::matrix(r, c, out));
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, Tensor::full(&shape, g.item()));
                }
                Op::Mean(a) => {
                    let t = self.value(*a);
                    acc(
                        &mut grads,
                        *a,
                        Tensor::full(t.shape(), g.item() / t.len() as f64),
                    );
                }
                Op::SqNorm(a) => {
                    let gi = g.item();
                    acc(&mut grads, *a, self.value(*a).map(|x| 2.0 * gi * x));
                }
                Op::Broadcast(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, Tensor::full(&shape, g.sum()));
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = zip(
                        &g,
                        self.value(*a),
                        |g, x| if x < *lo || x > *hi { 0.0 } else { g },
                    );
                    acc(&mut grads, *a, ga);
                }
                Op::BlockMatMul {
                    a,
                    b,
                    blocks,
                    trans_b,
                } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let n = *blocks;
                    let (p, q) = (va.shape()[0] / n, va.shape()[1]);
                    let (r, s) = (vb.shape()[0] / n, vb.shape()[1]);
                    let oc = g.cols();
                    let mut ga = vec![0.0; va.len()];
                    let mut gb = vec![0.0; vb.len()];
                    for i in 0..n {
                        let sa = &va.data()[i * p * q..(i + 1) * p * q];
                        let sb = &vb.data()[i * r * s..(i + 1) * r * s];
                        let sg = &g.data()[i * p * oc..(i + 1) * p * oc];
                        let oa = &mut ga[i * p * q..(i + 1) * p * q];
                        let ob = &mut gb[i * r * s..(i + 1) * r * s];
                        if *trans_b {
                            // out = a b^T: ga = g b, gb = g^T a
                            if needs[a.0] {
                                gemm(p, r, q, sg, false, sb, false, oa, false);
                            }
                            if needs[b.0] {
                                gemm(r, p, s, sg, true, sa, false, ob, false);
                            }
                        } else {
                            // out = a b: ga = g b^T, gb = a^T g
                            if needs[a.0] {
                                gemm(p, s, q, sg, false, sb, true, oa, false);
                            }
                            if needs[b.0] {
                                gemm(r, p, s, sa, true, sg, false, ob, false);
                            }
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
                    acc(&mut grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
                }
                Op::PairSqDist(a, pairs) => {
                    let src = self.value(*a);
                    let c = src.cols();
                    let mut out = vec![0.0; src.len()];
                    for (&(i, j), &gp) in pairs.iter().zip(g.data()) {
                        for e in 0..c {
                            let d = 2.0 * gp * (src.data()[i * c + e] - src.data()[j * c + e]);
                            out[i * c + e] += d;
                            out[j * c + e] -= d;
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(src.shape().to_vec(), out)?);
                }
            }
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let g = if idx <= loss.0 {
                    grads[idx].take()
                } else {
                    None
                };
                let g = g.unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match out.map.get_mut(&id) {
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        out.map.insert(id, g);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn zip(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::new(other.shape().to_vec(), data).expect("adjoint shape")
}
