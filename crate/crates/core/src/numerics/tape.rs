//! Recorded forward pass with reverse-mode replay over the closed kernel set.
//!
//! Leaves are either frozen (no gradient is ever produced for them) or
//! trainable. Interior nodes need a gradient only if some input does, so
//! frozen backbone subgraphs are skipped entirely during `backward`.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    MeanRows(Var),
    CrossEntropy(Var, usize),
}

struct Node<'w> {
    value: Cow<'w, Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'w> {
    nodes: Vec<Node<'w>>,
}

/// Gradients of a scalar loss, keyed by trainable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_leaf.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.by_leaf.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = Var> + '_ {
        self.by_leaf.keys().copied()
    }
}

impl<'w> Tape<'w> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'w, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Borrowed frozen leaf.
    pub fn frozen(&mut self, t: &'w Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// Owned frozen leaf (inputs, constants).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, t: &'w Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: &'w Tensor, trainable: bool) -> Var {
        if trainable {
            self.param(t)
        } else {
            self.frozen(t)
        }
    }

    pub fn is_trainable_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf) && self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b), ng))
    }

    /// `A Bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(out), Op::MatMulNt(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = kernels::transpose(self.value(a));
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let mut out = x.clone();
        out.axpy(1.0, y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), ng))
    }

    /// Adds a single row `b` (`[1,n]` or `[n]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(b));
        let n = x.cols();
        if r.numel() != n {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", x.shape(), r.shape())));
        }
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += r.data()[i % n];
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(out), Op::AddRow(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::Scale(a, s), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = kernels::softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::SoftmaxRows(a), ng)
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let out = kernels::layer_norm_rows(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                eps,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = kernels::gelu(self.value(a));
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::Gelu(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&v| self.value(v).cols())
            .ok_or(Error::Empty("concat_rows input"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", format!("{} vs {cols} columns", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Cow::Owned(out), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start >= end || end > t.rows() {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {}", t.rows())));
        }
        let c = t.cols();
        let out = Tensor::new(vec![end - start, c], t.data()[start * c..end * c].to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(Cow::Owned(out), Op::SliceRows(a, start, end), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&v| self.value(v).rows())
            .ok_or(Error::Empty("concat_cols input"))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start >= end || end > t.cols() {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {}", t.cols())));
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for i in 0..t.rows() {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let out = Tensor::new(vec![t.rows(), end - start], data)?;
        let ng = self.ng(a);
        Ok(self.push(Cow::Owned(out), Op::SliceCols(a, start, end), ng))
    }

    /// Column means over all rows: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut data = vec![0.0; n];
        for i in 0..m {
            for (d, v) in data.iter_mut().zip(t.row(i)) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= m as f64;
        }
        let out = Tensor::row_vector(data);
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::MeanRows(a), ng)
    }

    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let loss = kernels::cross_entropy(self.value(logits), label)?;
        let ng = self.ng(logits);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::CrossEntropy(logits, label),
            ng,
        ))
    }

    /// Reverse pass from a scalar output. Only trainable leaves receive entries.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut acc = |v: Var, t: Tensor| -> Result<()> {
                if !self.ng(v) {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.axpy(1.0, &t),
                    slot @ None => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => {
                    out.by_leaf.insert(Var(idx), g);
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, kernels::matmul_nt(&g, self.value(*b))?)?;
                    }
                    if self.ng(*b) {
                        acc(*b, kernels::matmul_tn(self.value(*a), &g)?)?;
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.ng(*a) {
                        acc(*a, kernels::matmul(&g, self.value(*b))?)?;
                    }
                    if self.ng(*b) {
                        acc(*b, kernels::matmul_tn(&g, self.value(*a))?)?;
                    }
                }
                Op::Transpose(a) => acc(*a, kernels::transpose(&g))?,
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g)?;
                }
                Op::AddRow(a, b) => {
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for (i, v) in g.data().iter().enumerate() {
                        gb[i % n] += v;
                    }
                    let shape = self.value(*b).shape().to_vec();
                    acc(*b, Tensor::new(shape, gb)?)?;
                    acc(*a, g)?;
                }
                Op::Scale(a, s) => acc(*a, g.map(|v| v * s))?,
                Op::SoftmaxRows(a) => {
                    acc(*a, kernels::softmax_rows_vjp(&node.value, &g))?;
                }
                Op::LayerNormRows { x, gamma, beta, eps } => {
                    let (dx, dg, db) =
                        kernels::layer_norm_rows_vjp(self.value(*x), self.value(*gamma), *eps, &g);
                    acc(*x, dx)?;
                    acc(*gamma, dg)?;
                    acc(*beta, db)?;
                }
                Op::Gelu(a) => acc(*a, kernels::gelu_vjp(self.value(*a), &g))?,
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut row = 0;
                    for p in parts {
                        let r = self.value(*p).rows();
                        let piece = g.data()[row * c..(row + r) * c].to_vec();
                        acc(*p, Tensor::new(self.value(*p).shape().to_vec(), piece)?)?;
                        row += r;
                    }
                }
                Op::SliceRows(a, start, end) => {
                    let src = self.value(*a);
                    let c = src.cols();
                    let mut full = Tensor::zeros(src.shape());
                    full.data_mut()[start * c..end * c].copy_from_slice(g.data());
                    acc(*a, full)?;
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut piece = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            piece.extend_from_slice(&g.row(i)[col..col + w]);
                        }
                        acc(*p, Tensor::new(self.value(*p).shape().to_vec(), piece)?)?;
                        col += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let src = self.value(*a);
                    let c = src.cols();
                    let mut full = Tensor::zeros(src.shape());
                    let w = end - start;
                    for i in 0..src.rows() {
                        full.data_mut()[i * c + start..i * c + end]
                            .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    acc(*a, full)?;
                }
                Op::MeanRows(a) => {
                    let src = self.value(*a);
                    let m = src.rows();
                    let data = (0..src.numel())
                        .map(|i| g.data()[i % src.cols()] / m as f64)
                        .collect();
                    acc(*a, Tensor::new(src.shape().to_vec(), data)?)?;
                }
                Op::CrossEntropy(logits, label) => {
                    let mut dz = kernels::cross_entropy_grad(self.value(*logits), *label)?;
                    let s = g.data()[0];
                    dz.data_mut().iter_mut().for_each(|v| *v *= s);
                    acc(*logits, dz)?;
                }
            }
        }
        Ok(out)
    }
}
