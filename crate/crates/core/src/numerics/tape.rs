use std::collections::HashMap;
use std::sync::Arc;

use super::params::{GradSet, ParamId, ParamStore};
use super::tensor::{matmul_nt_into, matmul_tn_into};
use super::{Real, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    MaskedFill { x: Var, allowed: Arc<[bool]> },
    Rotary { x: Var, pos: Var, freqs: Arc<[T]> },
    Gelu(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Expand(Var),
    PadTopLeft(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records primitive applications in execution order, which is also a
/// topological order: every input of node `t` has an index below `t`.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

fn suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    /// Tape that tracks gradients for trainable parameters.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), bound: HashMap::new(), grad_enabled: true }
    }

    /// Tape for forward-only evaluation; nothing requires grad.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that requires grad but is not tied to a stored parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: rg, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter. Trainable parameters become gradient
    /// leaves; frozen ones become constants. Binding twice returns the
    /// same handle.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let rg = self.grad_enabled && p.requires_grad;
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            requires_grad: rg,
            param: rg.then_some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if !suffix_of(bv.shape(), av.shape()) {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let bn = bv.len().max(1);
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, bv.data()[i % bn])).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// Elementwise sum; `b` may broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product; `b` may broadcast over leading dimensions of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Concatenates 2-D values along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]).shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Concatenates 2-D values along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]).shape(), v.shape()));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 || start + len > v.rows() {
            return Err(shape_err("slice_rows", v.shape(), &[start, len]));
        }
        let c = v.cols();
        let out = Tensor::new(vec![len, c], v.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 || start + len > v.cols() {
            return Err(shape_err("slice_cols", v.shape(), &[start, len]));
        }
        let data = (0..v.rows()).flat_map(|r| v.row(r)[start..start + len].iter().copied()).collect();
        let out = Tensor::new(vec![v.rows(), len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Row lookup (embedding gather) from a 2-D table.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(shape_err("gather_rows", v.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(shape_err("gather_rows", v.shape(), &[bad]));
        }
        let data = idx.iter().flat_map(|&i| v.row(i).iter().copied()).collect();
        let out = Tensor::new(vec![idx.len(), v.cols()], data)?;
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Softmax over the last axis. Entries at `-inf` get weight exactly 0.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_row(row);
        }
        let out = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let lse = logsumexp(row);
            for r in row.iter_mut() {
                *r -= lse;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[rows, classes]`, one target per row).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if v.shape().len() != 2 || v.rows() != targets.len() {
            return Err(shape_err("cross_entropy", v.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v.cols()) {
            return Err(shape_err("cross_entropy", v.shape(), &[bad]));
        }
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = v.row(r);
            total += logsumexp(row) - row[t];
        }
        Ok(self.push(Tensor::scalar(total), Op::CrossEntropy { logits, targets: targets.to_vec() }, &[logits]))
    }

    /// Sets entries where `allowed` is false to `-inf`.
    pub fn masked_fill(&mut self, x: Var, allowed: Arc<[bool]>) -> Result<Var> {
        let v = self.value(x);
        if v.len() != allowed.len() {
            return Err(shape_err("masked_fill", v.shape(), &[allowed.len()]));
        }
        let data = v
            .data()
            .iter()
            .zip(allowed.iter())
            .map(|(&a, &ok)| if ok { a } else { T::neg_infinity() })
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MaskedFill { x, allowed }, &[x]))
    }

    /// Rotates consecutive pairs `(x[2k], x[2k+1])` of row `t` by angle
    /// `pos[t] * freqs[k]`.
    pub fn rotary(&mut self, x: Var, pos: Var, freqs: Arc<[T]>) -> Result<Var> {
        let (xv, pv) = (self.value(x), self.value(pos));
        let d = xv.cols();
        if xv.shape().len() != 2 || d % 2 != 0 || freqs.len() != d / 2 || pv.len() != xv.rows() {
            return Err(shape_err("rotary", xv.shape(), pv.shape()));
        }
        let mut out = xv.data().to_vec();
        for (t, row) in out.chunks_mut(d).enumerate() {
            let p = pv.data()[t];
            for (k, pair) in row.chunks_mut(2).enumerate() {
                let (s, c) = (p * freqs[k]).sin_cos();
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * c - b * s;
                pair[1] = a * s + b * c;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Rotary { x, pos, freqs }, &[x, pos]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, k) = (T::of(GELU_C), T::of(GELU_K));
        let half = T::of(0.5);
        let out = self.value(x).map(|v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let n = T::of(c as f64);
        let mut out = v.data().to_vec();
        let mut rstd = Vec::with_capacity(v.rows());
        for row in out.chunks_mut(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / n;
            let r = T::one() / (var + T::of(eps)).sqrt();
            for a in row.iter_mut() {
                *a = (*a - mean) * r;
            }
            rstd.push(r);
        }
        let out = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(out, Op::LayerNorm { x, rstd }, &[x])
    }

    /// Repeats a one-element value into a vector of length `n`.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var> {
        let v = self.value(x);
        if v.len() != 1 {
            return Err(shape_err("expand", v.shape(), &[n]));
        }
        let out = Tensor::filled(&[n], v.item());
        Ok(self.push(out, Op::Expand(x), &[x]))
    }

    /// Embeds an `[n, n]` block into the top-left corner of a zero `[size, size]` matrix.
    pub fn pad_top_left(&mut self, x: Var, size: usize) -> Result<Var> {
        let v = self.value(x);
        let n = v.rows();
        if v.shape().len() != 2 || v.cols() != n || n > size {
            return Err(shape_err("pad_top_left", v.shape(), &[size, size]));
        }
        let mut out = Tensor::zeros(&[size, size]);
        for i in 0..n {
            out.data_mut()[i * size..i * size + n].copy_from_slice(v.row(i));
        }
        Ok(self.push(out, Op::PadTopLeft(x), &[x]))
    }

    /// Reverse pass from a scalar. Gradients accumulate additively, so
    /// calling this on several losses sums their gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", self.value(loss).shape(), &[1]));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
            match &mut self.grads[idx] {
                Some(slot) => slot.add_assign(&g)?,
                None => self.grads[idx] = Some(g),
            }
        }
        Ok(())
    }

    /// Gradient accumulated at `v` by previous [`Tape::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable parameter bound to this tape. A bound
    /// trainable parameter that the loss does not touch gets a zero tensor.
    pub fn param_grads(&self) -> GradSet<T> {
        let mut out = GradSet::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                let g = self.grads.get(i).and_then(Option::as_ref).cloned();
                out.grads.insert(id, g.unwrap_or_else(|| Tensor::zeros(node.value.shape())));
            }
        }
        out
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, t: Tensor<T>| -> Result<()> {
            match &mut grads[v.0] {
                Some(slot) => slot.add_assign(&t),
                None => {
                    grads[v.0] = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_nt_into(g.data(), bv.data(), &mut da, m, n, k);
                    send(*a, Tensor::new(vec![m, k], da)?)?;
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_tn_into(av.data(), g.data(), &mut db, m, k, n);
                    send(*b, Tensor::new(vec![k, n], db)?)?;
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    send(*a, g.clone())?;
                }
                if needs(*b) {
                    send(*b, reduce_leading(g, self.value(*b).shape()))?;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bn = bv.len();
                if needs(*a) {
                    let d = g.data().iter().enumerate().map(|(i, &x)| x * bv.data()[i % bn]).collect();
                    send(*a, Tensor::new(av.shape().to_vec(), d)?)?;
                }
                if needs(*b) {
                    let prod = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect(),
                    )?;
                    send(*b, reduce_leading(&prod, bv.shape()))?;
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    send(*a, g.map(|x| x * *c))?;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if needs(p) {
                        let d = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        send(p, Tensor::new(vec![rows, cols], d)?)?;
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if needs(p) {
                        let d = (0..rows).flat_map(|r| g.row(r)[offset..offset + c].iter().copied()).collect();
                        send(p, Tensor::new(vec![rows, c], d)?)?;
                    }
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                if needs(*x) {
                    let mut d = Tensor::zeros(self.value(*x).shape());
                    let c = g.cols();
                    d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    send(*x, d)?;
                }
            }
            Op::SliceCols { x, start } => {
                if needs(*x) {
                    let mut d = Tensor::zeros(self.value(*x).shape());
                    let (c, len) = (d.cols(), g.cols());
                    for r in 0..g.rows() {
                        d.data_mut()[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                    }
                    send(*x, d)?;
                }
            }
            Op::GatherRows { x, idx } => {
                if needs(*x) {
                    let mut d = Tensor::zeros(self.value(*x).shape());
                    let c = d.cols();
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, &v) in d.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    send(*x, d)?;
                }
            }
            Op::Transpose(x) => {
                if needs(*x) {
                    send(*x, g.transpose()?)?;
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    send(*x, g.clone().reshaped(self.value(*x).shape())?)?;
                }
            }
            Op::Softmax(x) => {
                if needs(*x) {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        d.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                    }
                    send(*x, Tensor::new(y.shape().to_vec(), d)?)?;
                }
            }
            Op::LogSoftmax(x) => {
                if needs(*x) {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                        let s: T = gr.iter().copied().sum();
                        d.extend(yr.iter().zip(gr).map(|(&a, &b)| b - a.exp() * s));
                    }
                    send(*x, Tensor::new(y.shape().to_vec(), d)?)?;
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    send(*x, Tensor::filled(self.value(*x).shape(), g.item()))?;
                }
            }
            Op::Mean(x) => {
                if needs(*x) {
                    let v = self.value(*x);
                    send(*x, Tensor::filled(v.shape(), g.item() / T::of(v.len() as f64)))?;
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if needs(*logits) {
                    let v = self.value(*logits);
                    let c = v.cols();
                    let mut d = v.data().to_vec();
                    for (r, row) in d.chunks_mut(c).enumerate() {
                        softmax_row(row);
                        row[targets[r]] -= T::one();
                        for a in row.iter_mut() {
                            *a *= g.item();
                        }
                    }
                    send(*logits, Tensor::new(v.shape().to_vec(), d)?)?;
                }
            }
            Op::MaskedFill { x, allowed } => {
                if needs(*x) {
                    let d = g
                        .data()
                        .iter()
                        .zip(allowed.iter())
                        .map(|(&a, &ok)| if ok { a } else { T::zero() })
                        .collect();
                    send(*x, Tensor::new(g.shape().to_vec(), d)?)?;
                }
            }
            Op::Rotary { x, pos, freqs } => {
                let xv = self.value(*x);
                let pv = self.value(*pos);
                let d = xv.cols();
                let y = &node.value;
                if needs(*x) {
                    let mut dx = g.data().to_vec();
                    for (t, row) in dx.chunks_mut(d).enumerate() {
                        let p = pv.data()[t];
                        for (k, pair) in row.chunks_mut(2).enumerate() {
                            let (s, c) = (p * freqs[k]).sin_cos();
                            let (g0, g1) = (pair[0], pair[1]);
                            pair[0] = g0 * c + g1 * s;
                            pair[1] = -g0 * s + g1 * c;
                        }
                    }
                    send(*x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
                if needs(*pos) {
                    let mut dp = vec![T::zero(); pv.len()];
                    for (t, slot) in dp.iter_mut().enumerate() {
                        let (yr, gr) = (y.row(t), g.row(t));
                        let mut acc = T::zero();
                        for k in 0..d / 2 {
                            acc += freqs[k] * (gr[2 * k + 1] * yr[2 * k] - gr[2 * k] * yr[2 * k + 1]);
                        }
                        *slot = acc;
                    }
                    send(*pos, Tensor::new(pv.shape().to_vec(), dp)?)?;
                }
            }
            Op::Gelu(x) => {
                if needs(*x) {
                    let (c, k) = (T::of(GELU_C), T::of(GELU_K));
                    let half = T::of(0.5);
                    let three = T::of(3.0);
                    let xv = self.value(*x);
                    let d = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| {
                            let th = (c * (v + k * v * v * v)).tanh();
                            let dv = half * (T::one() + th) + half * v * (T::one() - th * th) * c * (T::one() + three * k * v * v);
                            gv * dv
                        })
                        .collect();
                    send(*x, Tensor::new(xv.shape().to_vec(), d)?)?;
                }
            }
            Op::LayerNorm { x, rstd } => {
                if needs(*x) {
                    let y = &node.value;
                    let c = y.cols();
                    let n = T::of(c as f64);
                    let mut d = Vec::with_capacity(y.len());
                    for ((yr, gr), &r) in y.data().chunks(c).zip(g.data().chunks(c)).zip(rstd) {
                        let gm = gr.iter().copied().sum::<T>() / n;
                        let gy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        d.extend(yr.iter().zip(gr).map(|(&a, &b)| r * (b - gm - a * gy)));
                    }
                    send(*x, Tensor::new(y.shape().to_vec(), d)?)?;
                }
            }
            Op::Expand(x) => {
                if needs(*x) {
                    let s: T = g.data().iter().copied().sum();
                    send(*x, Tensor::filled(self.value(*x).shape(), s))?;
                }
            }
            Op::PadTopLeft(x) => {
                if needs(*x) {
                    let n = self.value(*x).rows();
                    let size = g.cols();
                    let d = (0..n).flat_map(|i| g.data()[i * size..i * size + n].iter().copied()).collect();
                    send(*x, Tensor::new(vec![n, n], d)?)?;
                }
            }
        }
        Ok(())
    }
}

/// Sums `g` over leading dimensions down to `shape`.
fn reduce_leading<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut out = Tensor::zeros(shape);
    for (i, &v) in g.data().iter().enumerate() {
        out.data_mut()[i % n] += v;
    }
    out
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for r in row.iter_mut() {
        *r = (*r - max).exp();
        sum += *r;
    }
    for r in row.iter_mut() {
        *r /= sum;
    }
}

pub(crate) fn logsumexp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&r| (r - max).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, ParamGroup};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_entries_get_zero_weight() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let m = tape.masked_fill(x, Arc::from(vec![true, false, true])).unwrap();
        let y = tape.softmax(m);
        assert_eq!(tape.value(y).data()[1], 0.0);
        assert_abs_diff_eq!(tape.value(y).data().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", t(&[2], &[1.0, 2.0]), ParamGroup::Adapter, true);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        let g = tape.param_grads();
        let g = g.get(id).unwrap().data();
        assert_abs_diff_eq!(g[0], 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(g[1], 4.0, epsilon = 1e-8);
    }

    #[test]
    fn constant_output_has_zero_gradients() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", t(&[3], &[1.0, -2.0, 0.5]), ParamGroup::Adapter, true);
        let mut tape = Tape::new();
        let _x = tape.param(&store, id);
        let c = tape.constant(Tensor::scalar(3.0));
        tape.backward(c).unwrap();
        let g = tape.param_grads();
        assert!(g.get(id).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_params_are_constants() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", t(&[1], &[1.0]), ParamGroup::Base, false);
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        assert!(!tape.requires_grad(w));
        assert!(tape.param_grads().is_empty());
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("z", t(&[2, 3], &[0.3, -1.2, 0.8, 2.0, 0.1, -0.4]), ParamGroup::Adapter, true);
        let rep = grad_check(
            &mut store,
            &[id],
            |s, tape| {
                let z = tape.param(s, id);
                tape.cross_entropy(z, &[2, 0])
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn cross_entropy_value() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let l = tape.cross_entropy(z, &[1]).unwrap();
        assert_abs_diff_eq!(tape.value(l).item(), std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn rotary_preserves_norm_and_composes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 4], &[1.0, 2.0, -0.5, 0.7, 0.3, 0.0, 1.5, -2.0]));
        let p = tape.constant(t(&[2], &[0.7, 3.1]));
        let freqs: Arc<[f64]> = Arc::from(vec![1.0, 0.01]);
        let y = tape.rotary(x, p, freqs.clone()).unwrap();
        for r in 0..2 {
            let a: f64 = tape.value(x).row(r).iter().map(|v| v * v).sum();
            let b: f64 = tape.value(y).row(r).iter().map(|v| v * v).sum();
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        let q = tape.constant(t(&[2], &[-0.7, -3.1]));
        let back = tape.rotary(y, q, freqs).unwrap();
        assert!(tape.value(back).max_abs_diff(tape.value(x)) < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 6.0, -1.0, 0.0, 4.0]));
        let y = tape.layer_norm(x, 0.0);
        for r in 0..2 {
            let row = tape.value(y).row(r);
            let m: f64 = row.iter().sum::<f64>() / 3.0;
            let v: f64 = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 3.0;
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", t(&[1], &[3.0]), ParamGroup::Adapter, true);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let a = tape.scale(x, 2.0);
        let a = tape.sum(a);
        let b = tape.scale(x, 5.0);
        let b = tape.sum(b);
        tape.backward(a).unwrap();
        tape.backward(b).unwrap();
        assert_eq!(tape.param_grads().get(id).unwrap().data(), &[7.0]);
    }

    #[test]
    fn inference_tape_tracks_nothing() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", t(&[1], &[3.0]), ParamGroup::Adapter, true);
        let mut tape = Tape::inference();
        let x = tape.param(&store, id);
        assert!(!tape.requires_grad(x));
    }

    fn tensor_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
    }

    /// Builds a scalar from `y` with a fixed random projection so the
    /// upstream gradient is not uniform.
    fn project(tape: &mut Tape<f64>, y: Var) -> Var {
        let n = tape.value(y).len();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
        let w = tape.constant(Tensor::new(tape.shape(y).to_vec(), w).unwrap());
        let p = tape.mul(y, w).unwrap();
        tape.sum(p)
    }

    fn check_unary(rows: usize, cols: usize, data: Vec<f64>, op: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new(vec![rows, cols], data).unwrap(), ParamGroup::Adapter, true);
        let rep = grad_check(
            &mut store,
            &[id],
            |s, tape| {
                let x = tape.param(s, id);
                let y = op(tape, x);
                Ok(project(tape, y))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn matmul_grads(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = crate::seed::rng_for(seed, "mm");
            let mut store = ParamStore::<f64>::new();
            let a = store.add("a", Tensor::new(vec![m, k], (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(), ParamGroup::Adapter, true);
            let b = store.add("b", Tensor::new(vec![k, n], (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(), ParamGroup::Adapter, true);
            let rep = grad_check(&mut store, &[a, b], |s, tape| {
                let (x, y) = (tape.param(s, a), tape.param(s, b));
                let z = tape.matmul(x, y)?;
                Ok(project(tape, z))
            }, 1e-5, 1e-6).unwrap();
            prop_assert!(rep.passed(), "{:?}", rep);
        }

        #[test]
        fn softmax_grads(r in 1usize..5, c in 1usize..8, data in tensor_strategy(4, 8)) {
            check_unary(r, c, data[..r * c].to_vec(), |tape, x| tape.softmax(x));
        }

        #[test]
        fn softmax_rows_sum_to_one(r in 1usize..5, c in 1usize..8, data in tensor_strategy(4, 8)) {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::new(vec![r, c], data[..r * c].to_vec()).unwrap());
            let y = tape.softmax(x);
            for i in 0..r {
                prop_assert!((tape.value(y).row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn log_softmax_grads(r in 1usize..5, c in 1usize..8, data in tensor_strategy(4, 8)) {
            check_unary(r, c, data[..r * c].to_vec(), |tape, x| tape.log_softmax(x));
        }

        #[test]
        fn gelu_grads(r in 1usize..4, c in 1usize..6, data in tensor_strategy(3, 6)) {
            check_unary(r, c, data[..r * c].to_vec(), |tape, x| tape.gelu(x));
        }

        #[test]
        fn layer_norm_grads(r in 1usize..4, c in 2usize..8, data in tensor_strategy(3, 8)) {
            check_unary(r, c, data[..r * c].to_vec(), |tape, x| tape.layer_norm(x, 1e-5));
        }

        #[test]
        fn structural_grads(r in 2usize..5, c in 2usize..5, data in tensor_strategy(4, 4)) {
            let d = data[..r * c].to_vec();
            check_unary(r, c, d.clone(), |tape, x| tape.transpose(x).unwrap());
            check_unary(r, c, d.clone(), |tape, x| {
                let a = tape.slice_rows(x, 1, r - 1).unwrap();
                let b = tape.slice_cols(x, 0, 1).unwrap();
                let bt = tape.transpose(b).unwrap();
                let s = tape.slice_cols(bt, 0, c.min(r)).unwrap();
                let s = tape.reshape(s, &[1, c.min(r)]).unwrap();
                let pad = tape.constant(Tensor::zeros(&[1, c - c.min(r)]));
                let s = tape.concat_cols(&[s, pad]).unwrap();
                tape.concat_rows(&[a, s, x]).unwrap()
            });
            check_unary(r, c, d.clone(), |tape, x| tape.gather_rows(x, &[0, 1, 0]).unwrap());
            check_unary(r, c, d.clone(), |tape, x| {
                let sq = tape.slice_cols(x, 0, r.min(c)).unwrap();
                let sq = tape.slice_rows(sq, 0, r.min(c)).unwrap();
                tape.pad_top_left(sq, r.min(c) + 2).unwrap()
            });
            check_unary(r, c, d.clone(), |tape, x| {
                let allowed: Vec<bool> = (0..r * c).map(|i| i % 3 != 1).collect();
                let m = tape.masked_fill(x, Arc::from(allowed)).unwrap();
                tape.softmax(m)
            });
            check_unary(r, c, d, |tape, x| {
                let row = tape.slice_rows(x, 0, 1).unwrap();
                let row = tape.reshape(row, &[c]).unwrap();
                let y = tape.add(x, row).unwrap();
                let z = tape.mul(y, row).unwrap();
                let m = tape.mean(z);
                let e = tape.expand(m, 3).unwrap();
                let e = tape.scale(e, 1.5);
                let s = tape.sum(x);
                let s = tape.expand(s, 3).unwrap();
                let out = tape.add(e, s).unwrap();
                tape.reshape(out, &[1, 3]).unwrap()
            });
        }

        #[test]
        fn rotary_grads(r in 1usize..4, half in 1usize..4, seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = crate::seed::rng_for(seed, "rot");
            let c = half * 2;
            let mut store = ParamStore::<f64>::new();
            let x = store.add("x", Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(), ParamGroup::Adapter, true);
            let p = store.add("p", Tensor::new(vec![r], (0..r).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap(), ParamGroup::GraphPos, true);
            let freqs: Arc<[f64]> = (0..half).map(|k| 10000f64.powf(-2.0 * k as f64 / c as f64)).collect();
            let rep = grad_check(&mut store, &[x, p], |s, tape| {
                let (xv, pv) = (tape.param(s, x), tape.param(s, p));
                let y = tape.rotary(xv, pv, freqs.clone())?;
                Ok(project(tape, y))
            }, 1e-5, 1e-6).unwrap();
            prop_assert!(rep.passed(), "{:?}", rep);
        }

        #[test]
        fn cross_entropy_grads(r in 1usize..4, c in 2usize..6, data in tensor_strategy(3, 6)) {
            let targets: Vec<usize> = (0..r).map(|i| (i * 5 + 1) % c).collect();
            let mut store = ParamStore::<f64>::new();
            let id = store.add("z", Tensor::new(vec![r, c], data[..r * c].to_vec()).unwrap(), ParamGroup::Adapter, true);
            let rep = grad_check(&mut store, &[id], |s, tape| {
                let z = tape.param(s, id);
                tape.cross_entropy(z, &targets)
            }, 1e-5, 1e-6).unwrap();
            prop_assert!(rep.passed(), "{:?}", rep);
        }
    }
}
