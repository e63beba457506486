//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Each
//! node keeps its forward value plus whatever the backward rule needs
//! (softmax probabilities, layer-norm reciprocal std, attention weights).
//! [`Graph::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because operands always exist before results.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_acc, Tensor};
use crate::error::{Result, UifmError};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Allowed key rows for every query row of a packed attention input.
#[derive(Debug, Clone, Default)]
pub struct KeyIndex {
    offsets: Vec<usize>,
    keys: Vec<usize>,
}

impl KeyIndex {
    pub fn from_lists(lists: impl IntoIterator<Item = Vec<usize>>) -> Self {
        let mut offsets = vec![0];
        let mut keys = Vec::new();
        for l in lists {
            keys.extend(l);
            offsets.push(keys.len());
        }
        KeyIndex { offsets, keys }
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn keys(&self, row: usize) -> &[usize] {
        &self.keys[self.offsets[row]..self.offsets[row + 1]]
    }

    /// Total number of scored (query, key) pairs.
    pub fn pairs(&self) -> usize {
        self.keys.len()
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, T),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<Option<usize>>),
    FillRows(Var, Var, Vec<bool>),
    Softmax(Var),
    LayerNorm(Var, Vec<T>),
    Gelu(Var),
    Sigmoid(Var),
    CrossEntropy(Var, Vec<usize>, Tensor<T>),
    Attention { q: Var, k: Var, v: Var, heads: usize, index: Rc<KeyIndex>, probs: Vec<T> },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation record for one forward/backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::lit(3.0) * a * x * x);
    (y, dy)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), grads: Vec::new(), backward_done: false }
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

    /// Gradient of the last backward pass with respect to `v`, if it was on
    /// a differentiable path.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Attention weights recorded by an [`Graph::attention`] node: the key
    /// index, the head count and the flat probabilities laid out as
    /// `[row][head][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<(&KeyIndex, usize, &[T])> {
        match &self.nodes[v.0].op {
            Op::Attention { index, heads, probs, .. } => Some((index.as_ref(), *heads, probs.as_slice())),
            _ => None,
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(UifmError::NonFinite { op: name });
        }
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => self.operands(&op).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn operands(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::FillRows(a, b, _) => vec![*a, *b],
            Op::Affine(a, _)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::Softmax(a)
            | Op::LayerNorm(a, _)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::CrossEntropy(a, _, _)
            | Op::Sum(a) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(Op::Input, value, "input")
    }

    /// Parameter leaf. Repeated requests for the same id share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(Op::Param(id), store.value(id).clone(), "param")?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// `a[n×k] · b[k×m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, k2, m) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 || bv.shape().len() != 2 {
            return Err(UifmError::shape("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![T::zero(); n * m];
        matmul_acc(av.data(), bv.data(), &mut out, n, k, m);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let t = Tensor::new(shape, out)?;
        self.push(Op::MatMul(a, b), t, "matmul")
    }

    /// `a[n×k] · b[m×k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m, k2) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return Err(UifmError::shape("matmul_bt", format!("{:?} x {:?}ᵀ", av.shape(), bv.shape())));
        }
        let bt = bv.transpose();
        let mut out = vec![T::zero(); n * m];
        matmul_acc(av.data(), bt.data(), &mut out, n, k, m);
        let t = Tensor::matrix(n, m, out)?;
        self.push(Op::MatMulBt(a, b), t, "matmul_bt")
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(UifmError::shape(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), t, "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), t, "mul")
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.len() != av.cols() {
            return Err(UifmError::shape(op, format!("{:?} with row {:?}", av.shape(), rv.shape())));
        }
        let c = av.cols();
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, rv.data()[i % c])).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// `a + row` with `row` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast("add_row", a, row, |x, r| x + r)?;
        self.push(Op::AddRow(a, row), t, "add_row")
    }

    /// `a ⊙ row` with `row` broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast("mul_row", a, row, |x, r| x * r)?;
        self.push(Op::MulRow(a, row), t, "mul_row")
    }

    /// `scale · a + shift` with scalar constants.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var> {
        let t = self.value(a).map(|x| scale * x + shift);
        self.push(Op::Affine(a, scale), t, "affine")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.affine(a, s, T::zero())
    }

    /// `1 − a`, computed literally so that `(1 − g) ⊙ x` matches the
    /// textbook expression bit for bit.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| T::one() - x);
        self.push(Op::Affine(a, -T::one()), t, "one_minus")
    }

    /// Concatenate along the last axis. All parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(UifmError::shape("concat", "no operands"));
        }
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(UifmError::shape("concat", format!("row count {} vs {rows}", pv.rows())));
            }
            total += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, data)?;
        self.push(Op::ConcatCols(parts.to_vec()), t, "concat")
    }

    /// Stack along the first axis. All parts must have the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(UifmError::shape("concat_rows", "no operands"));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(UifmError::shape("concat_rows", format!("cols {} vs {cols}", pv.cols())));
            }
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / cols;
        let t = Tensor::matrix(rows, cols, data)?;
        self.push(Op::ConcatRows(parts.to_vec()), t, "concat_rows")
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.cols() {
            return Err(UifmError::shape("slice", format!("{start}..{end} of {:?}", av.shape())));
        }
        let mut data = Vec::with_capacity(av.rows() * (end - start));
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row(r)[start..end]);
        }
        let t = Tensor::matrix(av.rows(), end - start, data)?;
        self.push(Op::SliceCols(a, start), t, "slice")
    }

    /// Embedding lookup: row `i` of the output is row `indices[i]` of
    /// `table`, or exactly zero for `None`.
    pub fn gather_rows(&mut self, table: Var, indices: Vec<Option<usize>>) -> Result<Var> {
        let tv = self.value(table);
        let (n, c) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(indices.len() * c);
        for idx in &indices {
            match *idx {
                Some(i) if i < n => data.extend_from_slice(tv.row(i)),
                Some(i) => {
                    return Err(UifmError::IndexOutOfRange { what: "embedding table".into(), index: i, size: n })
                }
                None => data.extend(std::iter::repeat_n(T::zero(), c)),
            }
        }
        let t = Tensor::matrix(indices.len(), c, data)?;
        self.push(Op::GatherRows(table, indices), t, "embedding_lookup")
    }

    /// Replace the rows flagged in `mask` by `fill` (a single row).
    pub fn fill_rows(&mut self, a: Var, fill: Var, mask: Vec<bool>) -> Result<Var> {
        let (av, fv) = (self.value(a), self.value(fill));
        if fv.len() != av.cols() || mask.len() != av.rows() {
            return Err(UifmError::shape("fill_rows", format!("{:?} fill {:?}", av.shape(), fv.shape())));
        }
        let mut t = av.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                t.row_mut(r).copy_from_slice(fv.data());
            }
        }
        self.push(Op::FillRows(a, fill, mask), t, "fill_rows")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut t = self.value(a).clone();
        for r in 0..t.rows() {
            softmax_in_place(t.row_mut(r));
        }
        self.push(Op::Softmax(a), t, "softmax")
    }

    /// Normalize each row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        let cf = T::lit(c as f64);
        let mut out = av.clone();
        let mut rstds = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / cf;
            let rstd = T::one() / (var + T::lit(LN_EPS)).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * rstd);
            rstds.push(rstd);
        }
        self.push(Op::LayerNorm(a, rstds), out, "layer_norm")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| gelu_parts(x).0);
        self.push(Op::Gelu(a), t, "gelu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), t, "sigmoid")
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        let (n, v) = (lv.rows(), lv.cols());
        if n != targets.len() || n == 0 {
            return Err(UifmError::shape("cross_entropy", format!("{n} rows, {} targets", targets.len())));
        }
        let mut probs = lv.clone();
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(UifmError::IndexOutOfRange { what: "cross_entropy classes".into(), index: t, size: v });
            }
            let row = probs.row_mut(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total += lse - row[t];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let loss = Tensor::scalar(total / T::lit(n as f64));
        self.push(Op::CrossEntropy(logits, targets, probs), loss, "cross_entropy")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    /// Multi-head scaled dot-product attention restricted to `index`.
    ///
    /// `q`, `k`, `v` are `[rows × width]` with `width` split into `heads`
    /// equal slices. Query rows with an empty key list produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, index: Rc<KeyIndex>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.cols() % heads != 0 {
            return Err(UifmError::shape(
                "attention",
                format!("q {:?} k {:?} v {:?} heads {heads}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        if index.rows() != qv.rows() {
            return Err(UifmError::shape("attention", format!("index rows {} vs {}", index.rows(), qv.rows())));
        }
        let (rows, width) = (qv.rows(), qv.cols());
        let dh = width / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut out = vec![T::zero(); rows * width];
        let mut probs = Vec::with_capacity(index.pairs() * heads);
        let mut scores = Vec::new();
        for r in 0..rows {
            let keys = index.keys(r);
            for h in 0..heads {
                let lo = h * dh;
                let qh = &qv.row(r)[lo..lo + dh];
                scores.clear();
                for &j in keys {
                    let kh = &kv.row(j)[lo..lo + dh];
                    scores.push(dot(qh, kh) * scale);
                }
                softmax_in_place(&mut scores);
                let orow = &mut out[r * width + lo..r * width + lo + dh];
                for (&j, &p) in keys.iter().zip(&scores) {
                    let vh = &vv.row(j)[lo..lo + dh];
                    for (o, &x) in orow.iter_mut().zip(vh) {
                        *o += p * x;
                    }
                }
                probs.extend_from_slice(&scores);
            }
        }
        let t = Tensor::matrix(rows, width, out)?;
        self.push(Op::Attention { q, k, v, heads, index, probs }, t, "attention")
    }

    /// Reverse pass from a scalar `loss`; parameter gradients are added to
    /// the store's accumulators.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.backward_done {
            return Err(UifmError::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(UifmError::NotScalar(shape));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads, store);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>], store: &mut ParamStore<T>) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Input => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let bt = bv.transpose();
                    let mut da = vec![T::zero(); n * k];
                    matmul_acc(g.data(), bt.data(), &mut da, n, m, k);
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.wants(*b) {
                    let at = av.transpose();
                    let mut db = vec![T::zero(); k * m];
                    matmul_acc(at.data(), g.data(), &mut db, k, n, m);
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if self.wants(*a) {
                    let mut da = vec![T::zero(); n * k];
                    matmul_acc(g.data(), bv.data(), &mut da, n, m, k);
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.wants(*b) {
                    let gt = g.transpose();
                    let mut db = vec![T::zero(); m * k];
                    matmul_acc(gt.data(), av.data(), &mut db, m, n, k);
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if self.wants(p) {
                        accumulate(grads, p, out.shape(), g.data().to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, av.shape(), d);
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, bv.shape(), d);
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(grads, *a, out.shape(), g.data().to_vec());
                }
                if self.wants(*row) {
                    let c = out.cols();
                    let mut d = vec![T::zero(); c];
                    for (j, &x) in g.data().iter().enumerate() {
                        d[j % c] += x;
                    }
                    accumulate(grads, *row, self.value(*row).shape(), d);
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                let c = av.cols();
                if self.wants(*a) {
                    let d = g.data().iter().enumerate().map(|(j, &x)| x * rv.data()[j % c]).collect();
                    accumulate(grads, *a, av.shape(), d);
                }
                if self.wants(*row) {
                    let mut d = vec![T::zero(); c];
                    for (j, (&x, &y)) in g.data().iter().zip(av.data()).enumerate() {
                        d[j % c] += x * y;
                    }
                    accumulate(grads, *row, rv.shape(), d);
                }
            }
            Op::Affine(a, s) => {
                let d = g.data().iter().map(|&x| x * *s).collect();
                accumulate(grads, *a, out.shape(), d);
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let c = pv.cols();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        accumulate(grads, p, pv.shape(), d);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    if self.wants(p) {
                        accumulate(grads, p, pv.shape(), g.data()[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let (c, w) = (av.cols(), out.cols());
                let mut d = vec![T::zero(); av.len()];
                for r in 0..av.rows() {
                    d[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, av.shape(), d);
            }
            Op::GatherRows(table, indices) if self.wants(*table) => {
                let tv = self.value(*table);
                let c = tv.cols();
                let slot = grads[table.0].get_or_insert_with(|| Tensor::zeros(tv.shape().to_vec()));
                let sd = slot.data_mut();
                for (r, idx) in indices.iter().enumerate() {
                    if let Some(t) = *idx {
                        for (s, &x) in sd[t * c..(t + 1) * c].iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                }
            }
            Op::GatherRows(..) => {}
            Op::FillRows(a, fill, mask) => {
                let av = self.value(*a);
                let c = av.cols();
                if self.wants(*a) {
                    let mut d = g.data().to_vec();
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            d[r * c..(r + 1) * c].iter_mut().for_each(|x| *x = T::zero());
                        }
                    }
                    accumulate(grads, *a, av.shape(), d);
                }
                if self.wants(*fill) {
                    let mut d = vec![T::zero(); c];
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for (s, &x) in d.iter_mut().zip(g.row(r)) {
                                *s += x;
                            }
                        }
                    }
                    accumulate(grads, *fill, self.value(*fill).shape(), d);
                }
            }
            Op::Softmax(a) => {
                let mut d = Vec::with_capacity(out.len());
                for r in 0..out.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let s = dot(y, gy);
                    d.extend(y.iter().zip(gy).map(|(&yi, &gi)| yi * (gi - s)));
                }
                accumulate(grads, *a, out.shape(), d);
            }
            Op::LayerNorm(a, rstds) => {
                let c = T::lit(out.cols() as f64);
                let mut d = Vec::with_capacity(out.len());
                for (r, &rstd) in rstds.iter().enumerate() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let mean_g = gy.iter().copied().sum::<T>() / c;
                    let mean_gy = dot(y, gy) / c;
                    d.extend(y.iter().zip(gy).map(|(&yi, &gi)| rstd * (gi - mean_g - yi * mean_gy)));
                }
                accumulate(grads, *a, out.shape(), d);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d = g.data().iter().zip(av.data()).map(|(&gi, &x)| gi * gelu_parts(x).1).collect();
                accumulate(grads, *a, av.shape(), d);
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(&gi, &y)| gi * y * (T::one() - y)).collect();
                accumulate(grads, *a, out.shape(), d);
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let scale = g.item() / T::lit(targets.len() as f64);
                let mut d: Vec<T> = probs.data().iter().map(|&p| p * scale).collect();
                let v = probs.cols();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * v + t] -= scale;
                }
                accumulate(grads, *logits, probs.shape(), d);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, av.shape(), vec![g.item(); av.len()]);
            }
            Op::Attention { q, k, v, heads, index, probs } => {
                self.attention_backward(g, *q, *k, *v, *heads, index, probs, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor<T>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        index: &KeyIndex,
        probs: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = (qv.rows(), qv.cols());
        let dh = width / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut dq = vec![T::zero(); rows * width];
        let mut dk = vec![T::zero(); rows * width];
        let mut dv = vec![T::zero(); rows * width];
        let mut dp = Vec::new();
        let mut pos = 0;
        for r in 0..rows {
            let keys = index.keys(r);
            for h in 0..heads {
                let lo = h * dh;
                let p = &probs[pos..pos + keys.len()];
                pos += keys.len();
                let go = &g.row(r)[lo..lo + dh];
                dp.clear();
                for (&j, &pj) in keys.iter().zip(p) {
                    let vh = &vv.row(j)[lo..lo + dh];
                    dp.push(dot(go, vh));
                    for (d, &x) in dv[j * width + lo..j * width + lo + dh].iter_mut().zip(go) {
                        *d += pj * x;
                    }
                }
                let s = dot(p, &dp);
                let qh = &qv.row(r)[lo..lo + dh];
                for ((&j, &pj), &dpj) in keys.iter().zip(p).zip(&dp) {
                    let ds = pj * (dpj - s) * scale;
                    let kh = &kv.row(j)[lo..lo + dh];
                    for (d, &x) in dq[r * width + lo..r * width + lo + dh].iter_mut().zip(kh) {
                        *d += ds * x;
                    }
                    for (d, &x) in dk[j * width + lo..j * width + lo + dh].iter_mut().zip(qh) {
                        *d += ds * x;
                    }
                }
            }
        }
        let shape = qv.shape().to_vec();
        if self.wants(q) {
            accumulate(grads, q, &shape, dq);
        }
        if self.wants(k) {
            accumulate(grads, k, &shape, dk);
        }
        if self.wants(v) {
            accumulate(grads, v, &shape, dv);
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], d: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(d) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), d).expect("gradient shape")),
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 2], &[0.0, 0.0])).unwrap();
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1], &[0.0])).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_classes() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 7], &[0.3; 7])).unwrap();
        for target in 0..7 {
            let l = g.cross_entropy(x, vec![target]).unwrap();
            assert!((g.value(l).item() - 7f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_map_gradient_is_broadcast_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", vec![3, 2], Init::TruncNormal(1.0), true, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3], &[1.0, -2.0, 0.5])).unwrap();
        let wv = g.param(&store, w).unwrap();
        let y = g.matmul(x, wv).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5]);
    }

    #[test]
    fn disconnected_parameter_gets_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", vec![2], Init::TruncNormal(1.0), true, &mut rng).unwrap();
        let b = store.add("b", vec![2], Init::TruncNormal(1.0), true, &mut rng).unwrap();
        let mut g = Graph::new();
        let av = g.param(&store, a).unwrap();
        let _bv = g.param(&store, b).unwrap();
        let loss = g.sum(av).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert!(store.grad(b).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0])).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s, &mut store).unwrap();
        assert!(matches!(g.backward(s, &mut store), Err(UifmError::BackwardTwice)));
    }

    #[test]
    fn non_finite_outputs_are_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1], &[1e300])).unwrap();
        let err = g.mul(x, x).unwrap_err();
        assert!(matches!(err, UifmError::NonFinite { op: "mul" }));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 4], &[1.0, 2.0, 3.0, 10.0, -5.0, 0.0, 0.5, 2.0])).unwrap();
        let y = g.layer_norm(x).unwrap();
        for r in 0..2 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gather_with_none_is_exact_zero() {
        let mut g = Graph::<f64>::new();
        let table = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = g.gather_rows(table, vec![Some(1), None]).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0, 0.0, 0.0]);
        assert!(g.gather_rows(table, vec![Some(2)]).is_err());
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2, 3], &[0.0; 6])).unwrap();
        let err = g.matmul(a, a).unwrap_err().to_string();
        assert!(err.starts_with("matmul"), "{err}");
        assert!(err.contains("[2, 3]"));
    }
}
