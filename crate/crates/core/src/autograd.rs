//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Graph`] records operations as they are evaluated; [`Graph::backward`]
//! walks the tape in reverse and returns a gradient for every node that
//! depends on a leaf created with `requires_grad`.

use std::borrow::Cow;

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense `rows x cols` matrix of `f64`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_vec(1, n, data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self::from_vec(rows, cols, vec![v; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian init with standard deviation `std`.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self::from_vec(rows, cols, data)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(self.rows, b.cols);
        matmul_acc(self, b, &mut out);
        out
    }

    /// Rounds every entry through `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        self.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

/// out += a * b
fn matmul_acc(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
    let n = b.cols;
    for i in 0..a.rows {
        let orow = &mut out.data[i * n..(i + 1) * n];
        for p in 0..a.cols {
            let av = a.data[i * a.cols + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `x * tanh(gelu(x))`.
pub fn phish(x: f64) -> f64 {
    x * gelu(x).tanh()
}

pub fn phish_grad(x: f64) -> f64 {
    let t = gelu(x).tanh();
    t + x * (1.0 - t * t) * gelu_grad(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax over a slice.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a * b^T
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Phish(Var),
    Sigmoid(Var),
    /// Row-wise normalisation; keeps the per-row inverse std.
    Normalize(Var, Vec<f64>),
    /// Row-wise softmax with masked entries forced to zero.
    Softmax(Var),
    Transpose(Var),
    /// Each output element copies one input element (or is zero).
    Gather(Var, Vec<Option<usize>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    SumAll(Var),
    SumSq(Var),
    /// Weighted soft-target cross entropy; keeps the softmax of the logits.
    SoftCrossEntropy {
        logits: Var,
        targets: Tensor,
        weights: Vec<f64>,
        probs: Tensor,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients indexed by [`Var`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf owning its value.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "matmul_t inner dimension mismatch");
        let mut out = Tensor::zeros(av.rows, bv.rows);
        for i in 0..av.rows {
            for j in 0..bv.rows {
                out.data[i * bv.rows + j] = dot(av.row(i), bv.row(j));
            }
        }
        self.push(out, Op::MatMulT(a, b), &[a, b])
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.rows, av.cols, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// `a + row` with `row` (1 x n) broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert!(rv.rows == 1 && rv.cols == av.cols, "add_row shape mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, &b) in out.data[r * out.cols..(r + 1) * out.cols].iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    /// `a * row` elementwise with `row` (1 x n) broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert!(rv.rows == 1 && rv.cols == av.cols, "mul_row shape mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, &g) in out.data[r * out.cols..(r + 1) * out.cols].iter_mut().zip(&rv.data) {
                *o *= g;
            }
        }
        self.push(out, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn phish(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::from_vec(v.rows, v.cols, v.data.iter().map(|&x| phish(x)).collect());
        self.push(out, Op::Phish(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::from_vec(v.rows, v.cols, v.data.iter().map(|&x| sigmoid(x)).collect());
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// `(x - mean) / sqrt(var + eps)` per row.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a);
        let n = v.cols as f64;
        let mut out = v.clone();
        let mut rstd = Vec::with_capacity(v.rows);
        for r in 0..v.rows {
            let row = &mut out.data[r * v.cols..(r + 1) * v.cols];
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let s = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * s);
            rstd.push(s);
        }
        self.push(out, Op::Normalize(a, rstd), &[a])
    }

    /// Row softmax; `mask[i * cols + j] == false` excludes an entry.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Var {
        let v = self.value(a);
        let mut out = v.clone();
        for r in 0..v.rows {
            let row = &mut out.data[r * v.cols..(r + 1) * v.cols];
            match &mask {
                None => softmax_in_place(row),
                Some(m) => {
                    let allowed = &m[r * v.cols..(r + 1) * v.cols];
                    let max = row
                        .iter()
                        .zip(allowed)
                        .filter(|(_, &ok)| ok)
                        .map(|(&x, _)| x)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for (x, &ok) in row.iter_mut().zip(allowed) {
                        *x = if ok { (*x - max).exp() } else { 0.0 };
                        sum += *x;
                    }
                    if sum > 0.0 {
                        row.iter_mut().for_each(|x| *x /= sum);
                    }
                }
            }
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// Builds a `rows x cols` tensor whose element `k` copies flat input
    /// element `index[k]`, or is zero for `None`.
    pub fn gather(&mut self, a: Var, rows: usize, cols: usize, index: Vec<Option<usize>>) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length mismatch");
        let v = self.value(a);
        let data = index.iter().map(|i| i.map_or(0.0, |i| v.data[i])).collect();
        let out = Tensor::from_vec(rows, cols, data);
        self.push(out, Op::Gather(a, index), &[a])
    }

    /// Selects whole rows of `a` by index.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let cols = self.value(a).cols;
        let index = rows
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| Some(r * cols + c)))
            .collect();
        self.gather(a, rows.len(), cols, index)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        let out = Tensor::from_vec(rows, cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(v.rows, len);
        for r in 0..v.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&v.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = Tensor::zeros(1, v.cols);
        for r in 0..v.rows {
            for (o, x) in out.data.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        out.scale_assign(1.0 / v.rows as f64);
        self.push(out, Op::MeanRows(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_sq();
        self.push(Tensor::scalar(s), Op::SumSq(a), &[a])
    }

    /// `sum_i w_i * CE(softmax(logits_i), targets_i)` over rows.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Tensor, weights: Vec<f64>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape(), "cross entropy target shape mismatch");
        assert_eq!(weights.len(), lv.rows, "one weight per row");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for r in 0..lv.rows {
            let ls = log_softmax(lv.row(r));
            let row = &mut probs.data[r * lv.cols..(r + 1) * lv.cols];
            for (p, l) in row.iter_mut().zip(&ls) {
                *p = l.exp();
            }
            if weights[r] != 0.0 {
                let ce: f64 = targets.row(r).iter().zip(&ls).map(|(t, l)| -t * l).sum();
                loss += weights[r] * ce;
            }
        }
        self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            },
            &[logits],
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, make: impl FnOnce() -> Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let t = make();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    /// Adds into an existing gradient slot in place.
    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let (r, c) = self.shape(v);
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c));
        f(slot);
    }

    fn propagate(&self, op: &Op, value: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = g * B^T
                self.accumulate_with(grads, *a, |da| {
                    for i in 0..g.rows {
                        let grow = g.row(i);
                        for p in 0..av.cols {
                            da.data[i * av.cols + p] += dot(grow, bv.row(p));
                        }
                    }
                });
                // dB = A^T * g
                self.accumulate_with(grads, *b, |db| {
                    for i in 0..av.rows {
                        let grow = g.row(i);
                        for p in 0..av.cols {
                            let a_ip = av.data[i * av.cols + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let drow = &mut db.data[p * bv.cols..(p + 1) * bv.cols];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += a_ip * gv;
                            }
                        }
                    }
                });
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // C = A B^T: dA = g B, dB = g^T A
                self.accumulate_with(grads, *a, |da| {
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            let gv = g.data[i * g.cols + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, &b) in da.data[i * av.cols..(i + 1) * av.cols].iter_mut().zip(bv.row(j)) {
                                *d += gv * b;
                            }
                        }
                    }
                });
                self.accumulate_with(grads, *b, |db| {
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            let gv = g.data[i * g.cols + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, &a) in db.data[j * bv.cols..(j + 1) * bv.cols].iter_mut().zip(av.row(i)) {
                                *d += gv * a;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || {
                    let mut n = g.clone();
                    n.scale_assign(-1.0);
                    n
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, || {
                    Tensor::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
                    )
                });
                self.accumulate(grads, *b, || {
                    Tensor::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect(),
                    )
                });
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate_with(grads, *row, |dr| {
                    for r in 0..g.rows {
                        for (d, x) in dr.data.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                self.accumulate_with(grads, *a, |da| {
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            da.data[r * g.cols + c] += g.data[r * g.cols + c] * rv.data[c];
                        }
                    }
                });
                self.accumulate_with(grads, *row, |dr| {
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            dr.data[c] += g.data[r * g.cols + c] * av.data[r * g.cols + c];
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, || {
                    let mut n = g.clone();
                    n.scale_assign(*s);
                    n
                });
            }
            Op::Phish(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, || {
                    Tensor::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&av.data).map(|(gv, &x)| gv * phish_grad(x)).collect(),
                    )
                });
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, || {
                    Tensor::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&value.data)
                            .map(|(gv, &y)| gv * y * (1.0 - y))
                            .collect(),
                    )
                });
            }
            Op::Normalize(a, rstd) => {
                // y = (x - mean) * s; dx = s * (g - mean(g) - y * mean(g * y))
                self.accumulate_with(grads, *a, |da| {
                    let n = g.cols as f64;
                    for r in 0..g.rows {
                        let (gr, yr) = (g.row(r), value.row(r));
                        let gm = gr.iter().sum::<f64>() / n;
                        let gym = dot(gr, yr) / n;
                        for c in 0..g.cols {
                            da.data[r * g.cols + c] += rstd[r] * (gr[c] - gm - yr[c] * gym);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                // dx = y * (g - sum(g * y)); masked entries have y = 0.
                self.accumulate_with(grads, *a, |da| {
                    for r in 0..g.rows {
                        let (gr, yr) = (g.row(r), value.row(r));
                        let s = dot(gr, yr);
                        for c in 0..g.cols {
                            da.data[r * g.cols + c] += yr[c] * (gr[c] - s);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, || g.transpose());
            }
            Op::Gather(a, index) => {
                self.accumulate_with(grads, *a, |da| {
                    for (k, i) in index.iter().enumerate() {
                        if let Some(i) = i {
                            da.data[*i] += g.data[k];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate_with(grads, p, |dp| {
                        for (d, x) in dp.data.iter_mut().zip(&g.data[off..off + n]) {
                            *d += x;
                        }
                    });
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols;
                    self.accumulate_with(grads, p, |dp| {
                        for r in 0..g.rows {
                            for c in 0..pc {
                                dp.data[r * pc + c] += g.data[r * g.cols + off + c];
                            }
                        }
                    });
                    off += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.value(*a).cols;
                self.accumulate_with(grads, *a, |da| {
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            da.data[r * ac + start + c] += g.data[r * g.cols + c];
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows;
                self.accumulate_with(grads, *a, |da| {
                    let inv = 1.0 / rows as f64;
                    for r in 0..rows {
                        for c in 0..g.cols {
                            da.data[r * g.cols + c] += g.data[c] * inv;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g.data[0];
                self.accumulate_with(grads, *a, |da| da.data.iter_mut().for_each(|d| *d += gv));
            }
            Op::SumSq(a) => {
                let gv = g.data[0];
                let av = self.value(*a);
                self.accumulate_with(grads, *a, |da| {
                    for (d, x) in da.data.iter_mut().zip(&av.data) {
                        *d += 2.0 * gv * x;
                    }
                });
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let gv = g.data[0];
                self.accumulate_with(grads, *logits, |dl| {
                    for r in 0..probs.rows {
                        let w = weights[r] * gv;
                        if w == 0.0 {
                            continue;
                        }
                        let tsum: f64 = targets.row(r).iter().sum();
                        for c in 0..probs.cols {
                            dl.data[r * probs.cols + c] +=
                                w * (probs.data[r * probs.cols + c] * tsum - targets.data[r * probs.cols + c]);
                        }
                    }
                });
            }
        }
    }
}
