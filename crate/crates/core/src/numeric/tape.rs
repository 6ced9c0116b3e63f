//! Reverse-mode differentiation over 2-D tensors.
//!
//! Every value on the tape is a row-major matrix (vectors are `1 x n`).
//! Nodes built only from constants are untracked and skipped by `backward`.

use std::sync::Arc;

use super::ops::{sigmoid, softplus, NORM_FLOOR};
use super::sparse::CsrMatrix;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, T),
    MulConst(Var, Vec<T>),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    ClampLn(Var, T, T),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows(Var, Vec<T>),
    SumAll(Var),
    RowDot(Var, Var),
    MulCol(Var, Var),
    Col(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Resize(Var),
    SlateDot(Var, Var, Vec<usize>),
    SpMM(Arc<CsrMatrix<T>>, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar output with respect to every tracked node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn mm<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a * b^T` with `a: m x k`, `b: n x k`.
fn mm_nt<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = crate::scalar::dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `a^T * b` with `a: m x k`, `b: m x n`.
fn mm_tn<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn mat<T: Scalar>(rows: usize, cols: usize, data: Vec<T>) -> Tensor<T> {
    Tensor::matrix(rows, cols, data).expect("tape op produced inconsistent shape")
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn as_matrix(t: Tensor<T>) -> Tensor<T> {
        let (r, c) = (t.rows(), t.cols());
        mat(r, c, t.into_data())
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Self::as_matrix(t), Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let mut v = Self::as_matrix(t.clone());
        v.set_requires_grad(false);
        self.push(v, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let (r, c) = self.dims(a);
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let tracked = self.tracked(&[a]);
        self.push(mat(r, c, data), op, tracked)
    }

    fn binary_same(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!((r, c), self.dims(b), "elementwise op on mismatched shapes");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.tracked(&[a, b]);
        self.push(mat(r, c, data), op, tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let data = mm(self.value(a).data(), m, k, self.value(b).data(), n);
        let tracked = self.tracked(&[a, b]);
        self.push(mat(m, n, data), Op::MatMul(a, b), tracked)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_t inner dimensions differ");
        let data = mm_nt(self.value(a).data(), m, k, self.value(b).data(), n);
        let tracked = self.tracked(&[a, b]);
        self.push(mat(m, n, data), Op::MatMulT(a, b), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(self.dims(row), (1, c), "add_row expects a 1 x cols bias");
        let b = self.value(row).data().to_vec();
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(&b).map(|(&x, &y)| x + y))
            .collect();
        let tracked = self.tracked(&[a, row]);
        self.push(mat(r, c, data), Op::AddRow(a, row), tracked)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        self.unary(a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.affine(a, s, T::zero())
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Var {
        let (r, cols) = self.dims(a);
        assert_eq!(c.len(), r * cols, "mul_const shape mismatch");
        let data = self.value(a).data().iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let tracked = self.tracked(&[a]);
        self.push(mat(r, cols, data), Op::MulConst(a, c), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, super::ops::relu, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// `ln(clamp(a, lo, hi))`; the gradient is zero where clamping is active.
    pub fn clamp_ln(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, |x| x.max(lo).min(hi).ln(), Op::ClampLn(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let data = self.value(a).data().chunks(c).flat_map(super::ops::softmax).collect();
        let tracked = self.tracked(&[a]);
        self.push(mat(r, c, data), Op::SoftmaxRows(a), tracked)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let data = self.value(a).data().chunks(c).flat_map(super::ops::log_softmax).collect();
        let tracked = self.tracked(&[a]);
        self.push(mat(r, c, data), Op::LogSoftmaxRows(a), tracked)
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for row in self.value(a).data().chunks(c) {
            let n = crate::scalar::norm(row);
            if !(n > T::of(NORM_FLOOR)) {
                return Err(Error::ZeroNorm);
            }
            norms.push(n);
            data.extend(row.iter().map(|&x| x / n));
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(mat(r, c, data), Op::NormalizeRows(a, norms), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), tracked)
    }

    /// Row-wise inner products: `m x n`, `m x n` -> `m x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!((r, c), self.dims(b), "row_dot shape mismatch");
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .zip(self.value(b).data().chunks(c))
            .map(|(x, y)| crate::scalar::dot(x, y))
            .collect();
        let tracked = self.tracked(&[a, b]);
        self.push(mat(r, 1, data), Op::RowDot(a, b), tracked)
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(self.dims(col), (r, 1), "mul_col expects an m x 1 column");
        let cv = self.value(col).data().to_vec();
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .zip(&cv)
            .flat_map(|(row, &s)| row.iter().map(move |&x| x * s))
            .collect();
        let tracked = self.tracked(&[a, col]);
        self.push(mat(r, c, data), Op::MulCol(a, col), tracked)
    }

    pub fn col(&mut self, a: Var, j: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(j < c);
        let data = (0..r).map(|i| self.value(a).data()[i * c + j]).collect();
        let tracked = self.tracked(&[a]);
        self.push(mat(r, 1, data), Op::Col(a, j), tracked)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.dims(parts[0]).1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims(p);
            assert_eq!(pc, c, "concat_rows column mismatch");
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let tracked = self.tracked(parts);
        self.push(mat(rows, c, data), Op::ConcatRows(parts.to_vec()), tracked)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = self.dims(p);
                assert_eq!(pr, r, "concat_cols row mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let tracked = self.tracked(parts);
        self.push(mat(r, total, data), Op::ConcatCols(parts.to_vec()), tracked)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        assert!(!idx.is_empty(), "gather_rows with no indices");
        let value = self.value(a).gather_rows(idx);
        let tracked = self.tracked(&[a]);
        self.push(value, Op::GatherRows(a, idx.to_vec()), tracked)
    }

    /// Truncates or zero-pads columns to `width`.
    pub fn resize_cols(&mut self, a: Var, width: usize) -> Var {
        let (r, c) = self.dims(a);
        let keep = c.min(width);
        let mut data = vec![T::zero(); r * width];
        for i in 0..r {
            data[i * width..i * width + keep]
                .copy_from_slice(&self.value(a).data()[i * c..i * c + keep]);
        }
        let tracked = self.tracked(&[a]);
        self.push(mat(r, width, data), Op::Resize(a), tracked)
    }

    /// `out[b][m] = queries[b] . items[idx[b * width + m]]`.
    pub fn slate_dot(&mut self, queries: Var, items: Var, idx: Vec<usize>, width: usize) -> Var {
        let (b, d) = self.dims(queries);
        let (n, d2) = self.dims(items);
        assert_eq!(d, d2, "slate_dot dimension mismatch");
        assert_eq!(idx.len(), b * width, "slate_dot index count");
        assert!(idx.iter().all(|&i| i < n), "slate_dot index out of range");
        let q = self.value(queries).data();
        let t = self.value(items).data();
        let data = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let row = k / width;
                crate::scalar::dot(&q[row * d..(row + 1) * d], &t[i * d..(i + 1) * d])
            })
            .collect();
        let tracked = self.tracked(&[queries, items]);
        self.push(mat(b, width, data), Op::SlateDot(queries, items, idx), tracked)
    }

    pub fn spmm(&mut self, m: Arc<CsrMatrix<T>>, x: Var) -> Var {
        let (r, d) = self.dims(x);
        assert_eq!(m.cols(), r, "spmm dimension mismatch");
        let data = m.matmul_dense(self.value(x).data(), d);
        let tracked = self.tracked(&[x]);
        let rows = m.rows();
        self.push(mat(rows, d, data), Op::SpMM(m, x), tracked)
    }

    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.dims(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![T::one()]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.push_back(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn push_back(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let dims = |v: Var| self.dims(v);
        let mut acc = |v: Var, d: Vec<T>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.iter_mut().zip(&d).for_each(|(a, &b)| *a = *a + b),
                slot @ None => *slot = Some(d),
            }
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(*a);
                let n = dims(*b).1;
                acc(*a, mm_nt(g, m, n, val(*b), k));
                acc(*b, mm_tn(val(*a), m, k, g, n));
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims(*a);
                let n = dims(*b).0;
                acc(*a, mm(g, m, n, val(*b), k));
                acc(*b, mm_tn(g, m, n, val(*a), k));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                acc(*a, g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect());
                acc(*b, g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect());
            }
            Op::AddRow(a, row) => {
                let c = dims(*a).1;
                let mut db = vec![T::zero(); c];
                for chunk in g.chunks(c) {
                    db.iter_mut().zip(chunk).for_each(|(d, &x)| *d = *d + x);
                }
                acc(*a, g.to_vec());
                acc(*row, db);
            }
            Op::Affine(a, s) => acc(*a, g.iter().map(|&x| x * *s).collect()),
            Op::MulConst(a, c) => acc(*a, g.iter().zip(c).map(|(&x, &y)| x * y).collect()),
            Op::Relu(a) => acc(
                *a,
                g.iter().zip(val(*a)).map(|(&x, &v)| if v > T::zero() { x } else { T::zero() }).collect(),
            ),
            Op::Sigmoid(a) => acc(*a, g.iter().zip(y).map(|(&x, &s)| x * s * (T::one() - s)).collect()),
            Op::Softplus(a) => acc(*a, g.iter().zip(val(*a)).map(|(&x, &v)| x * sigmoid(v)).collect()),
            Op::ClampLn(a, lo, hi) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&x, &v)| if v > *lo && v < *hi { x / v } else { T::zero() })
                    .collect(),
            ),
            Op::SoftmaxRows(a) => {
                let c = dims(*a).1;
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(y.chunks(c)) {
                    let s = crate::scalar::dot(gr, yr);
                    d.extend(gr.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - s)));
                }
                acc(*a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let c = dims(*a).1;
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(y.chunks(c)) {
                    let s: T = gr.iter().copied().sum();
                    d.extend(gr.iter().zip(yr).map(|(&gi, &yi)| gi - yi.exp() * s));
                }
                acc(*a, d);
            }
            Op::NormalizeRows(a, norms) => {
                let c = dims(*a).1;
                let mut d = Vec::with_capacity(g.len());
                for ((gr, yr), &n) in g.chunks(c).zip(y.chunks(c)).zip(norms) {
                    let s = crate::scalar::dot(gr, yr);
                    d.extend(gr.iter().zip(yr).map(|(&gi, &yi)| (gi - yi * s) / n));
                }
                acc(*a, d);
            }
            Op::SumAll(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0]; n]);
            }
            Op::RowDot(a, b) => {
                let c = dims(*a).1;
                let (av, bv) = (val(*a), val(*b));
                let da = (0..av.len()).map(|k| g[k / c] * bv[k]).collect();
                let db = (0..bv.len()).map(|k| g[k / c] * av[k]).collect();
                acc(*a, da);
                acc(*b, db);
            }
            Op::MulCol(a, col) => {
                let c = dims(*a).1;
                let (av, cv) = (val(*a), val(*col));
                let da = (0..av.len()).map(|k| g[k] * cv[k / c]).collect();
                let dc = g.chunks(c).zip(av.chunks(c)).map(|(gr, ar)| crate::scalar::dot(gr, ar)).collect();
                acc(*a, da);
                acc(*col, dc);
            }
            Op::Col(a, j) => {
                let (r, c) = dims(*a);
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    d[i * c + j] = g[i];
                }
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = dims(p).1;
                    let mut d = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        d.extend_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    acc(p, d);
                    off += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = dims(*a);
                let mut d = vec![T::zero(); r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] = d[i * c + j] + g[k * c + j];
                    }
                }
                acc(*a, d);
            }
            Op::Resize(a) => {
                let (r, c) = dims(*a);
                let w = node.value.cols();
                let keep = c.min(w);
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    d[i * c..i * c + keep].copy_from_slice(&g[i * w..i * w + keep]);
                }
                acc(*a, d);
            }
            Op::SlateDot(q, t, idx) => {
                let d = dims(*q).1;
                let width = node.value.cols();
                let (qv, tv) = (val(*q), val(*t));
                let mut dq = vec![T::zero(); qv.len()];
                let mut dt = vec![T::zero(); tv.len()];
                for (k, &i) in idx.iter().enumerate() {
                    let row = k / width;
                    let gk = g[k];
                    for j in 0..d {
                        dq[row * d + j] = dq[row * d + j] + gk * tv[i * d + j];
                        dt[i * d + j] = dt[i * d + j] + gk * qv[row * d + j];
                    }
                }
                acc(*q, dq);
                acc(*t, dt);
            }
            Op::SpMM(m, x) => {
                let d = dims(*x).1;
                acc(*x, m.transpose_matmul_dense(g, d));
            }
        }
    }
}
