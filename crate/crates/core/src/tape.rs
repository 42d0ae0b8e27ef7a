//! Reverse-mode differentiation over a fixed set of matrix primitives.
//!
//! A [`Tape`] records every primitive in execution order, so node ids are
//! already a topological order and the adjoint sweep is a single reverse
//! pass. Values of leaves may be borrowed; everything else is owned by the
//! tape. Shape mismatches inside the recorded graph are programming errors
//! and panic.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Gelu(Var),
    RowSoftmax(Var, f64),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f64, f64)> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, rows: Vec<usize> },
    MergeRows { base: Var, update: Var, rows: Vec<usize> },
    RowSumsOver { x: Var, rows: Vec<usize>, cols: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations and their values.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when `v` does not influence the loss
    /// through differentiable inputs.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adjoint of `v` as a tensor, zero-filled when absent.
    pub fn tensor(&self, v: Var) -> Tensor {
        let dims = &self.dims[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(dims.clone(), g.clone()).expect("gradient extents"),
            None => Tensor::zeros(dims),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    /// Differentiable input borrowed from the caller.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Input, true)
    }

    pub fn leaf_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Input, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Input, false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Input, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar node");
        t.data()[0]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, p) = self.shape(a);
        let (p2, n) = self.shape(b);
        assert_eq!(p, p2, "matmul inner extents");
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, p, n);
        let t = Tensor::matrix(m, n, out).unwrap();
        self.derived(t, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, p) = self.shape(a);
        let (n, p2) = self.shape(b);
        assert_eq!(p, p2, "matmul_nt inner extents");
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, p, n);
        let t = Tensor::matrix(m, n, out).unwrap();
        self.derived(t, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = kernels::transpose(self.value(a)).expect("transpose of a matrix");
        self.derived(t, Op::Transpose(a), &[a])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.dims(), tb.dims(), "elementwise extents");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.dims().to_vec(), data).unwrap()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.dims().to_vec(), ta.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x + y);
        self.derived(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x - y);
        self.derived(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x * y);
        self.derived(t, Op::Mul(a, b), &[a, b])
    }

    /// Adds the `1 × n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (_, n) = self.shape(a);
        let tb = self.value(bias);
        assert_eq!(tb.len(), n, "bias extent");
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            add_into(row, tb.data());
        }
        let t = Tensor::new(self.value(a).dims().to_vec(), data).unwrap();
        self.derived(t, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |x| x * s);
        self.derived(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x + c);
        self.derived(t, Op::AddScalar(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * x);
        self.derived(t, Op::Square(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, kernels::gelu);
        self.derived(t, Op::Gelu(a), &[a])
    }

    /// Row-wise softmax of `a / scale`.
    pub fn row_softmax(&mut self, a: Var, scale: f64) -> Var {
        let (_, n) = self.shape(a);
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for (s, d) in src.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            kernels::softmax_row(s, scale, d);
        }
        let t = Tensor::new(src.dims().to_vec(), out).unwrap();
        self.derived(t, Op::RowSoftmax(a, scale), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (_, n) = self.shape(a);
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for (s, d) in src.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let max = s.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + s.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in d.iter_mut().zip(s) {
                *o = v - lse;
            }
        }
        let t = Tensor::new(src.dims().to_vec(), out).unwrap();
        self.derived(t, Op::LogSoftmax(a), &[a])
    }

    /// LayerNorm applied to every row with row-vector affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (rows, n) = self.shape(x);
        let (tg, tb) = (self.value(gamma), self.value(beta));
        assert!(tg.len() == n && tb.len() == n, "layer_norm affine extents");
        let mut out = vec![0.0; rows * n];
        let mut stats = Vec::with_capacity(rows);
        for (src, dst) in self.value(x).data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            stats.push(kernels::layer_norm_row(src, tg.data(), tb.data(), eps, dst));
        }
        let t = Tensor::matrix(rows, n, out).unwrap();
        self.derived(t, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (rows, n) = self.shape(x);
        assert!(start + len <= n, "column slice out of range");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let t = Tensor::matrix(rows, len, out).unwrap();
        self.derived(t, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        assert!(parts.iter().all(|&p| self.shape(p).0 == rows), "concat_cols row extents");
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, out).unwrap();
        self.derived(t, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        assert!(parts.iter().all(|&p| self.shape(p).1 == cols), "concat_rows column extents");
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / cols;
        let t = Tensor::matrix(rows, cols, out).unwrap();
        self.derived(t, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (_, n) = self.shape(x);
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(src.row(r));
        }
        let t = Tensor::matrix(rows.len(), n, out).unwrap();
        self.derived(t, Op::GatherRows { x, rows: rows.to_vec() }, &[x])
    }

    /// Copy of `base` with row `rows[p]` replaced by row `p` of `update`.
    pub fn merge_rows(&mut self, base: Var, update: Var, rows: &[usize]) -> Var {
        let (_, n) = self.shape(base);
        let tu = self.value(update);
        assert_eq!(tu.rows(), rows.len(), "merge_rows update extent");
        assert_eq!(tu.cols(), n, "merge_rows column extent");
        let mut t = self.value(base).clone();
        for (p, &r) in rows.iter().enumerate() {
            t.row_mut(r).copy_from_slice(tu.row(p));
        }
        self.derived(t, Op::MergeRows { base, update, rows: rows.to_vec() }, &[base, update])
    }

    /// `out[p] = Σ_{c ∈ cols} x[rows[p], c]` as a `|rows| × 1` column.
    pub fn row_sums_over(&mut self, x: Var, rows: &[usize], cols: &[usize]) -> Var {
        let src = self.value(x);
        let out: Vec<f64> = rows
            .iter()
            .map(|&r| {
                let row = src.row(r);
                cols.iter().fold(0.0, |acc, &c| acc + row[c])
            })
            .collect();
        assert!(!rows.is_empty(), "row_sums_over needs at least one row");
        let t = Tensor::matrix(rows.len(), 1, out).unwrap();
        self.derived(t, Op::RowSumsOver { x, rows: rows.to_vec(), cols: cols.to_vec() }, &[x])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().fold(0.0, |acc, &v| acc + v);
        self.derived(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let total = t.data().iter().fold(0.0, |acc, &v| acc + v) / t.len() as f64;
        self.derived(Tensor::scalar(total), Op::Mean(a), &[a])
    }

    /// Reverse sweep from the scalar `loss`. The tape is not modified, so
    /// repeated calls return identical adjoints.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got extents {:?}",
                self.value(loss).dims()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *g = None;
            }
        }
        let dims = self.nodes.iter().map(|n| n.value.dims().to_vec()).collect();
        Ok(Gradients { grads, dims })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut accumulate = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };

        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (m, p) = self.shape(*a);
                let n = self.shape(*b).1;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(*a, &mut |da| kernels::matmul_nt_acc(g, vb, da, m, n, p));
                accumulate(*b, &mut |db| kernels::matmul_tn_acc(va, g, db, p, m, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, p) = self.shape(*a);
                let n = self.shape(*b).0;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(*a, &mut |da| kernels::matmul_acc(g, vb, da, m, n, p));
                accumulate(*b, &mut |db| kernels::matmul_tn_acc(g, va, db, n, m, p));
            }
            Op::Transpose(a) => {
                let (m, n) = self.shape(*a);
                accumulate(*a, &mut |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                accumulate(*a, &mut |da| add_into(da, g));
                accumulate(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                accumulate(*a, &mut |da| add_into(da, g));
                accumulate(*b, &mut |db| {
                    for (d, &x) in db.iter_mut().zip(g) {
                        *d -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(*a, &mut |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(vb) {
                        *d += x * y;
                    }
                });
                accumulate(*b, &mut |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(va) {
                        *d += x * y;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                let n = self.shape(*a).1;
                accumulate(*a, &mut |da| add_into(da, g));
                accumulate(*bias, &mut |db| {
                    for row in g.chunks_exact(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale(a, s) => accumulate(*a, &mut |da| {
                for (d, &x) in da.iter_mut().zip(g) {
                    *d += x * s;
                }
            }),
            Op::AddScalar(a) => accumulate(*a, &mut |da| add_into(da, g)),
            Op::Square(a) => {
                let va = self.value(*a).data();
                accumulate(*a, &mut |da| {
                    for ((d, &x), &v) in da.iter_mut().zip(g).zip(va) {
                        *d += 2.0 * v * x;
                    }
                });
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                accumulate(*a, &mut |da| {
                    for ((d, &x), &v) in da.iter_mut().zip(g).zip(va) {
                        *d += kernels::gelu_grad(v) * x;
                    }
                });
            }
            Op::RowSoftmax(a, scale) => {
                let n = self.shape(*a).1;
                let y = node.value.data();
                accumulate(*a, &mut |da| {
                    for ((dr, gr), yr) in
                        da.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n))
                    {
                        let dot = gr.iter().zip(yr).fold(0.0, |acc, (&gi, &yi)| acc + gi * yi);
                        for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - dot) / scale;
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let n = self.shape(*a).1;
                let y = node.value.data();
                accumulate(*a, &mut |da| {
                    for ((dr, gr), yr) in
                        da.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n))
                    {
                        let total = gr.iter().fold(0.0, |acc, &v| acc + v);
                        for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += gi - yi.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let n = self.shape(*x).1;
                let vx = self.value(*x).data();
                let vg = self.value(*gamma).data();
                let xhat: Vec<f64> = vx
                    .chunks_exact(n)
                    .zip(stats)
                    .flat_map(|(row, &(mean, inv))| row.iter().map(move |&v| (v - mean) * inv))
                    .collect();
                accumulate(*x, &mut |dx| {
                    for (((dr, gr), hr), &(_, inv)) in dx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(xhat.chunks_exact(n))
                        .zip(stats)
                    {
                        let dh: Vec<f64> = gr.iter().zip(vg).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<f64>() / n as f64;
                        for ((d, &dhi), &hi) in dr.iter_mut().zip(&dh).zip(hr) {
                            *d += inv * (dhi - mean_dh - hi * mean_dh_h);
                        }
                    }
                });
                accumulate(*gamma, &mut |dg| {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((d, &gi), &hi) in dg.iter_mut().zip(gr).zip(hr) {
                            *d += gi * hi;
                        }
                    }
                });
                accumulate(*beta, &mut |db| {
                    for gr in g.chunks_exact(n) {
                        add_into(db, gr);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = self.shape(*x).1;
                let len = node.value.cols();
                accumulate(*x, &mut |dx| {
                    for (r, gr) in g.chunks_exact(len).enumerate() {
                        add_into(&mut dx[r * n + start..r * n + start + len], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    accumulate(p, &mut |dp| {
                        for (r, dr) in dp.chunks_exact_mut(w).enumerate() {
                            add_into(dr, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    accumulate(p, &mut |dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherRows { x, rows } => {
                let n = self.shape(*x).1;
                accumulate(*x, &mut |dx| {
                    for (p, &r) in rows.iter().enumerate() {
                        add_into(&mut dx[r * n..(r + 1) * n], &g[p * n..(p + 1) * n]);
                    }
                });
            }
            Op::MergeRows { base, update, rows } => {
                let n = self.shape(*base).1;
                accumulate(*base, &mut |db| {
                    let mut replaced = vec![false; db.len() / n];
                    for &r in rows {
                        replaced[r] = true;
                    }
                    for (r, (dr, gr)) in db.chunks_exact_mut(n).zip(g.chunks_exact(n)).enumerate() {
                        if !replaced[r] {
                            add_into(dr, gr);
                        }
                    }
                });
                accumulate(*update, &mut |du| {
                    for (p, &r) in rows.iter().enumerate() {
                        add_into(&mut du[p * n..(p + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::RowSumsOver { x, rows, cols } => {
                let n = self.shape(*x).1;
                accumulate(*x, &mut |dx| {
                    for (p, &r) in rows.iter().enumerate() {
                        for &c in cols {
                            dx[r * n + c] += g[p];
                        }
                    }
                });
            }
            Op::Sum(a) => accumulate(*a, &mut |da| {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(a) => {
                let len = self.value(*a).len() as f64;
                accumulate(*a, &mut |da| {
                    for d in da.iter_mut() {
                        *d += g[0] / len;
                    }
                });
            }
        }
    }
}
