//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends one node to the [`Tape`]; [`Tape::backward`] walks the
//! nodes in reverse insertion order, so gradient accumulation order is fixed
//! and results are bitwise reproducible. Nodes that cannot reach a leaf
//! created with [`Tape::leaf`] skip gradient work entirely.
//!
//! A tape is single-threaded. Parallel work uses one tape per thread and
//! sums the resulting [`Gradients`] in a fixed order.

use std::sync::Arc;

use super::tensor::{gemm, Strided, Tensor};
use crate::error::{Error, Result};
use crate::masks::AttnMask;

const LAYER_NORM_EPS: f64 = 1e-6;

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
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Modulate { x: Var, shift: Var, scale: Var },
    LayerNorm { x: Var, rstd: Vec<f64> },
    MaskedSoftmax { x: Var },
    Silu(Var),
    Gelu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.dims[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn mat(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    fn row_vector(&self, op: &str, x: Var, row: Var) -> Result<()> {
        let (_, c) = self.mat(x);
        let r = self.value(row);
        if r.len() != c {
            return Err(Error::Shape(format!(
                "{op}: row of {} values against {c} columns",
                r.len()
            )));
        }
        Ok(())
    }

    /// `a·b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a);
        let (k2, n) = self.mat(b);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            Strided::row_major(self.value(a).data(), k),
            Strided::row_major(self.value(b).data(), n),
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, trans_b: false }, &[a, b])
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a);
        let (n, k2) = self.mat(b);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_t {:?} x {:?}ᵀ",
                self.dims(a),
                self.dims(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            Strided::row_major(self.value(a).data(), k),
            Strided::transposed(self.value(b).data(), k),
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul_t", value, Op::MatMul { a, b, trans_b: true }, &[a, b])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.dims().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_vector("add_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(x).clone();
        let c = r.len();
        for chunk in value.data_mut().chunks_mut(c) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        self.push("add_row", value, Op::AddRow { x, row }, &[x, row])
    }

    /// Multiplies every row of `x` elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_vector("mul_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(x).clone();
        let c = r.len();
        for chunk in value.data_mut().chunks_mut(c) {
            for (v, s) in chunk.iter_mut().zip(&r) {
                *v *= s;
            }
        }
        self.push("mul_row", value, Op::MulRow { x, row }, &[x, row])
    }

    /// `x ⊙ (1 + scale) + shift` with `scale`, `shift` broadcast over rows.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Result<Var> {
        self.row_vector("modulate", x, shift)?;
        self.row_vector("modulate", x, scale)?;
        let sh = self.value(shift).data().to_vec();
        let sc = self.value(scale).data().to_vec();
        let mut value = self.value(x).clone();
        let c = sh.len();
        for chunk in value.data_mut().chunks_mut(c) {
            for ((v, s), b) in chunk.iter_mut().zip(&sc).zip(&sh) {
                *v = *v * (1.0 + s) + b;
            }
        }
        self.push("modulate", value, Op::Modulate { x, shift, scale }, &[x, shift, scale])
    }

    /// Per-row normalisation to zero mean and unit variance, no affine part.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let value = Tensor::new(xv.dims().to_vec(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, rstd }, &[x])
    }

    /// Row softmax restricted to the keys `mask` allows; `None` allows all.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Arc<AttnMask>>) -> Result<Var> {
        let value = masked_softmax_impl(self.value(x), mask.map(Arc::as_ref))?;
        self.push("masked_softmax", value, Op::MaskedSoftmax { x }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push("silu", value, Op::Silu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| gelu(v).0);
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v);
        self.push("square", value, Op::Square(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / xv.len() as f64);
        self.push("mean", value, Op::Mean(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if len == 0 || start + len > c {
            return Err(Error::Shape(format!("slice_cols {start}+{len} of {c}")));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![r, len], out)?;
        self.push("slice_cols", value, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self
            .value(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let c: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if len == 0 || start + len > r {
            return Err(Error::Shape(format!("slice_rows {start}+{len} of {r}")));
        }
        let out = xv.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], out)?;
        self.push("slice_rows", value, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self
            .value(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .cols();
        if parts.iter().any(|&p| self.value(p).cols() != c) {
            return Err(Error::Shape("concat_rows: column counts differ".into()));
        }
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            let v = self.value(p);
            r += v.rows();
            out.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![r, c], out)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Embedding lookup: row `i` of the result is row `ids[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (r, c) = (tv.rows(), tv.cols());
        if ids.is_empty() {
            return Err(Error::Shape("gather_rows with no ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Shape(format!("gather id {id} out of {r} rows")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), c], out)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// `x·Wᵀ + b` with `W: out×in` and optional bias of length `out`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                lv.dims()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::filled(lv.dims(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let dims = self.nodes.iter().map(|nd| nd.value.dims().to_vec()).collect();
        Ok(Gradients { grads, dims })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let dims = self.nodes[v.0].value.dims();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(dims)))
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let n = out.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = G·B (trans_b) or G·Bᵀ
                    let bview = if *trans_b {
                        Strided::row_major(bv.data(), k)
                    } else {
                        Strided::transposed(bv.data(), n)
                    };
                    gemm(m, n, k, Strided::row_major(g.data(), n), bview, ga.data_mut(), true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *trans_b {
                        // dB = Gᵀ·A, shape n×k
                        gemm(
                            n,
                            m,
                            k,
                            Strided::transposed(g.data(), n),
                            Strided::row_major(av.data(), k),
                            gb.data_mut(),
                            true,
                        );
                    } else {
                        // dB = Aᵀ·G, shape k×n
                        gemm(
                            k,
                            m,
                            n,
                            Strided::transposed(av.data(), k),
                            Strided::row_major(g.data(), n),
                            gb.data_mut(),
                            true,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.axpy(1.0, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.axpy(1.0, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.axpy(1.0, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.axpy(-1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += gi * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, gi), x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *d += gi * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.axpy(*c, g);
                }
            }
            Op::AddRow { x, row } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.axpy(1.0, g);
                }
                if let Some(gr) = self.slot(grads, *row) {
                    let c = gr.len();
                    for chunk in g.data().chunks(c) {
                        for (d, gi) in gr.data_mut().iter_mut().zip(chunk) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::MulRow { x, row } => {
                let xv = self.value(*x);
                let rv = self.value(*row).data();
                let c = rv.len();
                if let Some(gx) = self.slot(grads, *x) {
                    for (dchunk, gchunk) in gx.data_mut().chunks_mut(c).zip(g.data().chunks(c)) {
                        for ((d, gi), s) in dchunk.iter_mut().zip(gchunk).zip(rv) {
                            *d += gi * s;
                        }
                    }
                }
                if let Some(gr) = self.slot(grads, *row) {
                    for (gchunk, xchunk) in g.data().chunks(c).zip(xv.data().chunks(c)) {
                        for ((d, gi), xi) in gr.data_mut().iter_mut().zip(gchunk).zip(xchunk) {
                            *d += gi * xi;
                        }
                    }
                }
            }
            Op::Modulate { x, shift, scale } => {
                let xv = self.value(*x);
                let sc = self.value(*scale).data();
                let c = sc.len();
                if let Some(gx) = self.slot(grads, *x) {
                    for (dchunk, gchunk) in gx.data_mut().chunks_mut(c).zip(g.data().chunks(c)) {
                        for ((d, gi), s) in dchunk.iter_mut().zip(gchunk).zip(sc) {
                            *d += gi * (1.0 + s);
                        }
                    }
                }
                if let Some(gs) = self.slot(grads, *scale) {
                    for (gchunk, xchunk) in g.data().chunks(c).zip(xv.data().chunks(c)) {
                        for ((d, gi), xi) in gs.data_mut().iter_mut().zip(gchunk).zip(xchunk) {
                            *d += gi * xi;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *shift) {
                    for gchunk in g.data().chunks(c) {
                        for (d, gi) in gb.data_mut().iter_mut().zip(gchunk) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let c = out.cols();
                    for (i, s) in rstd.iter().enumerate() {
                        let y = out.row(i);
                        let gi = g.row(i);
                        let mean_g = gi.iter().sum::<f64>() / c as f64;
                        let mean_gy = gi.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let d = &mut gx.data_mut()[i * c..(i + 1) * c];
                        for j in 0..c {
                            d[j] += s * (gi[j] - mean_g - y[j] * mean_gy);
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let c = out.cols();
                    for i in 0..out.rows() {
                        let y = out.row(i);
                        let gi = g.row(i);
                        let dot: f64 = gi.iter().zip(y).map(|(a, b)| a * b).sum();
                        let d = &mut gx.data_mut()[i * c..(i + 1) * c];
                        for j in 0..c {
                            d[j] += y[j] * (gi[j] - dot);
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, gi), &v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        let s = sigmoid(v);
                        *d += gi * s * (1.0 + v * (1.0 - s));
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, gi), &v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *d += gi * gelu(v).1;
                    }
                }
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, gi), &v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *d += 2.0 * gi * v;
                    }
                }
            }
            Op::Sum(x) => {
                let gs = g.data()[0];
                if let Some(gx) = self.slot(grads, *x) {
                    gx.data_mut().iter_mut().for_each(|d| *d += gs);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let gs = g.data()[0] / n;
                if let Some(gx) = self.slot(grads, *x) {
                    gx.data_mut().iter_mut().for_each(|d| *d += gs);
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let len = out.cols();
                    let c = gx.cols();
                    for i in 0..out.rows() {
                        let d = &mut gx.data_mut()[i * c + start..i * c + start + len];
                        for (a, b) in d.iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).cols();
                    if let Some(gp) = self.slot(grads, p) {
                        for i in 0..out.rows() {
                            let src = &g.row(i)[offset..offset + len];
                            let d = &mut gp.data_mut()[i * len..(i + 1) * len];
                            for (a, b) in d.iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let c = out.cols();
                    let d = &mut gx.data_mut()[start * c..start * c + g.len()];
                    for (a, b) in d.iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        for (a, b) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                            *a += b;
                        }
                    }
                    offset += len;
                }
            }
            Op::GatherRows { table, ids } => {
                if let Some(gt) = self.slot(grads, *table) {
                    let c = gt.cols();
                    for (i, &id) in ids.iter().enumerate() {
                        let d = &mut gt.data_mut()[id * c..(id + 1) * c];
                        for (a, b) in d.iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// GELU value and derivative (tanh approximation).
fn gelu(v: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (v + 0.044715 * v * v * v);
    let th = inner.tanh();
    let value = 0.5 * v * (1.0 + th);
    let dinner = C * (1.0 + 3.0 * 0.044715 * v * v);
    let deriv = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner;
    (value, deriv)
}

pub(crate) fn masked_softmax_impl(logits: &Tensor, mask: Option<&AttnMask>) -> Result<Tensor> {
    let (r, c) = (logits.rows(), logits.cols());
    if let Some(m) = mask {
        if m.seq_len() != r || m.seq_len() != c {
            return Err(Error::Shape(format!(
                "mask of {} tokens against {r}x{c} logits",
                m.seq_len()
            )));
        }
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = logits.row(i);
        let allowed = mask.map(|m| m.row(i));
        let ok = |j: usize| allowed.is_none_or(|a| a[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if ok(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: i });
        }
        let o = &mut out[i * c..(i + 1) * c];
        let mut total = 0.0;
        for j in 0..c {
            if ok(j) {
                let e = (row[j] - max).exp();
                o[j] = e;
                total += e;
            }
        }
        let inv = 1.0 / total;
        for v in o.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::new(vec![r, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn disconnected_leaf_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let p = tape.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let loss = tape.square(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(p).is_none());
        assert_eq!(g.wrt(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn masked_softmax_rejects_empty_row() {
        let mask = AttnMask::from_fn(2, |i, j| i == 1 && j == 1);
        let logits = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            masked_softmax_impl(&logits, Some(&mask)),
            Err(Error::DegenerateRow { row: 0 })
        ));
    }

    #[test]
    fn masked_softmax_two_term_case() {
        // the mask is square, so replicate the logits row; row 0 is checked
        let mask = AttnMask::from_fn(3, |_, j| j != 1);
        let padded = Tensor::new(vec![3, 3], [1.0, 2.0, 3.0].repeat(3)).unwrap();
        let y = masked_softmax_impl(&padded, Some(&mask)).unwrap();
        let expected_hi = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((y.at(0, 0) - (1.0 - expected_hi)).abs() < 1e-15);
        assert_eq!(y.at(0, 1), 0.0);
        assert!((y.at(0, 2) - expected_hi).abs() < 1e-15);
        assert!((y.at(0, 0) - 0.119203).abs() < 1e-6);
        assert!((y.at(0, 2) - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn constants_do_not_collect_gradients() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).data(), &[2.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1e300));
        let y = tape.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite { op: "mul" })));
    }
}
