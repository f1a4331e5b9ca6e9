//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A `Graph` borrows a `ParamStore` read-only, records every operation with
//! its output value, and replays the tape backwards in `backward`. Each
//! forward pass builds its own graph, so independent samples can be
//! evaluated on separate threads against the same parameters.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels;
use super::param::{Gradients, ParamId, ParamStore};
use super::scalar::{gemm, Scalar, Strided};
use super::tensor::shape_str;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Inference: nothing is differentiated.
    None,
    /// Only parameters flagged trainable.
    Trainable,
    /// Every parameter, frozen or not (gradient verification).
    All,
}

enum Op<T: Scalar> {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Affine(NodeId, T),
    Gelu(NodeId),
    Silu(NodeId),
    LayerNorm {
        x: NodeId,
        rstd: Vec<T>,
    },
    Softmax(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<T>,
    },
    Rope {
        x: NodeId,
        heads: usize,
        angles: Arc<RopeAngles<T>>,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Gather {
        x: NodeId,
        index: Arc<Vec<usize>>,
    },
    MeanRows(NodeId),
    Reshape(NodeId),
    Mse {
        x: NodeId,
        target: Vec<T>,
    },
    Sum(NodeId),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-row rotation cosines and sines, `pairs` entries per row, shared
/// by every head of that row.
#[derive(Debug, Clone)]
pub struct RopeAngles<T: Scalar> {
    pub pairs: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

pub struct Graph<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    mode: GradMode,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

fn dims2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(op, "rank-2 tensor", shape_str(s))),
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>, mode: GradMode) -> Self {
        Graph {
            store,
            mode,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.mode != GradMode::None,
        });
        Ok(id)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<NodeId> {
        self.push("constant", t, Op::Constant, false)
    }

    /// Graph node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let p = self.store.get(id);
        let needs = match self.mode {
            GradMode::None => false,
            GradMode::Trainable => p.trainable,
            GradMode::All => true,
        };
        let n = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Param(id),
            needs_grad: needs,
        });
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extent {k}"), k2));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            Strided::row_major(0, k),
            self.value(b).data(),
            Strided::row_major(0, n),
            T::zero(),
            &mut out,
            Strided::row_major(0, n),
        );
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), needs)
    }

    /// `x·w + b` with `w: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, shape_str(self.shape(a)), shape_str(self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(name, t, op, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_op(&mut self, name: &'static str, x: NodeId, r: NodeId, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<NodeId> {
        let n = self.value(x).last_dim();
        if self.value(r).numel() != n {
            return Err(Error::shape(name, format!("row of {n}"), shape_str(self.shape(r))));
        }
        let row = self.value(r).data();
        let vx = self.value(x);
        let mut data = Vec::with_capacity(vx.numel());
        for chunk in vx.data().chunks(n.max(1)) {
            data.extend(chunk.iter().zip(row).map(|(&a, &b)| f(a, b)));
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        let needs = self.needs(x) || self.needs(r);
        self.push(name, t, op, needs)
    }

    /// Adds a row vector to every last-axis row of `x`.
    pub fn add_row(&mut self, x: NodeId, r: NodeId) -> Result<NodeId> {
        self.row_op("add_row", x, r, |a, b| a + b, Op::AddRow(x, r))
    }

    /// Multiplies every last-axis row of `x` elementwise by a row vector.
    pub fn mul_row(&mut self, x: NodeId, r: NodeId) -> Result<NodeId> {
        self.row_op("mul_row", x, r, |a, b| a * b, Op::MulRow(x, r))
    }

    /// `mul·x + add`.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> Result<NodeId> {
        let (m, a) = (T::lit(mul), T::lit(add));
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| m * v + a).collect();
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        let needs = self.needs(x);
        self.push("affine", t, Op::Affine(x, m), needs)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.affine(x, s, 0.0)
    }

    fn unary(&mut self, name: &'static str, x: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        let needs = self.needs(x);
        self.push(name, t, op, needs)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("gelu", x, kernels::gelu, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("silu", x, kernels::silu, Op::Silu(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let n = vx.last_dim();
        if vx.shape().is_empty() || n < 2 {
            return Err(Error::shape("layer_norm", "last axis ≥ 2", shape_str(vx.shape())));
        }
        let mut out = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); vx.rows()];
        kernels::layer_norm_rows(vx.data(), n, T::lit(eps), &mut out, &mut rstd);
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        let needs = self.needs(x);
        self.push("layer_norm", t, Op::LayerNorm { x, rstd }, needs)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let n = vx.last_dim();
        if vx.shape().is_empty() || n == 0 {
            return Err(Error::shape(
                "softmax_rows",
                "non-empty last axis",
                shape_str(vx.shape()),
            ));
        }
        let mut out = vx.data().to_vec();
        kernels::softmax_rows_inplace(&mut out, n);
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        let needs = self.needs(x);
        self.push("softmax_rows", t, Op::Softmax(x), needs)
    }

    /// Scaled dot-product attention for `heads` heads laid side by side in
    /// the feature axis: per head `softmax(q kᵀ / √d) v`, heads concatenated.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (sq, d) = dims2("attention", self.value(q))?;
        let (sk, dk) = dims2("attention", self.value(k))?;
        let (sv, dv) = dims2("attention", self.value(v))?;
        if sk != sv {
            return Err(Error::shape("attention", format!("{sk} value rows"), sv));
        }
        if dk != d || dv != d {
            return Err(Error::shape(
                "attention",
                format!("feature dim {d}"),
                format!("{dk}/{dv}"),
            ));
        }
        if sk == 0 {
            return Err(Error::shape("attention", "at least one key", 0));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!("{heads} heads do not divide dim {d}")));
        }
        let hd = d / heads;
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let mut probs = vec![T::zero(); heads * sq * sk];
        let mut out = vec![T::zero(); sq * d];
        {
            let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for h in 0..heads {
                let p_off = h * sq * sk;
                gemm(
                    sq,
                    hd,
                    sk,
                    scale,
                    qd,
                    Strided::row_major(h * hd, d),
                    kd,
                    Strided::row_major(h * hd, d).transposed(),
                    T::zero(),
                    &mut probs,
                    Strided::row_major(p_off, sk),
                );
                kernels::softmax_rows_inplace(&mut probs[p_off..p_off + sq * sk], sk);
                gemm(
                    sq,
                    sk,
                    hd,
                    T::one(),
                    &probs,
                    Strided::row_major(p_off, sk),
                    vd,
                    Strided::row_major(h * hd, d),
                    T::zero(),
                    &mut out,
                    Strided::row_major(h * hd, d),
                );
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            "attention",
            Tensor::from_parts(vec![sq, d], out),
            Op::Attention { q, k, v, heads, probs },
            needs,
        )
    }

    /// Rotates adjacent feature pairs of every head by per-row angles.
    pub fn rope(&mut self, x: NodeId, heads: usize, angles: Arc<RopeAngles<T>>) -> Result<NodeId> {
        let (s, d) = dims2("rope", self.value(x))?;
        if heads == 0 || d % heads != 0 || (d / heads) != 2 * angles.pairs {
            return Err(Error::shape(
                "rope",
                format!("{heads} heads × {} features", 2 * angles.pairs),
                d,
            ));
        }
        if angles.cos.len() != s * angles.pairs || angles.sin.len() != s * angles.pairs {
            return Err(Error::shape(
                "rope",
                format!("{s} rows of angles"),
                angles.cos.len() / angles.pairs.max(1),
            ));
        }
        let mut out = self.value(x).data().to_vec();
        rotate_pairs(&mut out, d, heads, &angles, false);
        let needs = self.needs(x);
        self.push(
            "rope",
            Tensor::from_parts(vec![s, d], out),
            Op::Rope { x, heads, angles },
            needs,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows of nothing".into()));
        }
        let (_, d) = dims2("concat_rows", self.value(parts[0]))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, dp) = dims2("concat_rows", self.value(p))?;
            if dp != d {
                return Err(Error::shape("concat_rows", format!("width {d}"), dp));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat_rows",
            Tensor::from_parts(vec![rows, d], data),
            Op::ConcatRows(parts.to_vec()),
            needs,
        )
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, d) = dims2("slice_rows", self.value(x))?;
        if start + len > r {
            return Err(Error::shape("slice_rows", format!("rows ≤ {r}"), start + len));
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let needs = self.needs(x);
        self.push(
            "slice_rows",
            Tensor::from_parts(vec![len, d], data),
            Op::SliceRows { x, start },
            needs,
        )
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: NodeId, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<NodeId> {
        let n = self.value(x).numel();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", index.len(), shape_str(shape)));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index < {n}"), bad));
        }
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let needs = self.needs(x);
        self.push(
            "gather",
            Tensor::from_parts(shape.to_vec(), data),
            Op::Gather { x, index },
            needs,
        )
    }

    /// Contiguous range of columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, d) = dims2("slice_cols", self.value(x))?;
        if start + len > d {
            return Err(Error::shape("slice_cols", format!("cols ≤ {d}"), start + len));
        }
        let index: Vec<usize> = (0..r)
            .flat_map(|i| (start..start + len).map(move |j| i * d + j))
            .collect();
        self.gather(x, Arc::new(index), &[r, len])
    }

    /// Mean over rows: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = dims2("mean_rows", self.value(x))?;
        if m == 0 {
            return Err(Error::shape("mean_rows", "at least one row", 0));
        }
        let inv = T::lit(1.0 / m as f64);
        let mut out = vec![T::zero(); n];
        for row in self.value(x).data().chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        let needs = self.needs(x);
        self.push("mean_rows", Tensor::from_parts(vec![1, n], out), Op::MeanRows(x), needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        self.push("reshape", t, Op::Reshape(x), needs)
    }

    /// Mean squared error against a fixed target of the same shape.
    pub fn mse(&mut self, x: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape() != target.shape() {
            return Err(Error::shape("mse", shape_str(vx.shape()), shape_str(target.shape())));
        }
        let n = vx.numel().max(1) as f64;
        let sum = vx
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>();
        let needs = self.needs(x);
        self.push(
            "mse",
            Tensor::scalar(T::lit(sum / n)),
            Op::Mse {
                x,
                target: target.data().to_vec(),
            },
            needs,
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let needs = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Backpropagates from a single-element node and returns the gradient of
    /// every parameter that required one.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(
                "backward",
                "single-element root",
                shape_str(self.shape(root)),
            ));
        }
        let mut out = Gradients::empty(self.store.len());
        if !self.needs(root) {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, g, &mut grads, &mut out)?;
        }
        for (id, _) in self.store.iter() {
            if let Some(g) = out.get(id) {
                if !kernels::all_finite(g) {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(out)
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], id: NodeId) -> Option<&'a mut Vec<T>> {
        if !self.needs(id) {
            return None;
        }
        let n = self.value(id).numel();
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        match &node.op {
            Op::Constant => {}
            Op::Param(pid) => {
                *out.slot(*pid) = Some(g);
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims2("matmul", self.value(*a))?;
                let n = self.value(*b).shape()[1];
                if let Some(ga) = self.acc(grads, *a) {
                    // dA += dC · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g,
                        Strided::row_major(0, n),
                        self.value(*b).data(),
                        Strided::row_major(0, n).transposed(),
                        T::one(),
                        ga,
                        Strided::row_major(0, k),
                    );
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB += Aᵀ · dC
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*a).data(),
                        Strided::row_major(0, k).transposed(),
                        &g,
                        Strided::row_major(0, n),
                        T::one(),
                        gb,
                        Strided::row_major(0, n),
                    );
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, &g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    add_into(gb, &g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, &g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (x, &y) in gb.iter_mut().zip(&g) {
                        *x = *x - y;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &y), &bv) in ga.iter_mut().zip(&g).zip(self.value(*b).data()) {
                        *x = *x + y * bv;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, &y), &av) in gb.iter_mut().zip(&g).zip(self.value(*a).data()) {
                        *x = *x + y * av;
                    }
                }
            }
            Op::AddRow(x, r) => {
                let n = self.value(*x).last_dim();
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, &g);
                }
                if let Some(gr) = self.acc(grads, *r) {
                    for chunk in g.chunks(n.max(1)) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::MulRow(x, r) => {
                let n = self.value(*x).last_dim().max(1);
                let row = self.value(*r).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (gc, dc) in gx.chunks_mut(n).zip(g.chunks(n)) {
                        for ((a, &d), &rv) in gc.iter_mut().zip(dc).zip(row) {
                            *a = *a + d * rv;
                        }
                    }
                }
                if let Some(gr) = self.acc(grads, *r) {
                    for (dc, xc) in g.chunks(n).zip(self.value(*x).data().chunks(n)) {
                        for ((a, &d), &xv) in gr.iter_mut().zip(dc).zip(xc) {
                            *a = *a + d * xv;
                        }
                    }
                }
            }
            Op::Affine(x, m) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (a, &d) in gx.iter_mut().zip(&g) {
                        *a = *a + d * *m;
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &d), &xv) in gx.iter_mut().zip(&g).zip(self.value(*x).data()) {
                        *a = *a + d * kernels::gelu_grad(xv);
                    }
                }
            }
            Op::Silu(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &d), &xv) in gx.iter_mut().zip(&g).zip(self.value(*x).data()) {
                        *a = *a + d * kernels::silu_grad(xv);
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let n = node.value.last_dim();
                if let Some(gx) = self.acc(grads, *x) {
                    kernels::layer_norm_rows_backward(node.value.data(), rstd, &g, gx, n);
                }
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                if let Some(gx) = self.acc(grads, *x) {
                    kernels::softmax_rows_backward(node.value.data(), &g, gx, n);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, &g, grads);
            }
            Op::Rope { x, heads, angles } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let d = node.value.last_dim();
                    let mut tmp = g;
                    rotate_pairs(&mut tmp, d, *heads, angles, true);
                    add_into(gx, &tmp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let d = node.value.last_dim();
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(&mut gx[start * d..start * d + g.len()], &g);
                }
            }
            Op::Gather { x, index } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (&i, &d) in index.iter().zip(&g) {
                        gx[i] = gx[i] + d;
                    }
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = dims2("mean_rows", self.value(*x))?;
                let inv = T::lit(1.0 / m as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for row in gx.chunks_mut(n) {
                        for (a, &d) in row.iter_mut().zip(&g) {
                            *a = *a + d * inv;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, &g);
                }
            }
            Op::Mse { x, target } => {
                let n = target.len().max(1);
                let c = g[0] * T::lit(2.0 / n as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &xv), &tv) in gx.iter_mut().zip(self.value(*x).data()).zip(target) {
                        *a = *a + c * (xv - tv);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for a in gx.iter_mut() {
                        *a = *a + g[0];
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let sq = self.value(q).shape()[0];
        let d = self.value(q).shape()[1];
        let sk = self.value(k).shape()[0];
        let hd = d / heads;
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dp = vec![T::zero(); sq * sk];
        let mut ds = vec![T::zero(); sq * sk];
        let mut dq = self.needs(q).then(|| vec![T::zero(); sq * d]);
        let mut dk = self.needs(k).then(|| vec![T::zero(); sk * d]);
        let mut dv = self.needs(v).then(|| vec![T::zero(); sk * d]);
        for h in 0..heads {
            let p_off = h * sq * sk;
            let head = Strided::row_major(h * hd, d);
            if let Some(dv) = dv.as_mut() {
                // dV_h += P_hᵀ · dO_h
                gemm(
                    sk,
                    sq,
                    hd,
                    T::one(),
                    probs,
                    Strided::row_major(p_off, sk).transposed(),
                    g,
                    head,
                    T::one(),
                    dv,
                    head,
                );
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            // dP_h = dO_h · V_hᵀ
            gemm(
                sq,
                hd,
                sk,
                T::one(),
                g,
                head,
                vd,
                head.transposed(),
                T::zero(),
                &mut dp,
                Strided::row_major(0, sk),
            );
            ds.iter_mut().for_each(|x| *x = T::zero());
            kernels::softmax_rows_backward(&probs[p_off..p_off + sq * sk], &dp, &mut ds, sk);
            if let Some(dq) = dq.as_mut() {
                gemm(
                    sq,
                    sk,
                    hd,
                    scale,
                    &ds,
                    Strided::row_major(0, sk),
                    kd,
                    head,
                    T::one(),
                    dq,
                    head,
                );
            }
            if let Some(dk) = dk.as_mut() {
                gemm(
                    sk,
                    sq,
                    hd,
                    scale,
                    &ds,
                    Strided::row_major(0, sk).transposed(),
                    qd,
                    head,
                    T::one(),
                    dk,
                    head,
                );
            }
        }
        for (id, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(buf) = buf {
                if let Some(acc) = self.acc(grads, id) {
                    add_into(acc, &buf);
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}

fn rotate_pairs<T: Scalar>(data: &mut [T], d: usize, heads: usize, angles: &RopeAngles<T>, inverse: bool) {
    let hd = d / heads;
    let pairs = angles.pairs;
    for (r, row) in data.chunks_mut(d).enumerate() {
        let cos = &angles.cos[r * pairs..(r + 1) * pairs];
        let sin = &angles.sin[r * pairs..(r + 1) * pairs];
        for head in row.chunks_mut(hd) {
            for (j, pair) in head.chunks_mut(2).enumerate() {
                let (c, s) = (cos[j], if inverse { -sin[j] } else { sin[j] });
                let (a, b) = (pair[0], pair[1]);
                pair[0] = c * a - s * b;
                pair[1] = s * a + c * b;
            }
        }
    }
}
