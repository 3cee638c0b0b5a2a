//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients into
//! every node that (transitively) depends on a leaf created with
//! `requires_grad = true`. A graph is built fresh for every training step and
//! dropped or [`Graph::clear`]ed afterwards.

use std::borrow::Cow;

use super::kernels::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, sigmoid, softmax_row};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Normalization epsilon used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation kinds recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Linear,
    Add,
    Mul,
    AddScalar,
    Scale,
    Softmax,
    LayerNorm,
    Silu,
    Concat,
    Slice,
    Reshape,
    Transpose,
    Mse,
    Sum,
    Attention,
    ModulatedLayerNorm,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var, map: Option<Vec<usize>> },
    Mul { a: Var, b: Var, map: Option<Vec<usize>> },
    AddScalar(Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Vec<f64>, rstd: Vec<f64> },
    Silu(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    Mse { a: Var, b: Var },
    Sum(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    ModLayerNorm { x: Var, shift: Var, scale: Var, xhat: Vec<f64>, rstd: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Scale(..) => OpKind::Scale,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Silu(_) => OpKind::Silu,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Mse { .. } => OpKind::Mse,
            Op::Sum(_) => OpKind::Sum,
            Op::Attention { .. } => OpKind::Attention,
            Op::ModLayerNorm { .. } => OpKind::ModulatedLayerNorm,
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A tape. Leaves added with [`Graph::leaf_ref`] borrow their value for `'a`
/// instead of copying it.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

/// For each flat index of `a_shape`, the flat index of `b_shape` it reads when
/// `b` is broadcast (right-aligned, size-1 or missing axes repeat).
fn broadcast_map(op: &str, a_shape: &[usize], b_shape: &[usize]) -> Result<Vec<usize>> {
    if b_shape.len() > a_shape.len() {
        return Err(shape_err(op, format!("cannot broadcast {b_shape:?} into {a_shape:?}")));
    }
    let offset = a_shape.len() - b_shape.len();
    let mut b_strides = vec![0usize; a_shape.len()];
    let mut stride = 1;
    for (i, &bd) in b_shape.iter().enumerate().rev() {
        let ad = a_shape[offset + i];
        if bd == ad {
            b_strides[offset + i] = stride;
        } else if bd != 1 {
            return Err(shape_err(op, format!("cannot broadcast {b_shape:?} into {a_shape:?}")));
        }
        stride *= bd;
    }
    let n: usize = a_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; a_shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&b_strides).map(|(i, s)| i * s).sum());
        for d in (0..a_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < a_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(map)
}

/// Gradient buffer of `v`, created on first use; `None` for constants.
fn acc_of<'a>(nodes: &[Node<'_>], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

/// Row statistics of a layer norm over the last axis: normalized values and
/// reciprocal standard deviations.
fn normalize_rows(data: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = data.len() / n;
    let mut xhat = vec![0.0; data.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &data[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        for (o, v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    (xhat, rstd)
}

/// Backward of row normalization: adds `d loss / d x` given `d loss / d xhat`.
fn normalize_rows_back(dxhat: &[f64], xhat: &[f64], rstd: &[f64], n: usize, dx: &mut [f64]) {
    for (r, ((dr, xr), out)) in dxhat.chunks(n).zip(xhat.chunks(n)).zip(dx.chunks_mut(n)).enumerate() {
        let mean_d = dr.iter().sum::<f64>() / n as f64;
        let mean_dx = dr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        for j in 0..n {
            out[j] += rstd[r] * (dr[j] - mean_d - xr[j] * mean_dx);
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops the tape and all accumulated gradients.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    /// Drops every node recorded after the first `len`, keeping earlier ones
    /// (typically bound parameters) for reuse. Gradients are discarded.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf holding a borrowed value.
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    // ---------------------------------------------------------------- forward

    /// Matrix product over the last two axes. `b` is either a 2-D matrix shared
    /// by every leading index of `a`, or has the same rank-3 batch as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || shape_err("matmul", format!("incompatible shapes {sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(bad());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(bad());
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![0.0; out_shape.iter().product()];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if sb.len() == 2 {
            let rows = av.len() / k;
            gemm_acc(av, bv, &mut out, rows, k, n);
        } else if sb.len() == 3 && sa.len() == 3 && sa[0] == sb[0] {
            for bi in 0..sa[0] {
                gemm_acc(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        } else {
            return Err(bad());
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b }, rg))
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[in, out]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let fan_in = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != fan_in {
            return Err(shape_err("linear", format!("input {sx:?} against weight {sw:?}")));
        }
        let n = sw[1];
        if let Some(b) = b {
            let sbias = self.shape(b);
            if sbias != [n] {
                return Err(shape_err("linear", format!("bias {sbias:?} for output width {n}")));
            }
        }
        let rows = self.value(x).numel() / fan_in;
        let mut out = vec![0.0; rows * n];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                out[r * n..(r + 1) * n].copy_from_slice(bv);
            }
        }
        gemm_acc(self.value(x).data(), self.value(w).data(), &mut out, rows, fan_in, n);
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = n;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Linear { x, w, b }, rg))
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, mul: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let map = if sa == sb { None } else { Some(broadcast_map(name, &sa, &sb)?) };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<f64> = match &map {
            None if mul => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
            None => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
            Some(m) if mul => av.iter().zip(m).map(|(x, &j)| x * bv[j]).collect(),
            Some(m) => av.iter().zip(m).map(|(x, &j)| x + bv[j]).collect(),
        };
        let rg = self.rg(&[a, b]);
        let op = if mul { Op::Mul { a, b, map } } else { Op::Add { a, b, map } };
        Ok(self.push(Tensor::new(sa, out)?, op, rg))
    }

    /// Elementwise sum; `b` may broadcast into the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, false)
    }

    /// Elementwise product; `b` may broadcast into the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, true)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i] + c);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i] * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.last_dim();
        let mut out = vec![0.0; t.numel()];
        for (src, dst) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(src, dst);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Softmax(x), rg)
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies the
    /// optional learned `gamma` (scale) and `beta` (shift), both `[width]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        for p in [gamma, beta].into_iter().flatten() {
            let sp = self.shape(p);
            if sp != [n] {
                return Err(shape_err("layer_norm", format!("affine param {sp:?} for width {n}")));
            }
        }
        let (xhat, rstd) = normalize_rows(t.data(), n);
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gv = self.value(g).data();
            for row in out.chunks_mut(n) {
                for (o, s) in row.iter_mut().zip(gv) {
                    *o *= s;
                }
            }
        }
        if let Some(b) = beta {
            let bv = self.value(b).data();
            for row in out.chunks_mut(n) {
                for (o, s) in row.iter_mut().zip(bv) {
                    *o += s;
                }
            }
        }
        let shape = t.shape().to_vec();
        let mut deps = vec![x];
        deps.extend(gamma);
        deps.extend(beta);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Layer norm over the last axis of `x` `[B, T, w]` without affine
    /// parameters, followed by `· (1 + scale) + shift` with per-sample
    /// `shift`, `scale` of shape `[B, w]`.
    pub fn modulated_layer_norm(&mut self, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(shape_err("modulated_layer_norm", format!("input must be [B, T, w], got {sx:?}")));
        }
        let (b, t, n) = (sx[0], sx[1], sx[2]);
        for m in [shift, scale] {
            let sm = self.shape(m);
            if sm != [b, n] {
                return Err(shape_err("modulated_layer_norm", format!("modulation {sm:?} for input {sx:?}")));
            }
        }
        let (xhat, rstd) = normalize_rows(self.value(x).data(), n);
        let sh = self.value(shift).data();
        let sc = self.value(scale).data();
        let mut out = vec![0.0; xhat.len()];
        for bi in 0..b {
            for ti in 0..t {
                let o = (bi * t + ti) * n;
                for j in 0..n {
                    out[o + j] = xhat[o + j] * (1.0 + sc[bi * n + j]) + sh[bi * n + j];
                }
            }
        }
        let rg = self.rg(&[x, shift, scale]);
        Ok(self.push(Tensor::new(sx, out)?, Op::ModLayerNorm { x, shift, scale, xhat, rstd }, rg))
    }

    /// Multi-head scaled dot-product attention without a mask. `q` is
    /// `[B, Tq, w]`, `k` and `v` are `[B, Tk, w]`; head `h` uses columns
    /// `h·w/heads .. (h+1)·w/heads`. Returns `[B, Tq, w]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        let sv = self.shape(v).to_vec();
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] || heads == 0 || !sq[2].is_multiple_of(heads) {
            return Err(shape_err("attention", format!("q {sq:?}, k {sk:?}, v {sv:?} with {heads} heads")));
        }
        let (b, tq, w) = (sq[0], sq[1], sq[2]);
        let tk = sk[1];
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; b * heads * tq * tk];
        let mut out = vec![0.0; b * tq * w];
        let mut scores = vec![0.0; tk];
        for bi in 0..b {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..tq {
                    let qrow = &qv[(bi * tq + i) * w + c0..(bi * tq + i) * w + c0 + dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &kv[(bi * tk + j) * w + c0..(bi * tk + j) * w + c0 + dh];
                        *s = scale * qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>();
                    }
                    let p = &mut probs[((bi * heads + h) * tq + i) * tk..((bi * heads + h) * tq + i + 1) * tk];
                    softmax_row(&scores, p);
                    let orow = &mut out[(bi * tq + i) * w + c0..(bi * tq + i) * w + c0 + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vrow = &vv[(bi * tk + j) * w + c0..(bi * tk + j) * w + c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(Tensor::new(vec![b, tq, w], out)?, Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Attention probabilities saved by [`Graph::attention`], laid out
    /// `[B, heads, Tq, Tk]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| {
            let v = t.data()[i];
            v * sigmoid(v)
        });
        let rg = self.rg(&[x]);
        self.push(out, Op::Silu(x), rg)
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} against {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = around_axis(&first, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let axis = self.shape(inputs[0]).len() - 1;
        self.concat(inputs, axis)
    }

    /// `len` entries of `x` along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape_err("slice", format!("[{start}, {start}+{len}) on axis {axis} of {s:?}")));
        }
        let (outer, alen, inner) = around_axis(&s, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut out_shape = s;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let s = self.shape(x);
        if axis >= s.len() || sizes.iter().sum::<usize>() != s[axis] {
            return Err(shape_err("split", format!("sizes {sizes:?} on axis {axis} of {s:?}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn split_last(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let axis = self.shape(x).len() - 1;
        self.split(x, axis, sizes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err("transpose", format!("rank < 2: {s:?}")));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        for (src, dst) in data.chunks(m * n).zip(out.chunks_mut(m * n)) {
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut out_shape = s;
        let r = out_shape.len();
        out_shape.swap(r - 2, r - 1);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Transpose(x), rg))
    }

    /// Mean squared difference, as a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let n = ta.numel() as f64;
        let v = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Mse { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    // --------------------------------------------------------------- backward

    /// Accumulates `d loss / d node` for every node that requires a gradient.
    /// Previously accumulated gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Temporarily move the op out so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => self.back_matmul(*a, *b, g),
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w).to_vec();
                let (fan_in, n) = (sw[0], sw[1]);
                let rows = g.len() / n;
                let nodes = &self.nodes;
                let grads = &mut self.grads;
                if let Some(dx) = acc_of(nodes, grads, *x) {
                    gemm_a_bt_acc(g, nodes[w.0].value.data(), dx, rows, n, fan_in);
                }
                if let Some(dw) = acc_of(nodes, grads, *w) {
                    gemm_at_b_acc(nodes[x.0].value.data(), g, dw, rows, fan_in, n);
                }
                if let Some(b) = b {
                    if let Some(db) = acc_of(nodes, grads, *b) {
                        for row in g.chunks(n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b, map } => {
                if let Some(da) = self.acc(*a) {
                    for (d, v) in da.iter_mut().zip(g) {
                        *d += v;
                    }
                }
                if let Some(db) = self.acc(*b) {
                    match map {
                        None => db.iter_mut().zip(g).for_each(|(d, v)| *d += v),
                        Some(m) => m.iter().zip(g).for_each(|(&j, v)| db[j] += v),
                    }
                }
            }
            Op::Mul { a, b, map } => {
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let da = self.acc(*a).unwrap();
                    match map {
                        None => da.iter_mut().zip(g).zip(&bv).for_each(|((d, v), y)| *d += v * y),
                        Some(m) => {
                            da.iter_mut().zip(g).zip(m).for_each(|((d, v), &j)| *d += v * bv[j])
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let db = self.acc(*b).unwrap();
                    match map {
                        None => db.iter_mut().zip(g).zip(&av).for_each(|((d, v), x)| *d += v * x),
                        Some(m) => m.iter().zip(g).zip(&av).for_each(|((&j, v), x)| db[j] += v * x),
                    }
                }
            }
            Op::AddScalar(x) => {
                if let Some(dx) = self.acc(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                if let Some(dx) = self.acc(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
                }
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let n = self.nodes[i].value.last_dim();
                if let Some(dx) = self.acc(*x) {
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.nodes[i].value.last_dim();
                if let Some(b) = beta {
                    if let Some(db) = self.acc(*b) {
                        for row in g.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    }
                }
                let gamma_v = gamma.map(|gv| self.nodes[gv.0].value.data().to_vec());
                if let Some(gm) = gamma {
                    if let Some(dg) = self.acc(*gm) {
                        for (row, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                            for ((d, v), xh) in dg.iter_mut().zip(row).zip(xr) {
                                *d += v * xh;
                            }
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let dxhat: Vec<f64> = match &gamma_v {
                        Some(gv) => g.iter().enumerate().map(|(k, v)| v * gv[k % n]).collect(),
                        None => g.to_vec(),
                    };
                    let dx = acc_of(&self.nodes, &mut self.grads, *x).unwrap();
                    normalize_rows_back(&dxhat, xhat, rstd, n, dx);
                }
            }
            Op::Silu(x) => {
                if self.nodes[x.0].requires_grad {
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let dx = self.acc(*x).unwrap();
                    for ((d, v), xi) in dx.iter_mut().zip(g).zip(&xv) {
                        let s = sigmoid(*xi);
                        *d += v * s * (1.0 + xi * (1.0 - s));
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = around_axis(&out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    if let Some(dv) = self.acc(v) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            for k in 0..len * inner {
                                dv[dst + k] += g[src + k];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.nodes[x.0].value.shape().to_vec();
                let len = self.nodes[i].value.shape()[*axis];
                let (outer, alen, inner) = around_axis(&in_shape, *axis);
                if let Some(dx) = self.acc(*x) {
                    for o in 0..outer {
                        let base = o * alen * inner + start * inner;
                        for k in 0..len * inner {
                            dx[base + k] += g[o * len * inner + k];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.acc(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::Transpose(x) => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(dx) = self.acc(*x) {
                    for (src, dst) in g.chunks(m * n).zip(dx.chunks_mut(m * n)) {
                        for r in 0..m {
                            for c in 0..n {
                                dst[r * n + c] += src[c * m + r];
                            }
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                let c = 2.0 * g[0] / av.len() as f64;
                if let Some(da) = self.acc(*a) {
                    for ((d, x), y) in da.iter_mut().zip(&av).zip(&bv) {
                        *d += c * (x - y);
                    }
                }
                if let Some(db) = self.acc(*b) {
                    for ((d, x), y) in db.iter_mut().zip(&av).zip(&bv) {
                        *d -= c * (x - y);
                    }
                }
            }
            Op::ModLayerNorm { x, shift, scale, xhat, rstd } => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let (b, t, n) = (s[0], s[1], s[2]);
                let nodes = &self.nodes;
                let grads = &mut self.grads;
                if let Some(dsh) = acc_of(nodes, grads, *shift) {
                    for (r, row) in g.chunks(n).enumerate() {
                        let bi = r / t;
                        dsh[bi * n..(bi + 1) * n].iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
                if let Some(dsc) = acc_of(nodes, grads, *scale) {
                    for (r, (row, xr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let bi = r / t;
                        for ((d, v), xh) in dsc[bi * n..(bi + 1) * n].iter_mut().zip(row).zip(xr) {
                            *d += v * xh;
                        }
                    }
                }
                if nodes[x.0].requires_grad {
                    let sc = nodes[scale.0].value.data();
                    let mut dxhat = vec![0.0; g.len()];
                    for bi in 0..b {
                        for ti in 0..t {
                            let o = (bi * t + ti) * n;
                            for j in 0..n {
                                dxhat[o + j] = g[o + j] * (1.0 + sc[bi * n + j]);
                            }
                        }
                    }
                    let dx = acc_of(nodes, grads, *x).unwrap();
                    normalize_rows_back(&dxhat, xhat, rstd, n, dx);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let sq = self.nodes[q.0].value.shape().to_vec();
                let (b, tq, w) = (sq[0], sq[1], sq[2]);
                let tk = self.nodes[k.0].value.shape()[1];
                let heads = *heads;
                let dh = w / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let nodes = &self.nodes;
                let (qv, kv, vv) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dvv = vec![0.0; vv.len()];
                let mut ds = vec![0.0; tk];
                for bi in 0..b {
                    for h in 0..heads {
                        let c0 = h * dh;
                        for i in 0..tq {
                            let p = &probs[((bi * heads + h) * tq + i) * tk..((bi * heads + h) * tq + i + 1) * tk];
                            let go = &g[(bi * tq + i) * w + c0..(bi * tq + i) * w + c0 + dh];
                            // dP = dO · Vᵀ, and dV += Pᵀ · dO
                            for j in 0..tk {
                                let vo = (bi * tk + j) * w + c0;
                                ds[j] = go.iter().zip(&vv[vo..vo + dh]).map(|(a, c)| a * c).sum();
                                for (d, x) in dvv[vo..vo + dh].iter_mut().zip(go) {
                                    *d += p[j] * x;
                                }
                            }
                            let dot: f64 = ds.iter().zip(p).map(|(a, c)| a * c).sum();
                            let qo = (bi * tq + i) * w + c0;
                            for j in 0..tk {
                                let dsj = scale * p[j] * (ds[j] - dot);
                                if dsj == 0.0 {
                                    continue;
                                }
                                let ko = (bi * tk + j) * w + c0;
                                for c in 0..dh {
                                    dq[qo + c] += dsj * kv[ko + c];
                                    dk[ko + c] += dsj * qv[qo + c];
                                }
                            }
                        }
                    }
                }
                let grads = &mut self.grads;
                for (var, d) in [(q, dq), (k, dk), (v, dvv)] {
                    if let Some(acc) = acc_of(nodes, grads, *var) {
                        acc.iter_mut().zip(&d).for_each(|(a, x)| *a += x);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
        self.nodes[i].op = op;
    }

    fn back_matmul(&mut self, a: Var, b: Var, g: &[f64]) {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batched = sb.len() == 3;
        if self.nodes[a.0].requires_grad {
            let bv = self.nodes[b.0].value.data().to_vec();
            let da = self.acc(a).unwrap();
            if batched {
                for bi in 0..sa[0] {
                    gemm_a_bt_acc(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bv[bi * k * n..(bi + 1) * k * n],
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            } else {
                let rows = g.len() / n;
                gemm_a_bt_acc(g, &bv, da, rows, n, k);
            }
        }
        if self.nodes[b.0].requires_grad {
            let av = self.nodes[a.0].value.data().to_vec();
            let db = self.acc(b).unwrap();
            if batched {
                for bi in 0..sa[0] {
                    gemm_at_b_acc(
                        &av[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut db[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            } else {
                let rows = av.len() / k;
                gemm_at_b_acc(&av, g, db, rows, k, n);
            }
        }
    }
}
