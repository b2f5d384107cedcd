use std::collections::BTreeMap;

use super::kernels::{col2im, fn_to_nf, gemm, im2col, nf_to_fn, ConvGeom};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{NsaError, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, a_t: bool, b_t: bool },
    AddRowBias { x: Var, b: Var },
    AddChannelBias { x: Var, b: Var },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f32> },
    Relu(Var),
    AvgPool2d { x: Var, k: usize },
    GlobalAvgPool(Var),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    L2Normalize { x: Var, inner: usize, len: usize, denom: Vec<f64>, clamped: Vec<bool> },
    StopGrad,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Mean(Var),
    RowDot(Var, Var),
    SoftmaxXent { logits: Var, grad: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Records are stored in creation order, which is a topological order, so the
/// backward pass is a single reverse sweep. A graph built with
/// [`Graph::inference`] computes values without recording provenance.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
    params: BTreeMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(NsaError::dim(format!(
            "{what} expects rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
            params: BTreeMap::new(),
        }
    }

    /// A graph that records no provenance; `backward` yields nothing.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Graph::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = self.recording
            && match op {
                Op::Leaf | Op::StopGrad => false,
                Op::Param => true,
                _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
            };
        let op = if requires_grad || matches!(op, Op::Param) {
            op
        } else {
            Op::Leaf
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// A leaf bound to a trainable parameter; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, &[]);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, a_t: bool, b: Var, b_t: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank(av, 2, "matmul")?;
        expect_rank(bv, 2, "matmul")?;
        let (m, ka) = if a_t {
            (av.shape()[1], av.shape()[0])
        } else {
            (av.shape()[0], av.shape()[1])
        };
        let (kb, n) = if b_t {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if ka != kb {
            return Err(NsaError::dim(format!(
                "matmul inner dims {ka} vs {kb} (shapes {:?}, {:?})",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0f32; m * n];
        gemm(m, ka, n, av.data(), a_t, bv.data(), b_t, 0.0, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, a_t, b_t }, &[a, b]))
    }

    /// `x[m×n] + b[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        expect_rank(xv, 2, "add_row_bias")?;
        let n = xv.shape()[1];
        if bv.numel() != n {
            return Err(NsaError::dim(format!("bias of {} for width {n}", bv.numel())));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddRowBias { x, b }, &[x, b]))
    }

    /// `x[N×C×H×W] + b[C]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        expect_rank(xv, 4, "add_channel_bias")?;
        let c = xv.shape()[1];
        let hw = xv.shape()[2] * xv.shape()[3];
        if bv.numel() != c {
            return Err(NsaError::dim(format!("bias of {} for {c} channels", bv.numel())));
        }
        let mut out = xv.clone();
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let bb = bv.data()[i % c];
            plane.iter_mut().for_each(|v| *v += bb);
        }
        Ok(self.push(out, Op::AddChannelBias { x, b }, &[x, b]))
    }

    /// Cross-correlation of `x[N×C×H×W]` with `w[F×C×k×k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        expect_rank(xv, 4, "conv2d input")?;
        expect_rank(wv, 4, "conv2d kernel")?;
        if stride == 0 {
            return Err(NsaError::config("conv2d stride must be positive"));
        }
        let [n, c, h, wd] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let [f, wc, kh, kw] = [wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]];
        if kh != kw {
            return Err(NsaError::config("conv2d kernels must be square"));
        }
        if wc != c {
            return Err(NsaError::dim(format!("kernel expects {wc} channels, input has {c}")));
        }
        if kh > h + 2 * pad || kh > wd + 2 * pad {
            return Err(NsaError::config(format!(
                "kernel {kh} larger than padded input {h}x{wd} (pad {pad})"
            )));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            f,
            k: kh,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kh) / stride + 1,
        };
        let cols = im2col(xv.data(), &geom);
        let np = geom.positions();
        let mut flat = vec![0.0f32; f * np];
        gemm(f, geom.patch(), np, wv.data(), false, &cols, false, 0.0, &mut flat);
        let out = fn_to_nf(&flat, f, n, geom.ho * geom.wo);
        let t = Tensor::new(vec![n, f, geom.ho, geom.wo], out)?;
        let keep = self.recording && (self.requires_grad(x) || self.requires_grad(w));
        let cols = if keep { cols } else { Vec::new() };
        Ok(self.push(t, Op::Conv2d { x, w, geom, cols }, &[x, w]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Non-overlapping `k×k` average pooling (stride `k`, floor semantics).
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        expect_rank(xv, 4, "avg_pool2d")?;
        let [n, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        if k == 0 || k > h || k > w {
            return Err(NsaError::config(format!("pool size {k} invalid for {h}x{w}")));
        }
        let (ho, wo) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0f32; n * c * ho * wo];
        for (p, dst) in out.chunks_mut(ho * wo).enumerate() {
            let src = &xv.data()[p * h * w..][..h * w];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut s = 0.0f64;
                    for i in 0..k {
                        for j in 0..k {
                            s += src[(oh * k + i) * w + ow * k + j] as f64;
                        }
                    }
                    dst[oh * wo + ow] = (s * inv) as f32;
                }
            }
        }
        let t = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(t, Op::AvgPool2d { x, k }, &[x]))
    }

    /// `[N×C×H×W]` → `[N×C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_rank(xv, 4, "global_avg_pool")?;
        let [n, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let hw = h * w;
        let out: Vec<f32> = xv
            .data()
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let t = Tensor::new(vec![n, c], out)?;
        Ok(self.push(t, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Flattens everything after the leading dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s.first().copied().unwrap_or(1);
        let rest: usize = s.iter().skip(1).product();
        self.reshape(x, &[n, rest])
    }

    /// Rows `start..end` along the leading dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let rows = xv.shape().first().copied().unwrap_or(0);
        if start > end || end > rows {
            return Err(NsaError::dim(format!("row slice {start}..{end} of {rows}")));
        }
        let width = xv.numel() / rows.max(1);
        let data = xv.data()[start * width..end * width].to_vec();
        let mut shape = xv.shape().to_vec();
        shape[0] = end - start;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| NsaError::dim("concat of zero tensors"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(NsaError::dim(format!(
                    "concat of {:?} with trailing dims {tail:?}",
                    v.shape()
                )));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// `v / max(‖v‖₂, eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(NsaError::config("l2_normalize eps must be positive"));
        }
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(NsaError::dim(format!("axis {axis} for shape {:?}", xv.shape())));
        }
        let len = xv.shape()[axis];
        let inner: usize = xv.shape()[axis + 1..].iter().product();
        let outer: usize = xv.shape()[..axis].iter().product();
        let mut out = xv.clone();
        let mut denom = Vec::with_capacity(outer * inner);
        let mut clamped = Vec::with_capacity(outer * inner);
        let data = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let norm = (0..len)
                    .map(|a| {
                        let v = data[base + a * inner] as f64;
                        v * v
                    })
                    .sum::<f64>()
                    .sqrt();
                let d = norm.max(eps);
                for a in 0..len {
                    let idx = base + a * inner;
                    data[idx] = (data[idx] as f64 / d) as f32;
                }
                denom.push(d);
                clamped.push(norm <= eps);
            }
        }
        Ok(self.push(
            out,
            Op::L2Normalize {
                x,
                inner,
                len,
                denom,
                clamped,
            },
            &[x],
        ))
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::StopGrad, &[x])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NsaError::dim(format!(
                "{what}: shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = f(*o, y);
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: f64 = xv.data().iter().map(|&v| v as f64).sum();
        let m = s / xv.numel().max(1) as f64;
        self.push(Tensor::scalar(m as f32), Op::Mean(x), &[x])
    }

    /// Per-row dot product of two `[N×d]` tensors → `[N]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let av = self.value(a);
        expect_rank(av, 2, "row_dot")?;
        let d = av.shape()[1];
        let out: Vec<f32> = av
            .data()
            .chunks(d)
            .zip(self.value(b).data().chunks(d))
            .map(|(x, y)| {
                x.iter()
                    .zip(y)
                    .map(|(&p, &q)| p as f64 * q as f64)
                    .sum::<f64>() as f32
            })
            .collect();
        let t = Tensor::new(vec![av.shape()[0]], out)?;
        Ok(self.push(t, Op::RowDot(a, b), &[a, b]))
    }

    /// Mean softmax cross-entropy over the rows of `logits[R×C]` that carry a
    /// target. Entries flagged in `exclude` (row-major `R×C`) are removed from
    /// the softmax support.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        exclude: Option<&[bool]>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        expect_rank(lv, 2, "softmax_cross_entropy")?;
        let (r, c) = (lv.shape()[0], lv.shape()[1]);
        if targets.len() != r {
            return Err(NsaError::dim(format!("{} targets for {r} rows", targets.len())));
        }
        if let Some(ex) = exclude {
            if ex.len() != r * c {
                return Err(NsaError::dim("exclusion mask size mismatch"));
            }
        }
        let active = targets.iter().filter(|t| t.is_some()).count();
        if active == 0 {
            return Err(NsaError::config("softmax_cross_entropy without any target"));
        }
        let mut grad = vec![0.0f32; r * c];
        let mut total = 0.0f64;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= c || exclude.is_some_and(|ex| ex[i * c + t]) {
                return Err(NsaError::config(format!("row {i}: invalid target {t}")));
            }
            let row = &lv.data()[i * c..(i + 1) * c];
            let keep = |j: usize| exclude.is_none_or(|ex| !ex[i * c + j]);
            let max = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j] as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c)
                .filter(|&j| keep(j))
                .map(|j| (row[j] as f64 - max).exp())
                .sum();
            let lse = max + z.ln();
            total += lse - row[t] as f64;
            for j in (0..c).filter(|&j| keep(j)) {
                let p = (row[j] as f64 - lse).exp();
                grad[i * c + j] = ((p - if j == t { 1.0 } else { 0.0 }) / active as f64) as f32;
            }
        }
        let loss = Tensor::scalar((total / active as f64) as f32);
        Ok(self.push(loss, Op::SoftmaxXent { logits, grad }, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(NsaError::dim(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f32>) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape matches its node")
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param | Op::StopGrad => {}
            &Op::MatMul { a, b, a_t, b_t } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let k = if a_t { av.shape()[0] } else { av.shape()[1] };
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0f32; m * k];
                    if a_t {
                        gemm(k, n, m, bv.data(), b_t, g.data(), true, 0.0, &mut da);
                    } else {
                        gemm(m, n, k, g.data(), false, bv.data(), !b_t, 0.0, &mut da);
                    }
                    self.accumulate(grads, a, self.like(a, da));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0f32; k * n];
                    if b_t {
                        gemm(n, m, k, g.data(), true, av.data(), a_t, 0.0, &mut db);
                    } else {
                        gemm(k, m, n, av.data(), !a_t, g.data(), false, 0.0, &mut db);
                    }
                    self.accumulate(grads, b, self.like(b, db));
                }
            }
            &Op::AddRowBias { x, b } => {
                self.accumulate(grads, x, g.clone());
                let n = self.value(b).numel();
                let mut db = vec![0.0f64; n];
                for row in g.data().chunks(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v as f64;
                    }
                }
                let db = db.into_iter().map(|v| v as f32).collect();
                self.accumulate(grads, b, self.like(b, db));
            }
            &Op::AddChannelBias { x, b } => {
                self.accumulate(grads, x, g.clone());
                let s = g.shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut db = vec![0.0f64; c];
                for (p, plane) in g.data().chunks(hw).enumerate() {
                    db[p % c] += plane.iter().map(|&v| v as f64).sum::<f64>();
                }
                let db = db.into_iter().map(|v| v as f32).collect();
                self.accumulate(grads, b, self.like(b, db));
            }
            Op::Conv2d { x, w, geom, cols } => {
                let hw = geom.ho * geom.wo;
                let dflat = nf_to_fn(g.data(), geom.f, geom.n, hw);
                let np = geom.positions();
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![0.0f32; geom.f * geom.patch()];
                    gemm(geom.f, np, geom.patch(), &dflat, false, cols, true, 0.0, &mut dw);
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![0.0f32; geom.patch() * np];
                    let wv = self.value(*w);
                    gemm(geom.patch(), geom.f, np, wv.data(), true, &dflat, false, 0.0, &mut dcols);
                    let dx = col2im(&dcols, geom);
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
            }
            &Op::Relu(x) => {
                let dx = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| if y > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, self.like(x, dx));
            }
            &Op::AvgPool2d { x, k } => {
                let s = self.shape(x);
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                let inv = 1.0 / (k * k) as f32;
                let mut dx = vec![0.0f32; self.value(x).numel()];
                for (p, src) in g.data().chunks(ho * wo).enumerate() {
                    let dst = &mut dx[p * h * w..][..h * w];
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let v = src[oh * wo + ow] * inv;
                            for a in 0..k {
                                for b in 0..k {
                                    dst[(oh * k + a) * w + ow * k + b] += v;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, x, self.like(x, dx));
            }
            &Op::GlobalAvgPool(x) => {
                let s = self.shape(x);
                let hw = s[2] * s[3];
                let inv = 1.0 / hw as f32;
                let dx = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, hw))
                    .collect();
                self.accumulate(grads, x, self.like(x, dx));
            }
            &Op::Reshape(x) => {
                self.accumulate(grads, x, self.like(x, g.data().to_vec()));
            }
            &Op::SliceRows { x, start } => {
                let xv = self.value(x);
                let width = xv.numel() / xv.shape()[0].max(1);
                let mut dx = vec![0.0f32; xv.numel()];
                dx[start * width..start * width + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, x, self.like(x, dx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let dp = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    self.accumulate(grads, p, self.like(p, dp));
                }
            }
            Op::L2Normalize {
                x,
                inner,
                len,
                denom,
                clamped,
            } => {
                let (inner, len) = (*inner, *len);
                let y = node.value.data();
                let gd = g.data();
                let mut dx = vec![0.0f32; gd.len()];
                for (gi, (&d, &cl)) in denom.iter().zip(clamped).enumerate() {
                    let (o, i) = (gi / inner, gi % inner);
                    let base = o * len * inner + i;
                    let idx = |a: usize| base + a * inner;
                    if cl {
                        for a in 0..len {
                            dx[idx(a)] = (gd[idx(a)] as f64 / d) as f32;
                        }
                    } else {
                        let proj: f64 = (0..len).map(|a| y[idx(a)] as f64 * gd[idx(a)] as f64).sum();
                        for a in 0..len {
                            dx[idx(a)] = ((gd[idx(a)] as f64 - y[idx(a)] as f64 * proj) / d) as f32;
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                let neg = g.data().iter().map(|v| -v).collect();
                self.accumulate(grads, b, self.like(b, neg));
            }
            &Op::Mul(a, b) => {
                let da = g.data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, a, self.like(a, da));
                self.accumulate(grads, b, self.like(b, db));
            }
            &Op::Scale(x, c) => {
                let dx = g.data().iter().map(|v| v * c).collect();
                self.accumulate(grads, x, self.like(x, dx));
            }
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, self.like(x, vec![g.item(); n]));
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                let v = g.item() / n as f32;
                self.accumulate(grads, x, self.like(x, vec![v; n]));
            }
            &Op::RowDot(a, b) => {
                let d = self.shape(a)[1];
                let mut da = vec![0.0f32; self.value(a).numel()];
                let mut db = vec![0.0f32; da.len()];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                for (r, &gr) in g.data().iter().enumerate() {
                    for j in 0..d {
                        da[r * d + j] = gr * bv[r * d + j];
                        db[r * d + j] = gr * av[r * d + j];
                    }
                }
                self.accumulate(grads, a, self.like(a, da));
                self.accumulate(grads, b, self.like(b, db));
            }
            Op::SoftmaxXent { logits, grad } => {
                let s = g.item();
                let dl = grad.iter().map(|v| v * s).collect();
                self.accumulate(grads, *logits, self.like(*logits, dl));
            }
        }
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// One gradient per parameter bound on the graph. Parameters the loss does
    /// not reach (e.g. behind a stop-grad) get an exact zero tensor.
    pub fn param_grads(&self, store: &ParamStore) -> ParamGrads {
        let grads = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
                (id, g)
            })
            .collect();
        ParamGrads { grads }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: BTreeMap<ParamId, Tensor>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }

    /// Flattened gradient in parameter order.
    pub fn flat(&self) -> Vec<f32> {
        self.grads.values().flat_map(|t| t.data().iter().copied()).collect()
    }
}
