//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only and records every operation
//! as a node. [`Graph::backward`] walks the tape in reverse and returns
//! gradients shaped exactly like the store. Ops are coarse (fused attention,
//! layer norm, softmax cross-entropy) so the tape stays short and the
//! backward rules are closed-form.

use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{dot, Tensor};
use rand::Rng as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Packing of a `(batch · seq_len) × d_model` activation for self-attention.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq_len: usize,
    pub n_heads: usize,
    /// `true` where the key position holds a real token.
    pub key_mask: Vec<bool>,
}

enum Op<S> {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, S),
    Gelu(NodeId),
    Tanh(NodeId),
    Mask(NodeId, Vec<S>),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor<S>, rstd: Vec<S> },
    Rows { src: NodeId, idx: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    Attention { q: NodeId, k: NodeId, v: NodeId, layout: AttentionLayout, probs: Vec<S> },
    RowBilinear { x: NodeId, y: NodeId, u: NodeId },
    SoftmaxCe { logits: NodeId, targets: Vec<Option<usize>>, probs: Tensor<S>, count: usize },
}

struct Node<S> {
    op: Op<S>,
    value: Option<Tensor<S>>,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let inner = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    half * x * (S::one() + inner.tanh())
}

#[inline]
fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * x * x)
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (Op::Param(p), _) => self.params.get(*p),
            (_, Some(v)) => v,
            (_, None) => unreachable!("non-parameter node without value"),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value: Some(value), needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf. No gradient flows into it.
    pub fn input(&mut self, t: Tensor<S>) -> NodeId {
        self.push(Op::Input, t, false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node { op: Op::Param(id), value: None, needs_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), v, ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMulNt(a, b), v, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, ng)
    }

    /// `x + 1·b` where `b` is a `1 × cols` row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1, "add_row expects a row vector");
        assert_eq!(bias.cols(), self.value(x).cols(), "add_row width mismatch");
        let mut v = self.value(x).clone();
        let cols = v.cols();
        if cols > 0 {
            for row in v.data_mut().chunks_exact_mut(cols) {
                for (o, &bv) in row.iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(Op::AddRow(x, b), v, ng)
    }

    /// `x · w + b`, the common dense layer.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, x: NodeId, k: S) -> NodeId {
        let v = self.value(x).map(|e| e * k);
        let ng = self.needs(x);
        self.push(Op::Scale(x, k), v, ng)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        let ng = self.needs(x);
        self.push(Op::Gelu(x), v, ng)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(S::tanh);
        let ng = self.needs(x);
        self.push(Op::Tanh(x), v, ng)
    }

    /// Inverted dropout: zero each element with probability `p`, scale the
    /// survivors by `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut Rng) -> NodeId {
        if p <= 0.0 {
            return x;
        }
        let keep = S::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<S> = (0..n).map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep }).collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = Tensor::from_vec(src.rows(), src.cols(), data);
        let ng = self.needs(x);
        self.push(Op::Mask(x, mask), v, ng)
    }

    /// Row-wise layer normalization with learned scale and offset.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        assert_eq!(g.len(), cols, "layer norm scale width");
        assert_eq!(b.len(), cols, "layer norm offset width");
        let eps = S::of(LAYER_NORM_EPS);
        let n = S::of(cols as f64);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().fold(S::zero(), |a, &e| a + e) / n;
            let var = row.iter().fold(S::zero(), |a, &e| a + (e - mean) * (e - mean)) / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd.push(rs);
            let hrow = xhat.row_mut(r);
            for (h, &e) in hrow.iter_mut().zip(row) {
                *h = (e - mean) * rs;
            }
            let hrow = xhat.row(r).to_vec();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = hrow[c] * g.data()[c] + b.data()[c];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Op::LayerNorm { x, gamma, beta, xhat, rstd }, out, ng)
    }

    /// Gather rows of `src`; also serves as the embedding lookup.
    pub fn rows(&mut self, src: NodeId, idx: Vec<usize>) -> NodeId {
        let v = self.value(src).select_rows(&idx);
        let ng = self.needs(src);
        self.push(Op::Rows { src, idx }, v, ng)
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatRows(parts), Tensor::from_vec(rows, cols, data), ng)
    }

    /// Multi-head scaled dot-product self-attention over packed sequences.
    /// Keys at masked positions receive zero probability.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, layout: AttentionLayout) -> NodeId {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), &layout);
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(Op::Attention { q, k, v, layout, probs }, out, ng)
    }

    /// Attention probabilities recorded by an attention node, laid out as
    /// `[batch][head][query][key]`.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[S]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `out[i, l] = x_iᵀ · U_l · y_i` where row `l` of `u` holds `U_l`
    /// flattened row-major as `p × q`.
    pub fn row_bilinear(&mut self, x: NodeId, y: NodeId, u: NodeId) -> NodeId {
        let (xv, yv, uv) = (self.value(x), self.value(y), self.value(u));
        let (n, p) = xv.shape();
        let q = yv.cols();
        assert_eq!(yv.rows(), n, "row_bilinear row mismatch");
        assert_eq!(uv.cols(), p * q, "row_bilinear form size");
        let labels = uv.rows();
        let mut out = Tensor::zeros(n, labels);
        for i in 0..n {
            let xi = xv.row(i);
            let yi = yv.row(i);
            for l in 0..labels {
                let ul = uv.row(l);
                let mut acc = S::zero();
                for (a, &xa) in xi.iter().enumerate() {
                    acc += xa * dot(&ul[a * q..(a + 1) * q], yi);
                }
                out.set(i, l, acc);
            }
        }
        let ng = self.needs(x) || self.needs(y) || self.needs(u);
        self.push(Op::RowBilinear { x, y, u }, out, ng)
    }

    /// Mean softmax cross-entropy over rows carrying a target. `forbid`
    /// optionally removes one column per row from the softmax support.
    /// Produces a `1 × 1` node.
    pub fn softmax_ce(
        &mut self,
        logits: NodeId,
        targets: Vec<Option<usize>>,
        forbid: Option<Vec<Option<usize>>>,
    ) -> NodeId {
        let z = self.value(logits);
        let (rows, cols) = z.shape();
        assert_eq!(targets.len(), rows, "one target slot per logit row");
        let forbid = forbid.unwrap_or_else(|| vec![None; rows]);
        assert_eq!(forbid.len(), rows, "one forbid slot per logit row");
        let mut probs = Tensor::zeros(rows, cols);
        let mut total = S::zero();
        let mut count = 0usize;
        for r in 0..rows {
            let Some(t) = targets[r] else { continue };
            assert!(t < cols && forbid[r] != Some(t), "target outside softmax support");
            let row = z.row(r);
            let allowed = |c: usize| forbid[r] != Some(c);
            let mut max = S::neg_infinity();
            for (c, &v) in row.iter().enumerate() {
                if allowed(c) && v > max {
                    max = v;
                }
            }
            let mut sum = S::zero();
            let prow = probs.row_mut(r);
            for (c, &v) in row.iter().enumerate() {
                if allowed(c) {
                    let e = (v - max).exp();
                    prow[c] = e;
                    sum += e;
                }
            }
            for p in prow.iter_mut() {
                *p /= sum;
            }
            total += max + sum.ln() - row[t];
            count += 1;
        }
        assert!(count > 0, "cross-entropy over zero targets");
        let loss = Tensor::from_vec(1, 1, vec![total / S::of(count as f64)]);
        let ng = self.needs(logits);
        self.push(Op::SoftmaxCe { logits, targets, probs, count }, loss, ng)
    }

    /// Reverse sweep from a scalar node. Returns gradients for every
    /// parameter in the bound store (zeros for untouched parameters).
    pub fn backward(&self, loss: NodeId) -> ParamStore<S> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut param_grads = self.params.zeros_like();
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, S::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(p) => param_grads.get_mut(*p).add_assign(&g),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.matmul_nt(self.value(*b)));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, self.value(*a).matmul_tn(&g));
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.matmul(self.value(*b)));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.matmul_tn(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(x, b) => {
                    if self.needs(*b) {
                        let cols = g.cols();
                        let mut db = Tensor::zeros(1, cols);
                        for r in 0..g.rows() {
                            for (o, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    accumulate(&mut grads, *x, g.map(|e| e * k));
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let data = g.data().iter().zip(xv.data()).map(|(&d, &v)| d * gelu_grad(v)).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(g.rows(), g.cols(), data));
                }
                Op::Tanh(x) => {
                    let y = self.nodes[i].value.as_ref().expect("tanh value");
                    let data =
                        g.data().iter().zip(y.data()).map(|(&d, &t)| d * (S::one() - t * t)).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(g.rows(), g.cols(), data));
                }
                Op::Mask(x, mask) => {
                    let data = g.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(g.rows(), g.cols(), data));
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let (rows, cols) = g.shape();
                    let gam = self.value(*gamma);
                    if self.needs(*gamma) || self.needs(*beta) {
                        let mut dg = Tensor::zeros(1, cols);
                        let mut dbeta = Tensor::zeros(1, cols);
                        for r in 0..rows {
                            let (gr, hr) = (g.row(r), xhat.row(r));
                            for c in 0..cols {
                                dg.data_mut()[c] += gr[c] * hr[c];
                                dbeta.data_mut()[c] += gr[c];
                            }
                        }
                        if self.needs(*gamma) {
                            accumulate(&mut grads, *gamma, reshape_like(dg, gam));
                        }
                        if self.needs(*beta) {
                            let bshape = self.value(*beta);
                            accumulate(&mut grads, *beta, reshape_like(dbeta, bshape));
                        }
                    }
                    if self.needs(*x) {
                        let n = S::of(cols as f64);
                        let mut dx = Tensor::zeros(rows, cols);
                        let mut dxhat = vec![S::zero(); cols];
                        for (r, &rs) in rstd.iter().enumerate().take(rows) {
                            let (gr, hr) = (g.row(r), xhat.row(r));
                            let mut m1 = S::zero();
                            let mut m2 = S::zero();
                            for c in 0..cols {
                                dxhat[c] = gr[c] * gam.data()[c];
                                m1 += dxhat[c];
                                m2 += dxhat[c] * hr[c];
                            }
                            m1 /= n;
                            m2 /= n;
                            for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                                *o = rs * (dxhat[c] - m1 - hr[c] * m2);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Rows { src, idx } => {
                    let s = self.value(*src);
                    let mut ds = Tensor::zeros(s.rows(), s.cols());
                    for (o, &r) in idx.iter().enumerate() {
                        for (d, &v) in ds.row_mut(r).iter_mut().zip(g.row(o)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *src, ds);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.needs(p) {
                            let idx: Vec<usize> = (offset..offset + rows).collect();
                            accumulate(&mut grads, p, g.select_rows(&idx));
                        }
                        offset += rows;
                    }
                }
                Op::Attention { q, k, v, layout, probs } => {
                    let (dq, dk, dv) =
                        attention_backward(&g, self.value(*q), self.value(*k), self.value(*v), layout, probs);
                    if self.needs(*q) {
                        accumulate(&mut grads, *q, dq);
                    }
                    if self.needs(*k) {
                        accumulate(&mut grads, *k, dk);
                    }
                    if self.needs(*v) {
                        accumulate(&mut grads, *v, dv);
                    }
                }
                Op::RowBilinear { x, y, u } => {
                    let (xv, yv, uv) = (self.value(*x), self.value(*y), self.value(*u));
                    let (n, p) = xv.shape();
                    let q = yv.cols();
                    let labels = uv.rows();
                    let mut dx = Tensor::zeros(n, p);
                    let mut dy = Tensor::zeros(n, q);
                    let mut du = Tensor::zeros(labels, p * q);
                    for i in 0..n {
                        let (xi, yi) = (xv.row(i), yv.row(i));
                        for l in 0..labels {
                            let gl = g.get(i, l);
                            let ul = uv.row(l);
                            for a in 0..p {
                                let urow = &ul[a * q..(a + 1) * q];
                                dx.data_mut()[i * p + a] += gl * dot(urow, yi);
                                let gx = gl * xi[a];
                                for b in 0..q {
                                    dy.data_mut()[i * q + b] += gx * urow[b];
                                    du.data_mut()[l * p * q + a * q + b] += gx * yi[b];
                                }
                            }
                        }
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*y) {
                        accumulate(&mut grads, *y, dy);
                    }
                    if self.needs(*u) {
                        accumulate(&mut grads, *u, du);
                    }
                }
                Op::SoftmaxCe { logits, targets, probs, count } => {
                    let scale = g.get(0, 0) / S::of(*count as f64);
                    let mut dz = Tensor::zeros(probs.rows(), probs.cols());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for (o, &p) in dz.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *o = p * scale;
                        }
                        let cur = dz.get(r, t);
                        dz.set(r, t, cur - scale);
                    }
                    accumulate(&mut grads, *logits, dz);
                }
            }
        }
        param_grads
    }
}

fn reshape_like<S: Scalar>(t: Tensor<S>, like: &Tensor<S>) -> Tensor<S> {
    Tensor::from_vec(like.rows(), like.cols(), t.into_vec())
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: NodeId, t: Tensor<S>) {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn attention_forward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    layout: &AttentionLayout,
) -> (Tensor<S>, Vec<S>) {
    let (b, l, h) = (layout.batch, layout.seq_len, layout.n_heads);
    let d = q.cols();
    assert_eq!(q.rows(), b * l, "attention rows must equal batch*seq_len");
    assert_eq!(layout.key_mask.len(), b * l, "key mask size");
    assert_eq!(d % h, 0, "model width divisible by heads");
    let dh = d / h;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let mut out = Tensor::zeros(b * l, d);
    let mut probs = vec![S::zero(); b * h * l * l];
    for bi in 0..b {
        let base = bi * l;
        let mask = &layout.key_mask[base..base + l];
        for hi in 0..h {
            let cs = hi * dh..(hi + 1) * dh;
            for i in 0..l {
                let qi = &q.row(base + i)[cs.clone()];
                let p = &mut probs[((bi * h + hi) * l + i) * l..][..l];
                let mut max = S::neg_infinity();
                for j in 0..l {
                    if mask[j] {
                        let s = dot(qi, &k.row(base + j)[cs.clone()]) * scale;
                        p[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                }
                if max == S::neg_infinity() {
                    continue;
                }
                let mut sum = S::zero();
                for j in 0..l {
                    if mask[j] {
                        let e = (p[j] - max).exp();
                        p[j] = e;
                        sum += e;
                    }
                }
                let orow = &mut out.row_mut(base + i)[cs.clone()];
                for j in 0..l {
                    if mask[j] {
                        p[j] /= sum;
                        let pj = p[j];
                        for (o, &vv) in orow.iter_mut().zip(&v.row(base + j)[cs.clone()]) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward<S: Scalar>(
    g: &Tensor<S>,
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    layout: &AttentionLayout,
    probs: &[S],
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (b, l, h) = (layout.batch, layout.seq_len, layout.n_heads);
    let d = q.cols();
    let dh = d / h;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let mut dq = Tensor::zeros(b * l, d);
    let mut dk = Tensor::zeros(b * l, d);
    let mut dv = Tensor::zeros(b * l, d);
    let mut dp = vec![S::zero(); l];
    for bi in 0..b {
        let base = bi * l;
        let mask = &layout.key_mask[base..base + l];
        for hi in 0..h {
            let cs = hi * dh..(hi + 1) * dh;
            for i in 0..l {
                let p = &probs[((bi * h + hi) * l + i) * l..][..l];
                let gi = &g.row(base + i)[cs.clone()];
                let mut weighted = S::zero();
                for j in 0..l {
                    if mask[j] {
                        dp[j] = dot(gi, &v.row(base + j)[cs.clone()]);
                        weighted += p[j] * dp[j];
                    }
                }
                let qi = q.row(base + i)[cs.clone()].to_vec();
                for j in 0..l {
                    if !mask[j] {
                        continue;
                    }
                    let pj = p[j];
                    for (o, &gv) in dv.row_mut(base + j)[cs.clone()].iter_mut().zip(gi) {
                        *o += pj * gv;
                    }
                    let ds = pj * (dp[j] - weighted) * scale;
                    let kj = &k.row(base + j)[cs.clone()];
                    for (o, &kv) in dq.row_mut(base + i)[cs.clone()].iter_mut().zip(kj) {
                        *o += ds * kv;
                    }
                    for (o, &qv) in dk.row_mut(base + j)[cs.clone()].iter_mut().zip(&qi) {
                        *o += ds * qv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn store(shapes: &[(usize, usize)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, &(r, c)) in shapes.iter().enumerate() {
            let data = (0..r * c).map(|i| ((i * 7 + n * 13) as f64 * 0.61).sin() * 0.8).collect();
            s.add(format!("p{n}"), Tensor::from_vec(r, c, data));
        }
        s
    }

    /// Central differences against the tape for a small closure-built loss.
    fn check(shapes: &[(usize, usize)], build: impl Fn(&mut Graph<f64>) -> NodeId) {
        let mut params = store(shapes);
        let analytic = {
            let mut g = Graph::new(&params);
            let loss = build(&mut g);
            g.backward(loss)
        };
        let h = 1e-5;
        for pid in 0..params.len() {
            for e in 0..params.get(ParamId(pid)).len() {
                let orig = params.get(ParamId(pid)).data()[e];
                params.get_mut(ParamId(pid)).data_mut()[e] = orig + h;
                let up = {
                    let mut g = Graph::new(&params);
                    let l = build(&mut g);
                    g.value(l).get(0, 0)
                };
                params.get_mut(ParamId(pid)).data_mut()[e] = orig - h;
                let down = {
                    let mut g = Graph::new(&params);
                    let l = build(&mut g);
                    g.value(l).get(0, 0)
                };
                params.get_mut(ParamId(pid)).data_mut()[e] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = analytic.get(ParamId(pid)).data()[e];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-7);
                assert!(rel < 1e-5, "param {pid}[{e}]: analytic {ana} numeric {num}");
            }
        }
    }

    #[test]
    fn dense_gelu_tanh_chain() {
        check(&[(3, 4), (4, 5), (1, 5), (5, 3)], |g| {
            let x = g.param(ParamId(0));
            let w = g.param(ParamId(1));
            let b = g.param(ParamId(2));
            let w2 = g.param(ParamId(3));
            let h = g.affine(x, w, b);
            let h = g.gelu(h);
            let h = g.tanh(h);
            let z = g.matmul(h, w2);
            g.softmax_ce(z, vec![Some(0), None, Some(2)], Some(vec![Some(1), None, None]))
        });
    }

    #[test]
    fn layer_norm_rows_concat_scale() {
        check(&[(4, 6), (1, 6), (1, 6), (2, 6), (5, 6)], |g| {
            let x = g.param(ParamId(0));
            let gam = g.param(ParamId(1));
            let bet = g.param(ParamId(2));
            let extra = g.param(ParamId(3));
            let table = g.param(ParamId(4));
            let y = g.layer_norm(x, gam, bet);
            let e = g.rows(table, vec![1, 1, 4]);
            let c = g.concat_rows(vec![y, extra, e]);
            let c = g.scale(c, 0.7);
            let z = g.matmul_nt(c, table);
            g.softmax_ce(z, (0..9).map(|r| Some(r % 5)).collect(), None)
        });
    }

    #[test]
    fn attention_and_bilinear() {
        check(&[(6, 4), (6, 4), (6, 4), (3, 4), (2, 9), (3, 2)], |g| {
            let q = g.param(ParamId(0));
            let k = g.param(ParamId(1));
            let v = g.param(ParamId(2));
            let layout = AttentionLayout {
                batch: 2,
                seq_len: 3,
                n_heads: 2,
                key_mask: vec![true, true, false, true, true, true],
            };
            let a = g.attention(q, k, v, layout);
            let y = g.rows(a, vec![0, 1, 3, 4]);
            let yq = g.param(ParamId(3));
            let y3 = g.matmul_nt(y, yq); // 4x3
            let u = g.param(ParamId(4));
            let x3 = g.rows(y3, vec![3, 2, 1, 0]);
            let s = g.row_bilinear(x3, y3, u); // 4x2
            let w = g.param(ParamId(5));
            let z = g.matmul(y3, w);
            let z = g.add(z, s);
            g.softmax_ce(z, vec![Some(0), Some(1), Some(1), None], None)
        });
    }

    #[test]
    fn dropout_mask_is_reused_in_backward() {
        let mut params = ParamStore::new();
        params.add("x", Tensor::filled(1, 64, 1.0f64));
        let mut g = Graph::new(&params);
        let x = g.param(ParamId(0));
        let mut rng = substream(1, &[]);
        let d = g.dropout(x, 0.5, &mut rng);
        let w = g.input(Tensor::from_vec(64, 2, (0..128).map(|i| (i % 2) as f64).collect()));
        let z = g.matmul(d, w);
        let loss = g.softmax_ce(z, vec![Some(0)], None);
        let grads = g.backward(loss);
        let dropped = g.value(d).data().iter().filter(|v| **v == 0.0).count();
        let zero_grads = grads.get(ParamId(0)).data().iter().filter(|v| **v == 0.0).count();
        assert!(dropped > 0);
        assert_eq!(dropped, zero_grads);
    }

    #[test]
    fn attention_rows_normalize_over_real_keys() {
        let params = store(&[(8, 4), (8, 4), (8, 4)]);
        let mut g = Graph::new(&params);
        let (q, k, v) = (g.param(ParamId(0)), g.param(ParamId(1)), g.param(ParamId(2)));
        let mask = vec![true, true, true, false, true, false, false, false];
        let a = g.attention(q, k, v, AttentionLayout { batch: 2, seq_len: 4, n_heads: 2, key_mask: mask.clone() });
        let probs = g.attention_probs(a).unwrap();
        for row in probs.chunks(4) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        for (bi, chunk) in probs.chunks(2 * 4 * 4).enumerate() {
            for row in chunk.chunks(4) {
                for (j, p) in row.iter().enumerate() {
                    if !mask[bi * 4 + j] {
                        assert_eq!(*p, 0.0);
                    }
                }
            }
        }
    }
}
