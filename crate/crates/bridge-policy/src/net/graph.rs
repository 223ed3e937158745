//! Record-and-replay reverse-mode differentiation over `Array2<f64>`.
//!
//! A `Graph` owns the forward values; each op records enough to distribute
//! an upstream gradient to its inputs exactly. `backward` consumes the graph,
//! so a tape cannot be replayed after its gradients were taken.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{what} must be finite and nonnegative, got {value}")]
    BadScalar { what: &'static str, value: f64 },
    #[error("non-finite input to {op}")]
    NonFinite { op: &'static str },
    #[error("empty batch in {op}")]
    EmptyBatch { op: &'static str },
    #[error("backward root must be a 1x1 scalar node")]
    NotScalar,
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    AxpyScalar {
        a: NodeId,
        b: NodeId,
        alpha: f64,
    },
    ConcatCols(Vec<(NodeId, usize)>),
    Reshape(NodeId),
    Silu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    CrossAttention {
        queries: NodeId,
        values: NodeId,
        tokens: usize,
    },
    SegmentMax {
        x: NodeId,
        argmax: Vec<usize>,
    },
    L1Loss {
        pred: NodeId,
        target: Array2<f64>,
    },
    ClipAlign {
        x: NodeId,
        y: NodeId,
        tau: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients of one backward pass, addressable by node or parameter name.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    params: BTreeMap<String, NodeId>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.get(name).and_then(|id| self.grads[id.0].as_ref())
    }

    /// Gradients of every registered parameter; absent entries are zero.
    pub fn into_named(mut self, shapes: &BTreeMap<String, Array2<f64>>) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let g = self.grads[id.0]
                .take()
                .unwrap_or_else(|| Array2::zeros(shapes[name].raw_dim()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// The recorded forward computation.
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Leaf holding data; still receives a gradient (inputs are checkable).
    pub fn constant(&mut self, v: Array2<f64>) -> NodeId {
        self.push(v, Op::Leaf)
    }

    /// Named leaf; its gradient is retrievable by name after backward.
    pub fn param(&mut self, name: &str, v: Array2<f64>) -> NodeId {
        let id = self.push(v, Op::Leaf);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NetError> {
        let (ar, ac) = self.value(a).dim();
        let (br, bc) = self.value(b).dim();
        if ac != br {
            return Err(NetError::ShapeMismatch {
                op: "matmul",
                detail: format!("({ar}x{ac}) . ({br}x{bc})"),
            });
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `x·w + b` with `b` a 1xO row broadcast over the batch.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NetError> {
        let (_, xc) = self.value(x).dim();
        let (wr, wc) = self.value(w).dim();
        let (br, bc) = self.value(b).dim();
        if xc != wr || br != 1 || bc != wc {
            return Err(NetError::ShapeMismatch {
                op: "linear",
                detail: format!(
                    "x cols {xc}, w {wr}x{wc}, b {br}x{bc}"
                ),
            });
        }
        let mut v = self.value(x).dot(self.value(w));
        let bias = self.value(b).row(0).to_owned();
        for mut row in v.rows_mut() {
            row += &bias;
        }
        Ok(self.push(v, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NetError> {
        if self.value(a).dim() != self.value(b).dim() {
            return Err(NetError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.value(a).dim(), self.value(b).dim()),
            });
        }
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x) * c;
        self.push(v, Op::Scale(x, c))
    }

    /// Scalar combination `a + alpha·b` of two 1x1 nodes.
    pub fn axpy_scalar(&mut self, a: NodeId, b: NodeId, alpha: f64) -> Result<NodeId, NetError> {
        if self.value(a).dim() != (1, 1) || self.value(b).dim() != (1, 1) {
            return Err(NetError::NotScalar);
        }
        let v = Array2::from_elem((1, 1), self.value(a)[(0, 0)] + alpha * self.value(b)[(0, 0)]);
        Ok(self.push(v, Op::AxpyScalar { a, b, alpha }))
    }

    /// Column-wise concatenation of same-height blocks.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NetError> {
        if parts.is_empty() {
            return Err(NetError::EmptyBatch { op: "concat_cols" });
        }
        let rows = self.value(parts[0]).nrows();
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).dim();
            if r != rows {
                return Err(NetError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {rows} vs {r}"),
                });
            }
            widths.push((p, c));
            total += c;
        }
        let mut v = Array2::zeros((rows, total));
        let mut col = 0;
        for &(p, c) in &widths {
            v.slice_mut(s![.., col..col + c]).assign(self.value(p));
            col += c;
        }
        Ok(self.push(v, Op::ConcatCols(widths)))
    }

    /// Reinterpret the element order with a new (rows, cols); count must match.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId, NetError> {
        let v = self.value(x);
        if v.len() != rows * cols {
            return Err(NetError::ShapeMismatch {
                op: "reshape",
                detail: format!("{} elements into {rows}x{cols}", v.len()),
            });
        }
        let flat: Vec<f64> = v.iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("checked length");
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Sigmoid-weighted linear unit `x·σ(x)`.
    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|a| a / (1.0 + (-a).exp()));
        self.push(v, Op::Silu(x))
    }

    /// Row-wise layer normalization followed by the affine `gain`/`bias`
    /// (both 1xD). The normalized rows have mean 0 and unit variance up to
    /// `eps` before the affine.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, NetError> {
        let (_, d) = self.value(x).dim();
        if self.value(gain).dim() != (1, d) || self.value(bias).dim() != (1, d) {
            return Err(NetError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("gain/bias must be 1x{d}"),
            });
        }
        let xv = self.value(x);
        let mut v = xv.clone();
        let g = self.value(gain).row(0).to_owned();
        let b = self.value(bias).row(0).to_owned();
        for mut row in v.rows_mut() {
            let mean = row.mean().expect("non-empty row");
            let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (j, a) in row.iter_mut().enumerate() {
                *a = (*a - mean) * rstd * g[j] + b[j];
            }
        }
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Cross-attention fusion over per-sample blocks of `tokens` rows:
    /// `softmax(q qᵀ/√d_q) · v` with the query tensor supplying both query and
    /// key, exactly as the fusion stage is defined.
    pub fn cross_attention_fuse(
        &mut self,
        queries: NodeId,
        values: NodeId,
        tokens: usize,
    ) -> Result<NodeId, NetError> {
        let (qr, qd) = self.value(queries).dim();
        let (vr, vd) = self.value(values).dim();
        if qr != vr || tokens == 0 || qr % tokens != 0 {
            return Err(NetError::ShapeMismatch {
                op: "cross_attention_fuse",
                detail: format!("queries {qr}x{qd}, values {vr}x{vd}, tokens {tokens}"),
            });
        }
        if self
            .value(queries)
            .iter()
            .chain(self.value(values).iter())
            .any(|a| !a.is_finite())
        {
            return Err(NetError::NonFinite {
                op: "cross_attention_fuse",
            });
        }
        let scale = 1.0 / (qd as f64).sqrt();
        let n_blocks = qr / tokens;
        let mut out = Array2::zeros((qr, vd));
        for blk in 0..n_blocks {
            let rows = blk * tokens..(blk + 1) * tokens;
            let q = self.value(queries).slice(s![rows.clone(), ..]).to_owned();
            let v = self.value(values).slice(s![rows.clone(), ..]).to_owned();
            let attn = softmax_rows(&(q.dot(&q.t()) * scale));
            debug_assert!(attn
                .rows()
                .into_iter()
                .all(|r| (r.sum() - 1.0).abs() <= 1e-9));
            out.slice_mut(s![rows, ..]).assign(&attn.dot(&v));
        }
        Ok(self.push(
            out,
            Op::CrossAttention {
                queries,
                values,
                tokens,
            },
        ))
    }

    /// Max over each consecutive block of `segment` rows (column-wise), with
    /// ties resolved to the first row; the pooling used by the point encoder.
    pub fn segment_max(&mut self, x: NodeId, segment: usize) -> Result<NodeId, NetError> {
        let (r, c) = self.value(x).dim();
        if segment == 0 || r % segment != 0 {
            return Err(NetError::ShapeMismatch {
                op: "segment_max",
                detail: format!("{r} rows into segments of {segment}"),
            });
        }
        let blocks = r / segment;
        let mut v = Array2::zeros((blocks, c));
        let mut argmax = vec![0usize; blocks * c];
        for blk in 0..blocks {
            for j in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_row = 0;
                for i in 0..segment {
                    let a = self.value(x)[(blk * segment + i, j)];
                    if a > best {
                        best = a;
                        best_row = blk * segment + i;
                    }
                }
                v[(blk, j)] = best;
                argmax[blk * c + j] = best_row;
            }
        }
        Ok(self.push(v, Op::SegmentMax { x, argmax }))
    }

    /// Mean absolute error over all entries against a fixed target.
    pub fn l1_loss(&mut self, pred: NodeId, target: Array2<f64>) -> Result<NodeId, NetError> {
        if self.value(pred).dim() != target.dim() {
            return Err(NetError::ShapeMismatch {
                op: "l1_loss",
                detail: format!("{:?} vs {:?}", self.value(pred).dim(), target.dim()),
            });
        }
        let n = target.len() as f64;
        let loss = self
            .value(pred)
            .iter()
            .zip(target.iter())
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / n;
        Ok(self.push(Array2::from_elem((1, 1), loss), Op::L1Loss { pred, target }))
    }

    /// Symmetric CLIP loss over matched rows of `x` and `y`: both directions
    /// of the softmax cross-entropy over the batch, with rows L2-normalized
    /// inside (1e-12 added to the norms).
    pub fn clip_align_loss(&mut self, x: NodeId, y: NodeId, tau: f64) -> Result<NodeId, NetError> {
        let (n, d) = self.value(x).dim();
        if self.value(y).dim() != (n, d) {
            return Err(NetError::ShapeMismatch {
                op: "clip_align_loss",
                detail: format!("{:?} vs {:?}", (n, d), self.value(y).dim()),
            });
        }
        if n == 0 {
            return Err(NetError::EmptyBatch {
                op: "clip_align_loss",
            });
        }
        if !tau.is_finite() || tau <= 0.0 {
            return Err(NetError::BadScalar {
                what: "tau",
                value: tau,
            });
        }
        let (loss, _, _) = clip_forward(self.value(x), self.value(y), tau);
        Ok(self.push(Array2::from_elem((1, 1), loss), Op::ClipAlign { x, y, tau }))
    }

    /// Reverse pass seeded with `upstream` at the scalar `root`. Consumes the
    /// graph, so a tape cannot be reused after its gradients were taken.
    pub fn backward(self, root: NodeId, upstream: f64) -> Result<Gradients, NetError> {
        if self.nodes[root.0].value.dim() != (1, 1) {
            return Err(NetError::NotScalar);
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), upstream));

        // Nodes only reference earlier nodes, so reverse index order is a
        // valid topological order; each node's gradient is final when reached.
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].clone() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Linear { x, w, b } => {
                    let gx = g.dot(&self.nodes[w.0].value.t());
                    let gw = self.nodes[x.0].value.t().dot(&g);
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, &g * *c);
                }
                Op::AxpyScalar { a, b, alpha } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, &g * *alpha);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &(p, c) in parts {
                        let gp = g.slice(s![.., col..col + c]).to_owned();
                        accumulate(&mut grads, p, gp);
                        col += c;
                    }
                }
                Op::Reshape(x) => {
                    let dim = self.nodes[x.0].value.dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let gx = Array2::from_shape_vec(dim, flat).expect("same element count");
                    accumulate(&mut grads, *x, gx);
                }
                Op::Silu(x) => {
                    let gx = ndarray::Zip::from(&self.nodes[x.0].value)
                        .and(&g)
                        .map_collect(|&a, &gy| {
                            let sig = 1.0 / (1.0 + (-a).exp());
                            gy * sig * (1.0 + a * (1.0 - sig))
                        });
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xv = &self.nodes[x.0].value;
                    let (rows, d) = xv.dim();
                    let gv = self.nodes[gain.0].value.row(0).to_owned();
                    let mut gx = Array2::zeros((rows, d));
                    let mut ggain = Array1::<f64>::zeros(d);
                    let mut gbias = Array1::<f64>::zeros(d);
                    for i in 0..rows {
                        let row = xv.row(i);
                        let mean = row.mean().expect("non-empty row");
                        let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / d as f64;
                        let rstd = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|a| (a - mean) * rstd).collect();
                        let gy = g.row(i);
                        let mut mean_gxh = 0.0;
                        let mut mean_gxh_xhat = 0.0;
                        for j in 0..d {
                            let gxh = gy[j] * gv[j];
                            mean_gxh += gxh;
                            mean_gxh_xhat += gxh * xhat[j];
                            ggain[j] += gy[j] * xhat[j];
                            gbias[j] += gy[j];
                        }
                        mean_gxh /= d as f64;
                        mean_gxh_xhat /= d as f64;
                        for j in 0..d {
                            let gxh = gy[j] * gv[j];
                            gx[(i, j)] = rstd * (gxh - mean_gxh - xhat[j] * mean_gxh_xhat);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, ggain.insert_axis(Axis(0)));
                    accumulate(&mut grads, *bias, gbias.insert_axis(Axis(0)));
                }
                Op::CrossAttention {
                    queries,
                    values,
                    tokens,
                } => {
                    let qv = &self.nodes[queries.0].value;
                    let vv = &self.nodes[values.0].value;
                    let (qr, qd) = qv.dim();
                    let scale = 1.0 / (qd as f64).sqrt();
                    let mut gq = Array2::zeros(qv.raw_dim());
                    let mut gval = Array2::zeros(vv.raw_dim());
                    for blk in 0..qr / tokens {
                        let rows = blk * tokens..(blk + 1) * tokens;
                        let q = qv.slice(s![rows.clone(), ..]).to_owned();
                        let v = vv.slice(s![rows.clone(), ..]).to_owned();
                        let p = softmax_rows(&(q.dot(&q.t()) * scale));
                        let go = g.slice(s![rows.clone(), ..]).to_owned();
                        let gv_blk = p.t().dot(&go);
                        let gp = go.dot(&v.t());
                        // softmax backward per row
                        let mut gs = Array2::zeros(p.raw_dim());
                        for i in 0..*tokens {
                            let dot = gp.row(i).dot(&p.row(i));
                            for j in 0..*tokens {
                                gs[(i, j)] = p[(i, j)] * (gp[(i, j)] - dot);
                            }
                        }
                        let gq_blk = (&gs + &gs.t()).dot(&q) * scale;
                        gq.slice_mut(s![rows.clone(), ..]).assign(&gq_blk);
                        gval.slice_mut(s![rows, ..]).assign(&gv_blk);
                    }
                    accumulate(&mut grads, *queries, gq);
                    accumulate(&mut grads, *values, gval);
                }
                Op::SegmentMax { x, argmax } => {
                    let (_, c) = node.value.dim();
                    let mut gx = Array2::zeros(self.nodes[x.0].value.raw_dim());
                    for blk in 0..node.value.nrows() {
                        for j in 0..c {
                            gx[(argmax[blk * c + j], j)] += g[(blk, j)];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::L1Loss { pred, target } => {
                    let n = target.len() as f64;
                    let up = g[(0, 0)] / n;
                    let gp = ndarray::Zip::from(&self.nodes[pred.0].value)
                        .and(target)
                        .map_collect(|&p, &t| {
                            // subgradient 0 at ties
                            up * (p - t).signum() * f64::from(u8::from(p != t))
                        });
                    accumulate(&mut grads, *pred, gp);
                }
                Op::ClipAlign { x, y, tau } => {
                    let xv = &self.nodes[x.0].value;
                    let yv = &self.nodes[y.0].value;
                    let (gx, gy) = clip_backward(xv, yv, *tau, g[(0, 0)]);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *y, gy);
                }
            }
        }

        Ok(Gradients {
            grads,
            params: self.params,
        })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for a in row.iter_mut() {
            *a = (*a - max).exp();
            sum += *a;
        }
        for a in row.iter_mut() {
            *a /= sum;
        }
    }
    out
}

/// Row-normalize with the 1e-12 guard; returns the normalized rows and norms.
fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = norm + 1e-12;
        for a in row.iter_mut() {
            *a /= denom;
        }
        norms.push(norm);
    }
    (out, norms)
}

/// Forward CLIP value plus the two softmax tables used by backward.
fn clip_forward(x: &Array2<f64>, y: &Array2<f64>, tau: f64) -> (f64, Array2<f64>, Array2<f64>) {
    let n = x.nrows();
    let (xn, _) = normalize_rows(x);
    let (yn, _) = normalize_rows(y);
    let sim = xn.dot(&yn.t()) / tau;
    // pa: softmax over rows i for each column j; pb: softmax over columns per row
    let pb = softmax_rows(&sim);
    let pa = softmax_rows(&sim.t().to_owned());
    let mut loss = 0.0;
    for j in 0..n {
        loss -= pa[(j, j)].ln();
        loss -= pb[(j, j)].ln();
    }
    (loss / n as f64, pa, pb)
}

fn clip_backward(
    x: &Array2<f64>,
    y: &Array2<f64>,
    tau: f64,
    upstream: f64,
) -> (Array2<f64>, Array2<f64>) {
    let n = x.nrows();
    let (xn, xnorm) = normalize_rows(x);
    let (yn, ynorm) = normalize_rows(y);
    let (_, pa, pb) = clip_forward(x, y, tau);
    // dL/dS_ij with S = xn . ynᵀ / tau; pa is indexed [j][i] transposed
    let mut gs = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let delta = f64::from(u8::from(i == j));
            gs[(i, j)] = upstream / n as f64 * ((pa[(j, i)] - delta) + (pb[(i, j)] - delta));
        }
    }
    let gxn = gs.dot(&yn) / tau;
    let gyn = gs.t().dot(&xn) / tau;
    let gx = denormalize_grad(x, &gxn, &xnorm);
    let gy = denormalize_grad(y, &gyn, &ynorm);
    (gx, gy)
}

/// Pull a gradient back through the row normalization x̂ = x/(‖x‖+1e-12).
fn denormalize_grad(x: &Array2<f64>, gxn: &Array2<f64>, norms: &[f64]) -> Array2<f64> {
    let mut gx = Array2::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        let norm = norms[i];
        let denom = norm + 1e-12;
        let dot = x.row(i).dot(&gxn.row(i));
        for j in 0..x.ncols() {
            let mut v = gxn[(i, j)] / denom;
            if norm > 0.0 {
                v -= dot * x[(i, j)] / (norm * denom * denom);
            }
            gx[(i, j)] = v;
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn l1_gradient_sign_and_zero_upstream() {
        let mut g = Graph::new();
        let p = g.constant(array![[2.0, -1.0], [0.5, 0.5]]);
        let loss = g.l1_loss(p, array![[1.0, 0.0], [1.0, 0.5]]).unwrap();
        let grads = g.backward(loss, 1.0).unwrap();
        let gp = grads.wrt(p).unwrap();
        assert_abs_diff_eq!(gp[(0, 0)], 0.25); // pred > target: +1/N
        assert_abs_diff_eq!(gp[(0, 1)], -0.25);
        assert_abs_diff_eq!(gp[(1, 0)], -0.25);
        assert_abs_diff_eq!(gp[(1, 1)], 0.0); // tie: subgradient 0

        let mut g = Graph::new();
        let p = g.constant(array![[2.0]]);
        let loss = g.l1_loss(p, array![[1.0]]).unwrap();
        let grads = g.backward(loss, 0.0).unwrap();
        assert_abs_diff_eq!(grads.wrt(p).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn cross_attention_single_token_passes_values_through() {
        let mut g = Graph::new();
        let q = g.constant(array![[3.7]]);
        let v = g.constant(array![[0.25, -0.5]]);
        let out = g.cross_attention_fuse(q, v, 1).unwrap();
        assert_eq!(g.value(out), &array![[0.25, -0.5]]);
    }

    #[test]
    fn cross_attention_diagonal_dominance_limit() {
        // orthogonal rows at large scale: attention approaches the identity
        let mut g = Graph::new();
        let q = g.constant(array![[60.0, 0.0], [0.0, 60.0]]);
        let v = g.constant(array![[1.0], [-2.0]]);
        let out = g.cross_attention_fuse(q, v, 2).unwrap();
        assert_abs_diff_eq!(g.value(out)[(0, 0)], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g.value(out)[(1, 0)], -2.0, epsilon = 1e-9);
    }

    #[test]
    fn cross_attention_frozen_small_case() {
        // Independent oracle: scripted softmax(q qᵀ/√3)·v evaluated outside
        // this crate for the literals below.
        let q = array![
            [0.2, -0.4, 0.1],
            [0.5, 0.3, -0.2],
            [-0.1, 0.6, 0.4],
            [0.0, -0.3, 0.2]
        ];
        let v = array![[1.0, 0.5], [-0.5, 0.25], [0.75, -1.0], [0.2, 0.4]];
        let mut g = Graph::new();
        let qn = g.constant(q);
        let vn = g.constant(v);
        let out = g.cross_attention_fuse(qn, vn, 4).unwrap();
        let expected = array![
            [0.37280768262482972, 0.088848043714203059],
            [0.31391883085434708, 0.033904778193285627],
            [0.3735471121306666, -0.067127929012088083],
            [0.38273672395807934, 0.064777237426964895]
        ];
        for (a, b) in g.value(out).iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn cross_attention_rejects_nan() {
        let mut g = Graph::new();
        let q = g.constant(array![[f64::NAN]]);
        let v = g.constant(array![[1.0]]);
        assert!(g.cross_attention_fuse(q, v, 1).is_err());
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 2.0, 3.0, 10.0], [-5.0, 0.0, 5.0, 0.0]]);
        let gain = g.constant(Array2::ones((1, 4)));
        let bias = g.constant(Array2::zeros((1, 4)));
        let y = g.layer_norm(x, gain, bias, 1e-10).unwrap();
        for row in g.value(y).rows() {
            let mean = row.mean().unwrap();
            let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn segment_max_forward_and_backward() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 5.0], [3.0, 2.0], [0.0, 7.0], [4.0, 1.0]]);
        let y = g.segment_max(x, 2).unwrap();
        assert_eq!(g.value(y), &array![[3.0, 5.0], [4.0, 7.0]]);
        let mut w = Graph::new();
        let x = w.constant(array![[1.0, 5.0], [3.0, 2.0], [0.0, 7.0], [4.0, 1.0]]);
        let y = w.segment_max(x, 2).unwrap();
        let loss = w.l1_loss(y, Array2::zeros((2, 2))).unwrap();
        let grads = w.backward(loss, 4.0).unwrap();
        let gx = grads.wrt(x).unwrap();
        // gradient lands only on the argmax rows (values positive: sign +1/N)
        let expected = array![[0.0, 1.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        assert_eq!(gx, &expected);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 2.0]]);
        assert!(g.backward(x, 1.0).is_err());
    }

    #[test]
    fn graph_consumed_by_backward() {
        // Compile-time property: backward takes the graph by value. This test
        // documents the contract by constructing and consuming in sequence.
        let mut g = Graph::new();
        let x = g.constant(array![[1.0]]);
        let loss = g.l1_loss(x, array![[0.0]]).unwrap();
        let _ = g.backward(loss, 1.0).unwrap();
    }
}
