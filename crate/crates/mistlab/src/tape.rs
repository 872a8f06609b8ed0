//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records every operation as a node holding its cached forward
//! value. [`Tape::backward`] walks the nodes in reverse, accumulating
//! adjoints additively into fresh buffers, so repeated backward calls on
//! the same tape are independent. Gradients are only propagated toward
//! leaves created with `requires_grad = true`; everything else is treated
//! as a constant and skipped.
//!
//! A tape is confined to one thread. Parallelism happens above this layer
//! by running independent tapes.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias { x: usize, bias: usize },
    AddChannelBias { x: usize, bias: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Relu(usize),
    Conv2d { x: usize, w: usize, pad: usize },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    CircularShift { x: usize, offsets: Vec<i64> },
    ResizeBilinear { x: usize },
    PadZero { x: usize, left: usize, top: usize },
    Reshape { x: usize },
    CrossEntropy { logits: usize, softmax: Vec<f64>, labels: Vec<usize> },
    SumAll(usize),
    MeanAll(usize),
    WeightedSum { x: usize, weights: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` required one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    // ── Graph construction ───────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        let rq = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(Op::Add(a.0, b.0), value, rq))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        let rq = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(Op::Sub(a.0, b.0), value, rq))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.mul(&self.nodes[b.0].value)?;
        let rq = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(Op::Mul(a.0, b.0), value, rq))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.scale(c);
        let rq = self.requires(a.0);
        self.push(Op::Scale(a.0, c), value, rq)
    }

    /// (B,F) + (F) broadcast over the batch axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let bs = self.nodes[bias.0].value.shape().to_vec();
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Error::ShapeMismatch(format!("add_bias over {xs:?} + {bs:?}")));
        }
        let f = xs[1];
        let mut data = self.nodes[x.0].value.data().to_vec();
        let bd = self.nodes[bias.0].value.data();
        for row in data.chunks_mut(f) {
            for (v, b) in row.iter_mut().zip(bd) {
                *v += b;
            }
        }
        let rq = self.requires(x.0) || self.requires(bias.0);
        Ok(self.push(Op::AddBias { x: x.0, bias: bias.0 }, Tensor::new(xs, data)?, rq))
    }

    /// (B,C,H,W) + (C) broadcast over batch and spatial axes.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let bs = self.nodes[bias.0].value.shape().to_vec();
        if xs.len() != 4 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Error::ShapeMismatch(format!("add_channel_bias over {xs:?} + {bs:?}")));
        }
        let (c, hw) = (xs[1], xs[2] * xs[3]);
        let mut data = self.nodes[x.0].value.data().to_vec();
        let bd = self.nodes[bias.0].value.data();
        for sample in data.chunks_mut(c * hw) {
            for ch in 0..c {
                for v in &mut sample[ch * hw..(ch + 1) * hw] {
                    *v += bd[ch];
                }
            }
        }
        let rq = self.requires(x.0) || self.requires(bias.0);
        Ok(self.push(Op::AddChannelBias { x: x.0, bias: bias.0 }, Tensor::new(xs, data)?, rq))
    }

    /// (m,k) x (k,n) matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let asp = self.nodes[a.0].value.shape().to_vec();
        let bsp = self.nodes[b.0].value.shape().to_vec();
        if asp.len() != 2 || bsp.len() != 2 || asp[1] != bsp[0] {
            return Err(Error::ShapeMismatch(format!("matmul over {asp:?} x {bsp:?}")));
        }
        let (m, k, n) = (asp[0], asp[1], bsp[1]);
        let data = matmul(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, k, n);
        let rq = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(Op::MatMul { a: a.0, b: b.0, m, k, n }, Tensor::new(vec![m, n], data)?, rq))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.max(0.0));
        let rq = self.requires(x.0);
        self.push(Op::Relu(x.0), value, rq)
    }

    /// 2-D convolution, stride 1, symmetric zero padding `pad`.
    /// x: (B,Cin,H,W), w: (Cout,Cin,kh,kw).
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.nodes[w.0].value.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch(format!("conv2d over x {xs:?}, w {ws:?}")));
        }
        let (batch, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wdt + 2 * pad < kw {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{wdt}+{pad}"
            )));
        }
        let ho = h + 2 * pad - kh + 1;
        let wo = wdt + 2 * pad - kw + 1;
        let kdim = cin * kh * kw;
        let ldim = ho * wo;
        let wmat = self.nodes[w.0].value.data();
        let mut out = vec![0.0; batch * cout * ldim];
        let xd = self.nodes[x.0].value.data();
        let mut col = vec![0.0; kdim * ldim];
        for b in 0..batch {
            im2col(&xd[b * cin * h * wdt..], cin, h, wdt, kh, kw, pad, &mut col);
            let prod = matmul(wmat, &col, cout, kdim, ldim);
            out[b * cout * ldim..(b + 1) * cout * ldim].copy_from_slice(&prod);
        }
        let rq = self.requires(x.0) || self.requires(w.0);
        Ok(self.push(
            Op::Conv2d { x: x.0, w: w.0, pad },
            Tensor::new(vec![batch, cout, ho, wo], out)?,
            rq,
        ))
    }

    /// 2x2 max pooling with stride 2; spatial extents must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::ShapeMismatch(format!("max_pool2 needs even (B,C,H,W), got {xs:?}")));
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; batch * c * ho * wo];
        let mut argmax = vec![0usize; batch * c * ho * wo];
        for bc in 0..batch * c {
            let plane = &xd[bc * h * w..(bc + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = (2 * i + di) * w + 2 * j + dj;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[bc * ho * wo + i * wo + j] = best;
                    argmax[bc * ho * wo + i * wo + j] = bc * h * w + best_idx;
                }
            }
        }
        let rq = self.requires(x.0);
        Ok(self.push(
            Op::MaxPool2 { x: x.0, argmax },
            Tensor::new(vec![batch, c, ho, wo], out)?,
            rq,
        ))
    }

    /// Circular shift of the trailing axes; the adjoint is the inverse shift.
    pub fn circular_shift(&mut self, x: Var, offsets: &[i64]) -> Var {
        let value = self.nodes[x.0].value.circular_shift(offsets);
        let rq = self.requires(x.0);
        self.push(Op::CircularShift { x: x.0, offsets: offsets.to_vec() }, value, rq)
    }

    /// Corner-aligned bilinear resize of the two trailing axes of a
    /// (B,C,H,W) tensor. Resizing to the same extents is an exact identity.
    pub fn resize_bilinear(&mut self, x: Var, h_out: usize, w_out: usize) -> Result<Var> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch(format!("resize_bilinear needs (B,C,H,W), got {xs:?}")));
        }
        if h_out == 0 || w_out == 0 {
            return Err(Error::InvalidArgument("resize target extents must be >= 1".into()));
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ys = sample_positions(h, h_out);
        let zs = sample_positions(w, w_out);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; batch * c * h_out * w_out];
        for bc in 0..batch * c {
            let plane = &xd[bc * h * w..(bc + 1) * h * w];
            let oplane = &mut out[bc * h_out * w_out..(bc + 1) * h_out * w_out];
            for (i, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (j, &(x0, x1, wx)) in zs.iter().enumerate() {
                    oplane[i * w_out + j] = (1.0 - wy) * (1.0 - wx) * plane[y0 * w + x0]
                        + (1.0 - wy) * wx * plane[y0 * w + x1]
                        + wy * (1.0 - wx) * plane[y1 * w + x0]
                        + wy * wx * plane[y1 * w + x1];
                }
            }
        }
        let rq = self.requires(x.0);
        Ok(self.push(
            Op::ResizeBilinear { x: x.0 },
            Tensor::new(vec![batch, c, h_out, w_out], out)?,
            rq,
        ))
    }

    /// Zero padding of the two trailing axes of a (B,C,H,W) tensor.
    pub fn pad_zero(
        &mut self,
        x: Var,
        left: usize,
        right: usize,
        top: usize,
        bottom: usize,
    ) -> Result<Var> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch(format!("pad_zero needs (B,C,H,W), got {xs:?}")));
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h + top + bottom, w + left + right);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; batch * c * ho * wo];
        for bc in 0..batch * c {
            let plane = &xd[bc * h * w..(bc + 1) * h * w];
            let oplane = &mut out[bc * ho * wo..(bc + 1) * ho * wo];
            for i in 0..h {
                let dst = (i + top) * wo + left;
                oplane[dst..dst + w].copy_from_slice(&plane[i * w..(i + 1) * w]);
            }
        }
        let rq = self.requires(x.0);
        Ok(self.push(
            Op::PadZero { x: x.0, left, top },
            Tensor::new(vec![batch, c, ho, wo], out)?,
            rq,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        let rq = self.requires(x.0);
        Ok(self.push(Op::Reshape { x: x.0 }, value, rq))
    }

    /// Per-sample cross-entropy of logits (B,C) against integer labels.
    /// Returns a (B,) tensor of losses computed via a stable log-softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.nodes[logits.0].value.shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy over logits {ls:?} with {} labels",
                labels.len()
            )));
        }
        let (batch, classes) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let zd = self.nodes[logits.0].value.data();
        let mut softmax = vec![0.0; batch * classes];
        let mut losses = vec![0.0; batch];
        for b in 0..batch {
            let row = &zd[b * classes..(b + 1) * classes];
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut lse = 0.0;
            for (c, &z) in row.iter().enumerate() {
                let e = (z - maxv).exp();
                softmax[b * classes + c] = e;
                lse += e;
            }
            for c in 0..classes {
                softmax[b * classes + c] /= lse;
            }
            losses[b] = lse.ln() + maxv - row[labels[b]];
        }
        let rq = self.requires(logits.0);
        Ok(self.push(
            Op::CrossEntropy { logits: logits.0, softmax, labels: labels.to_vec() },
            Tensor::new(vec![batch], losses)?,
            rq,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.nodes[x.0].value.sum());
        let rq = self.requires(x.0);
        self.push(Op::SumAll(x.0), value, rq)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel() as f64;
        let value = Tensor::scalar(self.nodes[x.0].value.sum() / n);
        let rq = self.requires(x.0);
        self.push(Op::MeanAll(x.0), value, rq)
    }

    /// Scalar dot product of `x` with fixed weights of the same length.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.numel() != weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "weighted_sum over {} elements with {} weights",
                xv.numel(),
                weights.len()
            )));
        }
        let s: f64 = xv.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        let rq = self.requires(x.0);
        Ok(self.push(
            Op::WeightedSum { x: x.0, weights: weights.to_vec() },
            Tensor::scalar(s),
            rq,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Adjoints live in buffers local to
    /// this call, so successive backward passes over one tape are
    /// independent.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        let grads = adj
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|buf| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), buf)
                        .expect("adjoint shape matches value shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(adj: &mut [Option<Vec<f64>>], idx: usize, len: usize, f: impl FnOnce(&mut [f64])) {
        let buf = adj[idx].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &(p, sgn) in &[(*a, 1.0), (*b, 1.0)] {
                    if self.requires(p) {
                        Self::accumulate(adj, p, g.len(), |buf| {
                            for (o, &gv) in buf.iter_mut().zip(g) {
                                *o += sgn * gv;
                            }
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                for &(p, sgn) in &[(*a, 1.0), (*b, -1.0)] {
                    if self.requires(p) {
                        Self::accumulate(adj, p, g.len(), |buf| {
                            for (o, &gv) in buf.iter_mut().zip(g) {
                                *o += sgn * gv;
                            }
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let bd = self.nodes[*b].value.data().to_vec();
                    Self::accumulate(adj, *a, g.len(), |buf| {
                        for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(&bd) {
                            *o += gv * bv;
                        }
                    });
                }
                if self.requires(*b) {
                    let ad = self.nodes[*a].value.data().to_vec();
                    Self::accumulate(adj, *b, g.len(), |buf| {
                        for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(&ad) {
                            *o += gv * av;
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                if self.requires(*x) {
                    let c = *c;
                    Self::accumulate(adj, *x, g.len(), |buf| {
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o += c * gv;
                        }
                    });
                }
            }
            Op::AddBias { x, bias } => {
                let f = self.nodes[*bias].value.numel();
                if self.requires(*x) {
                    Self::accumulate(adj, *x, g.len(), |buf| {
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o += gv;
                        }
                    });
                }
                if self.requires(*bias) {
                    Self::accumulate(adj, *bias, f, |buf| {
                        for row in g.chunks(f) {
                            for (o, &gv) in buf.iter_mut().zip(row) {
                                *o += gv;
                            }
                        }
                    });
                }
            }
            Op::AddChannelBias { x, bias } => {
                let shape = self.nodes[i].value.shape();
                let (c, hw) = (shape[1], shape[2] * shape[3]);
                if self.requires(*x) {
                    Self::accumulate(adj, *x, g.len(), |buf| {
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o += gv;
                        }
                    });
                }
                if self.requires(*bias) {
                    Self::accumulate(adj, *bias, c, |buf| {
                        for sample in g.chunks(c * hw) {
                            for ch in 0..c {
                                buf[ch] += sample[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.requires(*a) {
                    let da = matmul_nt(g, self.nodes[*b].value.data(), m, n, k);
                    Self::accumulate(adj, *a, m * k, |buf| {
                        for (o, v) in buf.iter_mut().zip(da) {
                            *o += v;
                        }
                    });
                }
                if self.requires(*b) {
                    let db = matmul_tn(self.nodes[*a].value.data(), g, m, k, n);
                    Self::accumulate(adj, *b, k * n, |buf| {
                        for (o, v) in buf.iter_mut().zip(db) {
                            *o += v;
                        }
                    });
                }
            }
            Op::Relu(x) => {
                if self.requires(*x) {
                    let xd = self.nodes[*x].value.data().to_vec();
                    Self::accumulate(adj, *x, g.len(), |buf| {
                        for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(&xd) {
                            if xv > 0.0 {
                                *o += gv;
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, w, pad } => {
                self.backward_conv2d(i, *x, *w, *pad, g, adj);
            }
            Op::MaxPool2 { x, argmax } => {
                if self.requires(*x) {
                    let n = self.nodes[*x].value.numel();
                    Self::accumulate(adj, *x, n, |buf| {
                        for (&src, &gv) in argmax.iter().zip(g) {
                            buf[src] += gv;
                        }
                    });
                }
            }
            Op::CircularShift { x, offsets } => {
                if self.requires(*x) {
                    let gt = Tensor::new(self.nodes[i].value.shape().to_vec(), g.to_vec())
                        .expect("adjoint shape");
                    let inv: Vec<i64> = offsets.iter().map(|&o| -o).collect();
                    let shifted = gt.circular_shift(&inv);
                    Self::accumulate(adj, *x, g.len(), |buf| {
                        for (o, &v) in buf.iter_mut().zip(shifted.data()) {
                            *o += v;
                        }
                    });
                }
            }
            Op::ResizeBilinear { x } => {
                if self.requires(*x) {
                    let os = self.nodes[i].value.shape();
                    let is = self.nodes[*x].value.shape();
                    let (h_out, w_out) = (os[2], os[3]);
                    let (h, w) = (is[2], is[3]);
                    let ys = sample_positions(h, h_out);
                    let zs = sample_positions(w, w_out);
                    let planes = is[0] * is[1];
                    Self::accumulate(adj, *x, planes * h * w, |buf| {
                        for bc in 0..planes {
                            let gplane = &g[bc * h_out * w_out..(bc + 1) * h_out * w_out];
                            let oplane = &mut buf[bc * h * w..(bc + 1) * h * w];
                            for (ii, &(y0, y1, wy)) in ys.iter().enumerate() {
                                for (jj, &(x0, x1, wx)) in zs.iter().enumerate() {
                                    let gv = gplane[ii * w_out + jj];
                                    oplane[y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * gv;
                                    oplane[y0 * w + x1] += (1.0 - wy) * wx * gv;
                                    oplane[y1 * w + x0] += wy * (1.0 - wx) * gv;
                                    oplane[y1 * w + x1] += wy * wx * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::PadZero { x, left, top } => {
                if self.requires(*x) {
                    let os = self.nodes[i].value.shape();
                    let is = self.nodes[*x].value.shape();
                    let (ho, wo) = (os[2], os[3]);
                    let (h, w) = (is[2], is[3]);
                    let planes = is[0] * is[1];
                    let (left, top) = (*left, *top);
                    Self::accumulate(adj, *x, planes * h * w, |buf| {
                        for bc in 0..planes {
                            let gplane = &g[bc * ho * wo..(bc + 1) * ho * wo];
                            let oplane = &mut buf[bc * h * w..(bc + 1) * h * w];
                            for ii in 0..h {
                                let src = (ii + top) * wo + left;
                                for jj in 0..w {
                                    oplane[ii * w + jj] += gplane[src + jj];
                                }
                            }
                        }
                    });
                }
            }
            Op::Reshape { x } => {
                if self.requires(*x) {
                    Self::accumulate(adj, *x, g.len(), |buf| {
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o += gv;
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, softmax, labels } => {
                if self.requires(*logits) {
                    let classes = softmax.len() / labels.len();
                    Self::accumulate(adj, *logits, softmax.len(), |buf| {
                        for (b, (&gv, &y)) in g.iter().zip(labels).enumerate() {
                            let row = &softmax[b * classes..(b + 1) * classes];
                            let out = &mut buf[b * classes..(b + 1) * classes];
                            for (c, (o, &p)) in out.iter_mut().zip(row).enumerate() {
                                *o += gv * (p - if c == y { 1.0 } else { 0.0 });
                            }
                        }
                    });
                }
            }
            Op::SumAll(x) => {
                if self.requires(*x) {
                    let n = self.nodes[*x].value.numel();
                    let gv = g[0];
                    Self::accumulate(adj, *x, n, |buf| {
                        for o in buf.iter_mut() {
                            *o += gv;
                        }
                    });
                }
            }
            Op::MeanAll(x) => {
                if self.requires(*x) {
                    let n = self.nodes[*x].value.numel();
                    let gv = g[0] / n as f64;
                    Self::accumulate(adj, *x, n, |buf| {
                        for o in buf.iter_mut() {
                            *o += gv;
                        }
                    });
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.requires(*x) {
                    let gv = g[0];
                    Self::accumulate(adj, *x, weights.len(), |buf| {
                        for (o, &w) in buf.iter_mut().zip(weights) {
                            *o += gv * w;
                        }
                    });
                }
            }
        }
    }

    fn backward_conv2d(
        &self,
        node: usize,
        x: usize,
        w: usize,
        pad: usize,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let xs = self.nodes[x].value.shape();
        let ws = self.nodes[w].value.shape();
        let os = self.nodes[node].value.shape();
        let (batch, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = (os[2], os[3]);
        let kdim = cin * kh * kw;
        let ldim = ho * wo;
        let need_dx = self.requires(x);
        let need_dw = self.requires(w);
        let xd = self.nodes[x].value.data();
        let wd = self.nodes[w].value.data();

        let mut dx = if need_dx { vec![0.0; batch * cin * h * wdt] } else { Vec::new() };
        let mut dw = if need_dw { vec![0.0; cout * kdim] } else { Vec::new() };
        let mut col = vec![0.0; kdim * ldim];
        for b in 0..batch {
            let gmat = &g[b * cout * ldim..(b + 1) * cout * ldim];
            if need_dw {
                im2col(&xd[b * cin * h * wdt..], cin, h, wdt, kh, kw, pad, &mut col);
                // dW += g (cout,L) * col^T (L,kdim)
                let contrib = matmul_nt(gmat, &col, cout, ldim, kdim);
                for (o, v) in dw.iter_mut().zip(contrib) {
                    *o += v;
                }
            }
            if need_dx {
                // dCol = W^T (kdim,cout) * g (cout,L)
                let dcol = matmul_tn(wd, gmat, cout, kdim, ldim);
                col2im_add(&dcol, cin, h, wdt, kh, kw, pad, &mut dx[b * cin * h * wdt..]);
            }
        }
        if need_dx {
            Self::accumulate(adj, x, dx.len(), |buf| {
                for (o, v) in buf.iter_mut().zip(dx) {
                    *o += v;
                }
            });
        }
        if need_dw {
            Self::accumulate(adj, w, dw.len(), |buf| {
                for (o, v) in buf.iter_mut().zip(dw) {
                    *o += v;
                }
            });
        }
    }
}

/// For each output position, the two source indices and the fractional
/// weight of the second one (corner-aligned sampling).
fn sample_positions(extent_in: usize, extent_out: usize) -> Vec<(usize, usize, f64)> {
    (0..extent_out)
        .map(|i| {
            if extent_out == 1 || extent_in == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (extent_in - 1) as f64 / (extent_out - 1) as f64;
            let p0 = pos.floor() as usize;
            let p0 = p0.min(extent_in - 1);
            let p1 = (p0 + 1).min(extent_in - 1);
            (p0, p1, pos - p0 as f64)
        })
        .collect()
}

/// Unfold one sample (Cin,H,W) into a (Cin*kh*kw, Ho*Wo) patch matrix.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, kh: usize, kw: usize, pad: usize, col: &mut [f64]) {
    let ho = h + 2 * pad - kh + 1;
    let wo = w + 2 * pad - kw + 1;
    let ldim = ho * wo;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[(c * kh * kw + ki * kw + kj) * ldim..][..ldim];
                for oi in 0..ho {
                    let si = oi + ki;
                    for oj in 0..wo {
                        let sj = oj + kj;
                        row[oi * wo + oj] = if si >= pad && si < h + pad && sj >= pad && sj < w + pad
                        {
                            plane[(si - pad) * w + (sj - pad)]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch matrix back onto one sample (Cin,H,W).
fn col2im_add(
    col: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    out: &mut [f64],
) {
    let ho = h + 2 * pad - kh + 1;
    let wo = w + 2 * pad - kw + 1;
    let ldim = ho * wo;
    for c in 0..cin {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &col[(c * kh * kw + ki * kw + kj) * ldim..][..ldim];
                for oi in 0..ho {
                    let si = oi + ki;
                    if si < pad || si >= h + pad {
                        continue;
                    }
                    for oj in 0..wo {
                        let sj = oj + kj;
                        if sj >= pad && sj < w + pad {
                            plane[(si - pad) * w + (sj - pad)] += row[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let root = tape.sum_all(sq);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_of_constant_graph_yields_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), false);
        let y = tape.leaf(Tensor::new(vec![2], vec![5.0, 5.0]).unwrap(), true);
        let s = tape.mul(x, x).unwrap();
        let root = tape.sum_all(s);
        let grads = tape.backward(root).unwrap();
        assert!(grads.wrt(x).is_none());
        assert!(grads.wrt(y).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn repeated_backwards_are_independent() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let root = tape.sum_all(sq);
        let g1 = tape.backward(root).unwrap();
        let g2 = tape.backward(root).unwrap();
        assert_eq!(g1.wrt(x).unwrap(), g2.wrt(x).unwrap());
    }

    #[test]
    fn two_roots_on_one_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 4.0]).unwrap(), true);
        let a = tape.sum_all(x);
        let sq = tape.mul(x, x).unwrap();
        let b = tape.sum_all(sq);
        let ga = tape.backward(a).unwrap();
        let gb = tape.backward(b).unwrap();
        assert_eq!(ga.wrt(x).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(gb.wrt(x).unwrap().data(), &[2.0, 8.0]);
    }

    #[test]
    fn linearity_of_backward() {
        // grad of a*f + b*g == a*grad f + b*grad g within 1e-12
        use rand::Rng;
        let mut rng = crate::rng::stream(21, &[0]);
        for _ in 0..20 {
            let xv =
                Tensor::new(vec![4], (0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
                    .unwrap();
            let (a, b) = (rng.gen::<f64>() * 3.0 - 1.5, rng.gen::<f64>() * 3.0 - 1.5);

            let mut tape = Tape::new();
            let x = tape.leaf(xv.clone(), true);
            // f = sum(x*x), g = sum(x)
            let sq = tape.mul(x, x).unwrap();
            let f = tape.sum_all(sq);
            let gg = tape.sum_all(x);
            let fa = tape.scale(f, a);
            let gb = tape.scale(gg, b);
            let root = tape.add(fa, gb).unwrap();
            let combined = tape.backward(root).unwrap();
            let gf = tape.backward(f).unwrap();
            let gg2 = tape.backward(gg).unwrap();
            for i in 0..4 {
                let lhs = combined.wrt(x).unwrap().data()[i];
                let rhs = a * gf.wrt(x).unwrap().data()[i] + b * gg2.wrt(x).unwrap().data()[i];
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![2, 3], vec![2.0, 1.0, 0.1, -1.0, 0.0, 1.0]).unwrap(), true);
        let losses = tape.cross_entropy(logits, &[0, 2]).unwrap();
        let manual = |row: &[f64], y: usize| {
            let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
            lse - row[y]
        };
        let got = tape.value(losses).data().to_vec();
        assert!((got[0] - manual(&[2.0, 1.0, 0.1], 0)).abs() < 1e-12);
        assert!((got[1] - manual(&[-1.0, 0.0, 1.0], 2)).abs() < 1e-12);
        assert!(got.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn cross_entropy_linear_softmax_closed_form() {
        // Identity weights, zero bias, x = (0,0), label 0:
        // p = (0.5, 0.5), grad wrt logits = p - onehot = (-0.5, 0.5);
        // with identity weights the input gradient equals it.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), true);
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
        let logits = tape.matmul(x, w).unwrap();
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        let root = tape.sum_all(loss);
        let grads = tape.backward(root).unwrap();
        let gx = grads.wrt(x).unwrap();
        assert!((gx.data()[0] - -0.5).abs() < 1e-12);
        assert!((gx.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn shift_adjoint_on_tape() {
        use rand::Rng;
        let mut rng = crate::rng::stream(22, &[0]);
        let xv = Tensor::new(vec![1, 1, 4, 3], (0..12).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let weights: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone(), true);
        let shifted = tape.circular_shift(x, &[2, -1]);
        let root = tape.weighted_sum(shifted, &weights).unwrap();
        let grads = tape.backward(root).unwrap();
        // adjoint must be the inverse shift of the weights
        let expect = Tensor::new(vec![1, 1, 4, 3], weights).unwrap().circular_shift(&[-2, 1]);
        assert_eq!(grads.wrt(x).unwrap(), &expect);
    }

    #[test]
    fn resize_same_size_is_identity() {
        use rand::Rng;
        let mut rng = crate::rng::stream(23, &[0]);
        let xv = Tensor::new(vec![2, 1, 5, 4], (0..40).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone(), false);
        let y = tape.resize_bilinear(x, 5, 4).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(xv.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[1, 1, 2, 2], 0.3), false);
        let y = tape.resize_bilinear(x, 4, 4).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn pad_zero_places_content() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let y = tape.pad_zero(x, 1, 0, 0, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 1, 3, 3]);
        assert_eq!(v.data(), &[0.0, 1.0, 2.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pad_zero_width_zero_is_identity() {
        let xv = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone(), false);
        let y = tape.pad_zero(x, 0, 0, 0, 0).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn max_pool_forward_and_argmax_routing() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(
                vec![1, 1, 2, 4],
                vec![1.0, 5.0, 2.0, 0.0, 3.0, -1.0, 7.0, 4.0],
            )
            .unwrap(),
            true,
        );
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 7.0]);
        let root = tape.sum_all(y);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn conv2d_impulse_response() {
        // A unit impulse correlated with a kernel stamps the kernel.
        let mut xv = Tensor::zeros(&[1, 1, 5, 5]);
        xv.data_mut()[12] = 1.0; // center
        let kv = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(xv, false);
        let k = tape.leaf(kv, false);
        let y = tape.conv2d(x, k, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 1, 5, 5]);
        // correlation flips the stamp
        let expect = [9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        for di in 0..3 {
            for dj in 0..3 {
                assert_eq!(v.data()[(1 + di) * 5 + 1 + dj], expect[di * 3 + dj]);
            }
        }
    }
}
