//! Wengert tape: records forward operations, replays them in reverse.
//!
//! Nodes are appended in topological order by construction (an op can
//! only reference ids that already exist), so the backward pass is a
//! single reverse sweep with additive gradient accumulation at fan-out.

use super::kernels;
use super::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right operand of an elementwise op maps onto the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// One value per channel; `stride` is the flat stride of the channel
    /// dimension, `count` the channel extent.
    PerChannel { stride: usize, count: usize },
}

impl Bcast {
    #[inline]
    fn index(&self, i: usize) -> usize {
        match *self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::PerChannel { stride, count } => (i / stride) % count,
        }
    }
}

/// Recorded operation; inputs are node ids, payloads are whatever the
/// backward rule needs beyond the stored values.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Elementwise { kind: EwKind, a: NodeId, b: NodeId, bcast: Bcast },
    Scale { a: NodeId, c: f32 },
    Abs { a: NodeId },
    Silu { a: NodeId },
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Conv2d { x: NodeId, k: NodeId, stride: usize, padding: usize },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f32, mean: Vec<f32>, rstd: Vec<f32> },
    AvgPool2 { x: NodeId },
    UpsampleNearest2 { x: NodeId },
    ConcatChannels { a: NodeId, b: NodeId },
    AddChannelBias { x: NodeId, b: NodeId },
    Sum { a: NodeId },
    Mean { a: NodeId },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    op: Op,
    requires: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Not shared across threads; build one per training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor; it participates in gradients iff
    /// `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let requires = t.requires_grad;
        self.push(t, Op::Leaf, requires)
    }

    /// Register an input that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of a node, if backward reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> NodeId {
        self.nodes.push(Node { value, grad: None, op, requires });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise(EwKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise(EwKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise(EwKind::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise(EwKind::Div, a, b)
    }

    /// Elementwise combine; `b` may match `a` exactly, be a single scalar,
    /// or hold one value per channel of `a`.
    pub fn elementwise(&mut self, kind: EwKind, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (asp, bsp) = (self.nodes[a.0].value.shape().to_vec(), self.nodes[b.0].value.shape().to_vec());
        let bcast = resolve_broadcast(&asp, &bsp)?;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(av.len());
        for (i, &x) in av.iter().enumerate() {
            let y = bv[bcast.index(i)];
            out.push(match kind {
                EwKind::Add => x + y,
                EwKind::Sub => x - y,
                EwKind::Mul => x * y,
                EwKind::Div => x / y,
            });
        }
        let requires = self.requires(a) || self.requires(b);
        let value = Tensor::new(&asp, out).expect("elementwise output shape");
        Ok(self.push(value, Op::Elementwise { kind, a, b, bcast }, requires))
    }

    /// Multiply by a compile-time scalar.
    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v * c);
        let requires = self.requires(a);
        self.push(value, Op::Scale { a, c }, requires)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(f32::abs);
        let requires = self.requires(a);
        self.push(value, Op::Abs { a }, requires)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(|x| x * sigmoid(x));
        let requires = self.requires(a);
        self.push(value, Op::Silu { a }, requires)
    }

    /// `a[m,k] * b[k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let asp = self.nodes[a.0].value.shape().to_vec();
        let bsp = self.nodes[b.0].value.shape().to_vec();
        if asp.len() != 2 || bsp.len() != 2 || asp[1] != bsp[0] {
            return Err(TensorError::ShapeMismatch { left: asp, right: bsp });
        }
        let (m, k, n) = (asp[0], asp[1], bsp[1]);
        let out = kernels::matmul(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, k, n);
        let requires = self.requires(a) || self.requires(b);
        let value = Tensor::new(&[m, n], out).expect("matmul output shape");
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, requires))
    }

    /// Cross-correlation of `x[N,C,H,W]` with kernels `k[F,C,kh,kw]`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, padding: usize) -> Result<NodeId, TensorError> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ks = self.nodes[k.0].value.shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(TensorError::ShapeMismatch { left: xs, right: ks });
        }
        if xs[1] != ks[1] {
            return Err(TensorError::ChannelMismatch { input: xs[1], kernel: ks[1] });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ks[0], ks[2], ks[3]);
        let (oh, ow) = match (
            kernels::conv_out_dim(h, kh, stride, padding),
            kernels::conv_out_dim(w, kw, stride, padding),
        ) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(TensorError::BadConvGeometry { input: xs, kernel: ks, stride, padding });
            }
        };
        let cols = oh * ow;
        let kdim = c * kh * kw;
        let mut out = vec![0.0f32; n * f * cols];
        for ni in 0..n {
            let x_n = &self.nodes[x.0].value.data()[ni * c * h * w..(ni + 1) * c * h * w];
            let col = kernels::im2col(x_n, c, h, w, kh, kw, stride, padding, oh, ow);
            let y = kernels::matmul(self.nodes[k.0].value.data(), &col, f, kdim, cols);
            out[ni * f * cols..(ni + 1) * f * cols].copy_from_slice(&y);
        }
        let requires = self.requires(x) || self.requires(k);
        let value = Tensor::new(&[n, f, oh, ow], out).expect("conv output shape");
        Ok(self.push(value, Op::Conv2d { x, k, stride, padding }, requires))
    }

    /// Group normalization over `x[N,C,H,W]` with affine `gamma[C]`, `beta[C]`.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f32,
    ) -> Result<NodeId, TensorError> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(TensorError::ShapeMismatch { left: xs, right: vec![0, 0, 0, 0] });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::BadGroupCount { channels: c, groups });
        }
        for affine in [gamma, beta] {
            let s = self.nodes[affine.0].value.shape();
            if s != [c] {
                return Err(TensorError::ShapeMismatch { left: vec![c], right: s.to_vec() });
            }
        }
        let gsize = (c / groups) * h * w;
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        let mut mean = vec![0.0f32; n * groups];
        let mut rstd = vec![0.0f32; n * groups];
        let mut out = vec![0.0f32; xv.len()];
        for ni in 0..n {
            for g in 0..groups {
                let base = ni * c * h * w + g * gsize;
                let xs_g = &xv[base..base + gsize];
                let mu = (xs_g.iter().map(|&v| v as f64).sum::<f64>() / gsize as f64) as f32;
                let var = (xs_g.iter().map(|&v| ((v - mu) as f64).powi(2)).sum::<f64>() / gsize as f64) as f32;
                let rs = 1.0 / (var + eps).sqrt();
                mean[ni * groups + g] = mu;
                rstd[ni * groups + g] = rs;
                let ch_per_g = c / groups;
                for cc in 0..ch_per_g {
                    let ch = g * ch_per_g + cc;
                    let (ga, be) = (gv[ch], bv[ch]);
                    let off = base + cc * h * w;
                    for i in 0..h * w {
                        out[off + i] = (xv[off + i] - mu) * rs * ga + be;
                    }
                }
            }
        }
        let requires = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let value = Tensor::new(&xs, out).expect("group norm output shape");
        Ok(self.push(value, Op::GroupNorm { x, gamma, beta, groups, eps, mean, rstd }, requires))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(TensorError::ShapeMismatch { left: xs, right: vec![0, 0, 0, 0] });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::SpatialIndivisible { h, w, factor: 2 });
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        for nc in 0..n * c {
            let src = &xv[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = 2 * oy * w + 2 * ox;
                    dst[oy * ow + ox] = 0.25 * ((src[i] + src[i + 1]) + (src[i + w] + src[i + w + 1]));
                }
            }
        }
        let requires = self.requires(x);
        let value = Tensor::new(&[n, c, oh, ow], out).expect("avg pool output shape");
        Ok(self.push(value, Op::AvgPool2 { x }, requires))
    }

    /// 2x nearest-neighbor upsampling.
    pub fn upsample_nearest2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(TensorError::ShapeMismatch { left: xs, right: vec![0, 0, 0, 0] });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * 2, w * 2);
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        for nc in 0..n * c {
            let src = &xv[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for y in 0..oh {
                let sy = y / 2;
                for x_ in 0..ow {
                    dst[y * ow + x_] = src[sy * w + x_ / 2];
                }
            }
        }
        let requires = self.requires(x);
        let value = Tensor::new(&[n, c, oh, ow], out).expect("upsample output shape");
        Ok(self.push(value, Op::UpsampleNearest2 { x }, requires))
    }

    /// Concatenate along the channel dimension.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let asp = self.nodes[a.0].value.shape().to_vec();
        let bsp = self.nodes[b.0].value.shape().to_vec();
        if asp.len() != 4
            || bsp.len() != 4
            || asp[0] != bsp[0]
            || asp[2] != bsp[2]
            || asp[3] != bsp[3]
        {
            return Err(TensorError::ShapeMismatch { left: asp, right: bsp });
        }
        let (n, c1, h, w) = (asp[0], asp[1], asp[2], asp[3]);
        let c2 = bsp[1];
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0f32; n * (c1 + c2) * h * w];
        let plane = h * w;
        for ni in 0..n {
            let dst = &mut out[ni * (c1 + c2) * plane..(ni + 1) * (c1 + c2) * plane];
            dst[..c1 * plane].copy_from_slice(&av[ni * c1 * plane..(ni + 1) * c1 * plane]);
            dst[c1 * plane..].copy_from_slice(&bv[ni * c2 * plane..(ni + 1) * c2 * plane]);
        }
        let requires = self.requires(a) || self.requires(b);
        let value = Tensor::new(&[n, c1 + c2, h, w], out).expect("concat output shape");
        Ok(self.push(value, Op::ConcatChannels { a, b }, requires))
    }

    /// Add a per-sample per-channel bias `b[N,C]` onto `x[N,C,H,W]`.
    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let bs = self.nodes[b.0].value.shape().to_vec();
        if xs.len() != 4 || bs != [xs[0], xs[1]] {
            return Err(TensorError::ShapeMismatch { left: xs, right: bs });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let xv = self.nodes[x.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(xv.len());
        for nc in 0..n * c {
            let add = bv[nc];
            out.extend(xv[nc * plane..(nc + 1) * plane].iter().map(|&v| v + add));
        }
        let requires = self.requires(x) || self.requires(b);
        let value = Tensor::new(&xs, out).expect("channel bias output shape");
        Ok(self.push(value, Op::AddChannelBias { x, b }, requires))
    }

    /// Reduce to a scalar by summation.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().map(|&v| v as f64).sum();
        let requires = self.requires(a);
        self.push(Tensor::scalar(s as f32), Op::Sum { a }, requires)
    }

    /// Reduce to a scalar by arithmetic mean.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.numel().max(1);
        let s: f64 = self.nodes[a.0].value.data().iter().map(|&v| v as f64).sum();
        let requires = self.requires(a);
        self.push(Tensor::scalar((s / n as f64) as f32), Op::Mean { a }, requires)
    }

    /// Mean absolute error between two equal-shaped nodes.
    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Populate gradients of every reachable node that requires them.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let lshape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: lshape });
        }
        self.ensure_grad(loss);
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] = 1.0;
        }
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let g = self.nodes[idx].grad.clone().expect("grad present");
            self.backprop_one(idx, &op, &g);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: NodeId) {
        let n = self.nodes[id.0].value.numel();
        if self.nodes[id.0].grad.is_none() {
            self.nodes[id.0].grad = Some(vec![0.0; n]);
        }
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f32]) {
        if !self.requires(id) {
            return;
        }
        self.ensure_grad(id);
        let g = self.nodes[id.0].grad.as_mut().expect("grad allocated");
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi += d;
        }
    }

    fn backprop_one(&mut self, idx: usize, op: &Op, g: &[f32]) {
        match *op {
            Op::Leaf => {}
            Op::Elementwise { kind, a, b, bcast } => {
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                if self.requires(a) {
                    let mut da = vec![0.0f32; av.len()];
                    for i in 0..av.len() {
                        let bval = bv[bcast.index(i)];
                        da[i] = match kind {
                            EwKind::Add => g[i],
                            EwKind::Sub => g[i],
                            EwKind::Mul => g[i] * bval,
                            EwKind::Div => g[i] / bval,
                        };
                    }
                    self.accumulate(a, &da);
                }
                if self.requires(b) {
                    let mut db = vec![0.0f32; bv.len()];
                    for i in 0..av.len() {
                        let j = bcast.index(i);
                        let bval = bv[j];
                        db[j] += match kind {
                            EwKind::Add => g[i],
                            EwKind::Sub => -g[i],
                            EwKind::Mul => g[i] * av[i],
                            EwKind::Div => -g[i] * av[i] / (bval * bval),
                        };
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::Scale { a, c } => {
                if self.requires(a) {
                    let da: Vec<f32> = g.iter().map(|&v| v * c).collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Abs { a } => {
                if self.requires(a) {
                    let av = self.nodes[a.0].value.data();
                    let da: Vec<f32> = g
                        .iter()
                        .zip(av)
                        .map(|(&gi, &x)| if x > 0.0 { gi } else if x < 0.0 { -gi } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Silu { a } => {
                if self.requires(a) {
                    let av = self.nodes[a.0].value.data();
                    let da: Vec<f32> = g
                        .iter()
                        .zip(av)
                        .map(|(&gi, &x)| {
                            let s = sigmoid(x);
                            gi * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.requires(a) {
                    let da = kernels::matmul_bt(g, self.nodes[b.0].value.data(), m, n, k);
                    self.accumulate(a, &da);
                }
                if self.requires(b) {
                    let db = kernels::matmul_at(self.nodes[a.0].value.data(), g, m, k, n);
                    self.accumulate(b, &db);
                }
            }
            Op::Conv2d { x, k, stride, padding } => {
                self.backprop_conv(idx, x, k, stride, padding, g);
            }
            Op::GroupNorm { x, gamma, beta, groups, eps: _, ref mean, ref rstd } => {
                self.backprop_group_norm(x, gamma, beta, groups, mean, rstd, g);
            }
            Op::AvgPool2 { x } => {
                if self.requires(x) {
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut dx = vec![0.0f32; n * c * h * w];
                    for nc in 0..n * c {
                        let src = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let d = 0.25 * src[oy * ow + ox];
                                let i = 2 * oy * w + 2 * ox;
                                dst[i] += d;
                                dst[i + 1] += d;
                                dst[i + w] += d;
                                dst[i + w + 1] += d;
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::UpsampleNearest2 { x } => {
                if self.requires(x) {
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (oh, ow) = (h * 2, w * 2);
                    let mut dx = vec![0.0f32; n * c * h * w];
                    for nc in 0..n * c {
                        let src = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
                        for y in 0..oh {
                            for x_ in 0..ow {
                                dst[(y / 2) * w + x_ / 2] += src[y * ow + x_];
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::ConcatChannels { a, b } => {
                let asp = self.nodes[a.0].value.shape().to_vec();
                let bsp = self.nodes[b.0].value.shape().to_vec();
                let (n, c1, h, w) = (asp[0], asp[1], asp[2], asp[3]);
                let c2 = bsp[1];
                let plane = h * w;
                if self.requires(a) {
                    let mut da = vec![0.0f32; n * c1 * plane];
                    for ni in 0..n {
                        let src = &g[ni * (c1 + c2) * plane..ni * (c1 + c2) * plane + c1 * plane];
                        da[ni * c1 * plane..(ni + 1) * c1 * plane].copy_from_slice(src);
                    }
                    self.accumulate(a, &da);
                }
                if self.requires(b) {
                    let mut db = vec![0.0f32; n * c2 * plane];
                    for ni in 0..n {
                        let start = ni * (c1 + c2) * plane + c1 * plane;
                        db[ni * c2 * plane..(ni + 1) * c2 * plane]
                            .copy_from_slice(&g[start..start + c2 * plane]);
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::AddChannelBias { x, b } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plane = h * w;
                if self.requires(x) {
                    self.accumulate(x, g);
                }
                if self.requires(b) {
                    let mut db = vec![0.0f32; n * c];
                    for nc in 0..n * c {
                        db[nc] = g[nc * plane..(nc + 1) * plane].iter().sum();
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::Sum { a } => {
                if self.requires(a) {
                    let n = self.nodes[a.0].value.numel();
                    self.accumulate(a, &vec![g[0]; n]);
                }
            }
            Op::Mean { a } => {
                if self.requires(a) {
                    let n = self.nodes[a.0].value.numel();
                    self.accumulate(a, &vec![g[0] / n as f32; n]);
                }
            }
        }
    }

    fn backprop_conv(&mut self, _idx: usize, x: NodeId, k: NodeId, stride: usize, padding: usize, g: &[f32]) {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ks = self.nodes[k.0].value.shape().to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ks[0], ks[2], ks[3]);
        let oh = kernels::conv_out_dim(h, kh, stride, padding).expect("checked at forward");
        let ow = kernels::conv_out_dim(w, kw, stride, padding).expect("checked at forward");
        let cols = oh * ow;
        let kdim = c * kh * kw;
        let need_dx = self.requires(x);
        let need_dk = self.requires(k);
        let mut dx = if need_dx { vec![0.0f32; n * c * h * w] } else { Vec::new() };
        let mut dk = if need_dk { vec![0.0f32; f * kdim] } else { Vec::new() };
        for ni in 0..n {
            let g_n = &g[ni * f * cols..(ni + 1) * f * cols];
            if need_dk {
                let x_n = &self.nodes[x.0].value.data()[ni * c * h * w..(ni + 1) * c * h * w];
                let col = kernels::im2col(x_n, c, h, w, kh, kw, stride, padding, oh, ow);
                let dkn = kernels::matmul_bt(g_n, &col, f, cols, kdim);
                for (d, v) in dk.iter_mut().zip(&dkn) {
                    *d += v;
                }
            }
            if need_dx {
                let dcol = kernels::matmul_at(self.nodes[k.0].value.data(), g_n, f, kdim, cols);
                kernels::col2im_accumulate(
                    &dcol,
                    c,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    padding,
                    oh,
                    ow,
                    &mut dx[ni * c * h * w..(ni + 1) * c * h * w],
                );
            }
        }
        if need_dx {
            self.accumulate(x, &dx);
        }
        if need_dk {
            self.accumulate(k, &dk);
        }
    }

    fn backprop_group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        mean: &[f32],
        rstd: &[f32],
        g: &[f32],
    ) {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ch_per_g = c / groups;
        let gsize = ch_per_g * h * w;
        let plane = h * w;
        let xv = self.nodes[x.0].value.data().to_vec();
        let gv = self.nodes[gamma.0].value.data().to_vec();
        let need_dx = self.requires(x);
        let need_dg = self.requires(gamma);
        let need_db = self.requires(beta);
        let mut dx = if need_dx { vec![0.0f32; xv.len()] } else { Vec::new() };
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        for ni in 0..n {
            for grp in 0..groups {
                let base = ni * c * plane + grp * gsize;
                let mu = mean[ni * groups + grp];
                let rs = rstd[ni * groups + grp];
                // First pass: affine grads and the two group sums.
                let mut sum_dxhat = 0.0f64;
                let mut sum_dxhat_xhat = 0.0f64;
                for cc in 0..ch_per_g {
                    let ch = grp * ch_per_g + cc;
                    let off = base + cc * plane;
                    let ga = gv[ch];
                    for i in 0..plane {
                        let xhat = (xv[off + i] - mu) * rs;
                        let gi = g[off + i];
                        dgamma[ch] += gi * xhat;
                        dbeta[ch] += gi;
                        let dxhat = gi * ga;
                        sum_dxhat += dxhat as f64;
                        sum_dxhat_xhat += (dxhat * xhat) as f64;
                    }
                }
                if need_dx {
                    let s1 = (sum_dxhat / gsize as f64) as f32;
                    let s2 = (sum_dxhat_xhat / gsize as f64) as f32;
                    for cc in 0..ch_per_g {
                        let ch = grp * ch_per_g + cc;
                        let off = base + cc * plane;
                        let ga = gv[ch];
                        for i in 0..plane {
                            let xhat = (xv[off + i] - mu) * rs;
                            let dxhat = g[off + i] * ga;
                            dx[off + i] = rs * (dxhat - s1 - xhat * s2);
                        }
                    }
                }
            }
        }
        if need_dx {
            self.accumulate(x, &dx);
        }
        if need_dg {
            self.accumulate(gamma, &dgamma);
        }
        if need_db {
            self.accumulate(beta, &dbeta);
        }
    }
}

fn resolve_broadcast(a: &[usize], b: &[usize]) -> Result<Bcast, TensorError> {
    if a == b {
        return Ok(Bcast::Same);
    }
    let b_numel: usize = b.iter().product();
    if b_numel == 1 {
        return Ok(Bcast::Scalar);
    }
    // Per-channel: channel dim is 1 for NCHW / NE layouts, 0 for CHW.
    let chan_dim = match a.len() {
        4 | 2 => 1,
        3 => 0,
        _ => {
            return Err(TensorError::ShapeMismatch { left: a.to_vec(), right: b.to_vec() });
        }
    };
    if b.len() == 1 && b[0] == a[chan_dim] {
        let stride: usize = a[chan_dim + 1..].iter().product();
        return Ok(Bcast::PerChannel { stride, count: a[chan_dim] });
    }
    Err(TensorError::ShapeMismatch { left: a.to_vec(), right: b.to_vec() })
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
