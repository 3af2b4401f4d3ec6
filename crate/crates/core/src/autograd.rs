//! Tape-based reverse-mode differentiation over NCHW tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Leaves are
//! either constants (never differentiated) or parameters. [`Graph::backward`]
//! walks the tape in reverse from a scalar and returns the gradients of all
//! parameter leaves that the scalar depends on.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, k: f32 },
    Grl { x: Var, lambda: f32 },
    Upsample2x { x: Var },
    Concat { parts: Vec<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, invstd: Vec<f32>, batch_stats: bool },
    MulMask { x: Var, mask: Vec<f32> },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    DomainFocal { logits: Var, labels: Vec<f32>, weights: Vec<f32>, gamma: f32, eps: f32 },
    MaskedMse { a: Var, b: Var, mask: Vec<f32>, denom: f32 },
    WeightedSum { parts: Vec<(Var, f32)> },
    SigmoidFocal { logits: Var, targets: Vec<f32>, alpha: f32, gamma: f32, norm: f32 },
    SmoothL1 { pred: Var, target: Vec<f32>, weight: Vec<f32>, beta: f32, norm: f32 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of parameter leaves, indexed by the leaf's [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Param, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Per-channel batch mean and biased variance recorded by a training-mode
    /// batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(Vec<f32>, Vec<f32>)> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, invstd, batch_stats: true, .. } => {
                let var = invstd.iter().map(|s| 1.0 / (s * s) - BN_EPS).collect();
                Some((mean.clone(), var))
            }
            _ => None,
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Relu { x }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= k);
        let ng = self.ng(x);
        self.push(out, Op::Scale { x, k }, ng)
    }

    /// Identity forward; the backward pass multiplies incoming gradients by `-lambda`.
    pub fn grl(&mut self, x: Var, lambda: f32) -> Var {
        let out = self.value(x).clone();
        let ng = self.ng(x);
        self.push(out, Op::Grl { x, lambda }, ng)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let src = t.data();
        let dst = out.data_mut();
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut dst[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Upsample2x { x }, ng)
    }

    /// Concatenation along the batch dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::stack(&tensors)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }, ng))
    }

    /// Batch normalization over `[N, H, W]` per channel. With `stats = None`
    /// the batch statistics are used; otherwise the given running mean/var.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: Option<(&[f32], &[f32])>) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let hw = h * w;
        let m = (n * hw) as f64;
        let (mean, invstd, batch_stats) = match stats {
            Some((rm, rv)) => {
                (rm.to_vec(), rv.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect::<Vec<f32>>(), false)
            }
            None => {
                let mut mean = vec![0.0f32; c];
                let mut invstd = vec![0.0f32; c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    let mut s2 = 0.0f64;
                    for s_i in 0..n {
                        for &v in &t.data()[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw] {
                            s += v as f64;
                            s2 += (v as f64) * (v as f64);
                        }
                    }
                    let mu = s / m;
                    let var = (s2 / m - mu * mu).max(0.0);
                    mean[ch] = mu as f32;
                    invstd[ch] = (1.0 / (var + BN_EPS as f64).sqrt()) as f32;
                }
                (mean, invstd, true)
            }
        };
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = t.clone();
        let d = out.data_mut();
        for s_i in 0..n {
            for ch in 0..c {
                let (mu, is, gg, bb) = (mean[ch], invstd[ch], g[ch], b[ch]);
                for v in &mut d[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw] {
                    *v = gg * (*v - mu) * is + bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::BatchNorm { x, gamma, beta, mean, invstd, batch_stats }, ng)
    }

    /// Elementwise product with a fixed mask of the same length (dropout).
    pub fn mul_mask(&mut self, x: Var, mask: Vec<f32>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape("mask length mismatch".into()));
        }
        let mut out = self.value(x).clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::MulMask { x, mask }, ng))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = self.value(x).spatial_mean();
        let ng = self.ng(x);
        self.push(out, Op::GlobalAvgPool { x }, ng)
    }

    /// `[N, in] x [out, in]^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xt = self.value(x);
        let wt = self.value(w);
        let (n, fin) = (xt.shape()[0], xt.len() / xt.shape()[0]);
        let fout = wt.shape()[0];
        if wt.len() != fout * fin {
            return Err(Error::Shape(format!("linear input width {} vs weight {:?}", fin, wt.shape())));
        }
        let mut out = Tensor::zeros(&[n, fout]);
        gemm(n, fin, fout, xt.data(), (fin as isize, 1), wt.data(), (1, fin as isize), out.data_mut(), 0.0);
        let bd = self.value(b).data();
        for row in out.data_mut().chunks_mut(fout) {
            for (v, bb) in row.iter_mut().zip(bd) {
                *v += bb;
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    /// Weighted mean of the single-class focal loss on sigmoid logits.
    ///
    /// `labels[i]` is 1 for the positive (target) class and 0 otherwise.
    /// Probabilities are clamped to `[eps, 1 - eps]`.
    pub fn domain_focal(&mut self, logits: Var, labels: Vec<f32>, weights: Vec<f32>, gamma: f32, eps: f32) -> Result<Var> {
        let z = self.value(logits).data();
        if labels.len() != z.len() || weights.len() != z.len() {
            return Err(Error::Shape("focal labels/weights length mismatch".into()));
        }
        let wsum: f64 = weights.iter().map(|&w| w as f64).sum();
        let mut total = 0.0f64;
        for i in 0..z.len() {
            if weights[i] == 0.0 {
                continue;
            }
            let p = sigmoid(z[i]).clamp(eps, 1.0 - eps) as f64;
            let pt = if labels[i] > 0.5 { p } else { 1.0 - p };
            total += weights[i] as f64 * focal_term(pt, gamma as f64);
        }
        let v = if wsum > 0.0 { total / wsum } else { 0.0 };
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(v as f32), Op::DomainFocal { logits, labels, weights, gamma, eps }, ng))
    }

    /// Mean of `(a - b)^2` over channels and the pixels where `mask` is
    /// nonzero. `mask` has one entry per `(n, y, x)`. Empty masks give 0.
    pub fn masked_mse(&mut self, a: Var, b: Var, mask: Vec<f32>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("masked_mse {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let (n, c, h, w) = ta.dims4();
        if mask.len() != n * h * w {
            return Err(Error::Shape(format!("mask has {} entries, need {}", mask.len(), n * h * w)));
        }
        let hw = h * w;
        let count: f64 = mask.iter().map(|&m| m as f64).sum();
        let denom = (count * c as f64) as f32;
        let mut total = 0.0f64;
        if denom > 0.0 {
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * hw;
                    for p in 0..hw {
                        let m = mask[s * hw + p];
                        if m != 0.0 {
                            let d = (ta.data()[off + p] - tb.data()[off + p]) as f64;
                            total += m as f64 * d * d;
                        }
                    }
                }
            }
            total /= denom as f64;
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(total as f32), Op::MaskedMse { a, b, mask, denom }, ng))
    }

    /// `sum_i k_i * x_i` over scalar vars.
    pub fn weighted_sum(&mut self, parts: &[(Var, f32)]) -> Var {
        let v: f32 = parts.iter().map(|&(p, k)| k * self.value(p).item()).sum();
        let ng = parts.iter().any(|&(p, _)| self.ng(p));
        self.push(Tensor::scalar(v), Op::WeightedSum { parts: parts.to_vec() }, ng)
    }

    /// Alpha-balanced sigmoid focal loss summed over entries with target 0 or
    /// 1 (entries < 0 are ignored), divided by `norm`.
    pub fn sigmoid_focal(&mut self, logits: Var, targets: Vec<f32>, alpha: f32, gamma: f32, norm: f32) -> Result<Var> {
        let z = self.value(logits).data();
        if targets.len() != z.len() {
            return Err(Error::Shape("focal target length mismatch".into()));
        }
        let mut total = 0.0f64;
        for (&zi, &t) in z.iter().zip(&targets) {
            if t < 0.0 {
                continue;
            }
            let p = sigmoid(zi).clamp(1e-7, 1.0 - 1e-7) as f64;
            let (pt, a) = if t > 0.5 { (p, alpha as f64) } else { (1.0 - p, 1.0 - alpha as f64) };
            total += a * focal_term(pt, gamma as f64);
        }
        let ng = self.ng(logits);
        let v = (total / norm as f64) as f32;
        Ok(self.push(Tensor::scalar(v), Op::SigmoidFocal { logits, targets, alpha, gamma, norm }, ng))
    }

    pub fn smooth_l1(&mut self, pred: Var, target: Vec<f32>, weight: Vec<f32>, beta: f32, norm: f32) -> Result<Var> {
        let p = self.value(pred).data();
        if target.len() != p.len() || weight.len() != p.len() {
            return Err(Error::Shape("smooth_l1 length mismatch".into()));
        }
        let mut total = 0.0f64;
        for i in 0..p.len() {
            if weight[i] == 0.0 {
                continue;
            }
            let d = (p[i] - target[i]).abs();
            let l = if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
            total += (weight[i] * l) as f64;
        }
        let ng = self.ng(pred);
        let v = (total / norm as f64) as f32;
        Ok(self.push(Tensor::scalar(v), Op::SmoothL1 { pred, target, weight, beta, norm }, ng))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Param | Op::Constant) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backward_node(node, &gout, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gout,
                    *stride,
                    *pad,
                    self.ng(*x),
                    self.ng(*w),
                    b.is_some_and(|b| self.ng(b)),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu { x } => {
                let mut g = gout.clone();
                for (gv, &ov) in g.data_mut().iter_mut().zip(node.value.data()) {
                    if ov <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Scale { x, k } => {
                let mut g = gout.clone();
                g.data_mut().iter_mut().for_each(|v| *v *= k);
                self.accumulate(grads, *x, g);
            }
            Op::Grl { x, lambda } => {
                let mut g = gout.clone();
                let k = -lambda;
                g.data_mut().iter_mut().for_each(|v| *v *= k);
                self.accumulate(grads, *x, g);
            }
            Op::Upsample2x { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let mut g = Tensor::zeros(&[n, c, h, w]);
                let src = gout.data();
                let dst = g.data_mut();
                for plane in 0..n * c {
                    let s = &src[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let d = &mut dst[plane * h * w..(plane + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(y / 2) * w + xx / 2] += s[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let len = self.value(p).len();
                    if self.ng(p) {
                        let g = Tensor::new(shape, gout.data()[off..off + len].to_vec()).expect("concat split");
                        self.accumulate(grads, p, g);
                    }
                    off += len;
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, invstd, batch_stats } => {
                let xt = self.value(*x);
                let (n, c, h, w) = xt.dims4();
                let hw = h * w;
                let m = (n * hw) as f32;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for p in 0..hw {
                            let xhat = (xt.data()[off + p] - mean[ch]) * invstd[ch];
                            dgamma[ch] += gout.data()[off + p] * xhat;
                            dbeta[ch] += gout.data()[off + p];
                        }
                    }
                }
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(xt.shape());
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            let k = gam[ch] * invstd[ch];
                            for p in 0..hw {
                                let dy = gout.data()[off + p];
                                dx.data_mut()[off + p] = if *batch_stats {
                                    let xhat = (xt.data()[off + p] - mean[ch]) * invstd[ch];
                                    k / m * (m * dy - dbeta[ch] - xhat * dgamma[ch])
                                } else {
                                    k * dy
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma).expect("bn"));
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta).expect("bn"));
            }
            Op::MulMask { x, mask } => {
                let mut g = gout.clone();
                for (gv, m) in g.data_mut().iter_mut().zip(mask) {
                    *gv *= m;
                }
                self.accumulate(grads, *x, g);
            }
            Op::GlobalAvgPool { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut g = Tensor::zeros(&[n, c, h, w]);
                for (plane, chunk) in g.data_mut().chunks_mut(hw).enumerate() {
                    let v = gout.data()[plane] / hw as f32;
                    chunk.iter_mut().for_each(|e| *e = v);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let n = xt.shape()[0];
                let fin = xt.len() / n;
                let fout = wt.shape()[0];
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(xt.shape());
                    // [n, fout] x [fout, fin]
                    gemm(n, fout, fin, gout.data(), (fout as isize, 1), wt.data(), (fin as isize, 1), dx.data_mut(), 0.0);
                    self.accumulate(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = Tensor::zeros(wt.shape());
                    // [fout, n] x [n, fin]
                    gemm(fout, n, fin, gout.data(), (1, fout as isize), xt.data(), (fin as isize, 1), dw.data_mut(), 0.0);
                    self.accumulate(grads, *w, dw);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0f32; fout];
                    for row in gout.data().chunks(fout) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![fout], db).expect("linear"));
                }
            }
            Op::DomainFocal { logits, labels, weights, gamma, eps } => {
                let z = self.value(*logits);
                let wsum: f64 = weights.iter().map(|&w| w as f64).sum();
                let mut g = Tensor::zeros(z.shape());
                if wsum > 0.0 {
                    let up = gout.item() as f64 / wsum;
                    for i in 0..z.len() {
                        if weights[i] == 0.0 {
                            continue;
                        }
                        let raw = sigmoid(z.data()[i]);
                        if raw < *eps || raw > 1.0 - eps {
                            continue;
                        }
                        let p = raw as f64;
                        let positive = labels[i] > 0.5;
                        let pt = if positive { p } else { 1.0 - p };
                        let dpt_dz = if positive { p * (1.0 - p) } else { -p * (1.0 - p) };
                        let dl = focal_term_grad(pt, *gamma as f64) * dpt_dz;
                        g.data_mut()[i] = (up * weights[i] as f64 * dl) as f32;
                    }
                }
                self.accumulate(grads, *logits, g);
            }
            Op::MaskedMse { a, b, mask, denom } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, c, h, w) = ta.dims4();
                let hw = h * w;
                let mut ga = Tensor::zeros(ta.shape());
                if *denom > 0.0 {
                    let k = 2.0 * gout.item() / denom;
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            for p in 0..hw {
                                let m = mask[s * hw + p];
                                if m != 0.0 {
                                    ga.data_mut()[off + p] = k * m * (ta.data()[off + p] - tb.data()[off + p]);
                                }
                            }
                        }
                    }
                }
                if self.ng(*b) {
                    let mut gb = ga.clone();
                    gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                    self.accumulate(grads, *b, gb);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::WeightedSum { parts } => {
                for &(p, k) in parts {
                    self.accumulate(grads, p, Tensor::scalar(k * gout.item()));
                }
            }
            Op::SigmoidFocal { logits, targets, alpha, gamma, norm } => {
                let z = self.value(*logits);
                let up = gout.item() as f64 / *norm as f64;
                let mut g = Tensor::zeros(z.shape());
                for i in 0..z.len() {
                    let t = targets[i];
                    if t < 0.0 {
                        continue;
                    }
                    let raw = sigmoid(z.data()[i]);
                    if !(1e-7..=1.0 - 1e-7).contains(&raw) {
                        continue;
                    }
                    let p = raw as f64;
                    let (pt, a, dpt) =
                        if t > 0.5 { (p, *alpha as f64, p * (1.0 - p)) } else { (1.0 - p, 1.0 - *alpha as f64, -p * (1.0 - p)) };
                    g.data_mut()[i] = (up * a * focal_term_grad(pt, *gamma as f64) * dpt) as f32;
                }
                self.accumulate(grads, *logits, g);
            }
            Op::SmoothL1 { pred, target, weight, beta, norm } => {
                let p = self.value(*pred);
                let k = gout.item() / norm;
                let mut g = Tensor::zeros(p.shape());
                for i in 0..p.len() {
                    if weight[i] == 0.0 {
                        continue;
                    }
                    let d = p.data()[i] - target[i];
                    let dl = if d.abs() < *beta { d / beta } else { d.signum() };
                    g.data_mut()[i] = k * weight[i] * dl;
                }
                self.accumulate(grads, *pred, g);
            }
        }
    }
}

const BN_EPS: f32 = 1e-5;

/// `-(1 - pt)^gamma * ln(pt)`.
pub fn focal_term(pt: f64, gamma: f64) -> f64 {
    -(1.0 - pt).powf(gamma) * pt.ln()
}

/// d/dpt of [`focal_term`].
fn focal_term_grad(pt: f64, gamma: f64) -> f64 {
    let one_minus = 1.0 - pt;
    let lead = if gamma == 0.0 { 0.0 } else { gamma * one_minus.powf(gamma - 1.0) * pt.ln() };
    lead - one_minus.powf(gamma) / pt
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, cols: &mut [f32]) {
    let hw = ho * wo;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f32], cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, dx: &mut [f32]) {
    let hw = ho * wo;
    for c in 0..cin {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    if x.shape().len() != 4 || w.shape().len() != 4 {
        return Err(Error::Shape(format!("conv2d expects NCHW input and OIHW weight, got {:?} / {:?}", x.shape(), w.shape())));
    }
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, k, k2) = w.dims4();
    if wcin != cin || k != k2 {
        return Err(Error::Shape(format!("conv2d weight {:?} does not fit input {:?}", w.shape(), x.shape())));
    }
    let (Some(ho), Some(wo)) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad)) else {
        return Err(Error::Shape(format!("conv2d kernel {k} larger than padded input {h}x{wd}")));
    };
    let hw = ho * wo;
    let kk = cin * k * k;
    let direct = k == 1 && stride == 1 && pad == 0;
    let mut cols = if direct { Vec::new() } else { vec![0.0f32; kk * hw] };
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    for s in 0..n {
        let xs = &x.data()[s * cin * h * wd..(s + 1) * cin * h * wd];
        let src: &[f32] = if direct {
            xs
        } else {
            im2col(xs, cin, h, wd, k, stride, pad, ho, wo, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[s * cout * hw..(s + 1) * cout * hw];
        gemm(cout, kk, hw, w.data(), (kk as isize, 1), src, (hw as isize, 1), dst, 0.0);
        if let Some(b) = b {
            for (co, row) in dst.chunks_mut(hw).enumerate() {
                let bv = b.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, k, _) = w.dims4();
    let (_, _, ho, wo) = gout.dims4();
    let hw = ho * wo;
    let kk = cin * k * k;
    let direct = k == 1 && stride == 1 && pad == 0;
    let mut cols = if direct { Vec::new() } else { vec![0.0f32; kk * hw] };
    let mut dcols = vec![0.0f32; kk * hw];
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = want_db.then(|| Tensor::zeros(&[cout]));
    for s in 0..n {
        let gs = &gout.data()[s * cout * hw..(s + 1) * cout * hw];
        let xs = &x.data()[s * cin * h * wd..(s + 1) * cin * h * wd];
        if let Some(dw) = dw.as_mut() {
            let src: &[f32] = if direct {
                xs
            } else {
                im2col(xs, cin, h, wd, k, stride, pad, ho, wo, &mut cols);
                &cols
            };
            // [cout, hw] x [hw, kk]
            gemm(cout, hw, kk, gs, (hw as isize, 1), src, (1, hw as isize), dw.data_mut(), 1.0);
        }
        if let Some(db) = db.as_mut() {
            for (co, row) in gs.chunks(hw).enumerate() {
                db.data_mut()[co] += row.iter().sum::<f32>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[s * cin * h * wd..(s + 1) * cin * h * wd];
            if direct {
                // [kk, cout] x [cout, hw] straight into dx
                gemm(kk, cout, hw, w.data(), (1, kk as isize), gs, (hw as isize, 1), dxs, 0.0);
            } else {
                gemm(kk, cout, hw, w.data(), (1, kk as isize), gs, (hw as isize, 1), &mut dcols, 0.0);
                col2im(&dcols, cin, h, wd, k, stride, pad, ho, wo, dxs);
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct-loop convolution, independent of im2col/gemm.
    fn conv_naive(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, cin, h, wd) = x.dims4();
        let (cout, _, k, _) = w.dims4();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for s in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[co] as f64;
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += (x.data()[((s * cin + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((co * cin + ci) * k + ki) * k + kj])
                                        as f64;
                                }
                            }
                        }
                        out.data_mut()[((s * cout + co) * ho + oy) * wo + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
            let x = rand_tensor(&mut rng, &[2, 3, 6, 6]);
            let w = rand_tensor(&mut rng, &[4, 3, k, k]);
            let b = rand_tensor(&mut rng, &[4]);
            let got = conv2d_forward(&x, &w, Some(&b), stride, pad).unwrap();
            let want = conv_naive(&x, &w, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    /// Central finite differences of a scalar function of one parameter tensor.
    fn check_grad(build: impl Fn(&mut Graph, Var) -> Var, init: Tensor, tol: f64) {
        let mut g = Graph::new();
        let p = g.param(init.clone());
        let loss = build(&mut g, p);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(p).cloned().unwrap_or_else(|| Tensor::zeros(init.shape()));
        let h = 1e-2f32;
        for i in 0..init.len() {
            let eval = |delta: f32| {
                let mut t = init.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let p = g.param(t);
                let l = build(&mut g, p);
                g.value(l).item() as f64
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h as f64);
            let an = analytic.data()[i] as f64;
            assert!((fd - an).abs() < tol * (1.0 + fd.abs()), "index {i}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let probe = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        let (xc, pc) = (x.clone(), probe.clone());
        check_grad(
            move |g, w| {
                let xv = g.constant(xc.clone());
                let y = g.conv2d(xv, w, None, 2, 1).unwrap();
                let pv = g.constant(pc.clone());
                g.masked_mse(y, pv, vec![1.0; 2 * 9]).unwrap()
            },
            w.clone(),
            2e-3,
        );
        check_grad(
            move |g, xv| {
                let wv = g.constant(w.clone());
                let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
                let pv = g.constant(probe.clone());
                g.masked_mse(y, pv, vec![1.0; 2 * 9]).unwrap()
            },
            x,
            2e-3,
        );
    }

    #[test]
    fn batchnorm_and_linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 2, 2, 2]);
        let lw = rand_tensor(&mut rng, &[1, 2]);
        check_grad(
            move |g, xv| {
                let gamma = g.constant(Tensor::new(vec![2], vec![1.5, 0.7]).unwrap());
                let beta = g.constant(Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
                let y = g.batch_norm(xv, gamma, beta, None);
                let y = g.relu(y);
                let p = g.global_avg_pool(y);
                let w = g.constant(lw.clone());
                let b = g.constant(Tensor::zeros(&[1]));
                let z = g.linear(p, w, b).unwrap();
                g.domain_focal(z, vec![1.0, 0.0, 1.0], vec![1.0; 3], 2.0, 1e-7).unwrap()
            },
            x,
            5e-3,
        );
    }

    #[test]
    fn upsample_and_detection_losses_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[1, 2, 2, 2]);
        check_grad(
            |g, xv| {
                let u = g.upsample2x(xv);
                let mut targets = vec![0.0; 32];
                targets[3] = 1.0;
                targets[7] = -1.0;
                let a = g.sigmoid_focal(u, targets, 0.25, 2.0, 1.0).unwrap();
                let b = g.smooth_l1(u, vec![0.3; 32], vec![1.0; 32], 0.11, 4.0).unwrap();
                g.weighted_sum(&[(a, 1.0), (b, 0.5)])
            },
            x,
            5e-3,
        );
    }

    #[test]
    fn grl_is_identity_forward_and_negates_backward() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.7));
        let y = g.grl(x, 0.3);
        assert_eq!(g.value(y).item().to_bits(), 3.7f32.to_bits());
        let l = g.weighted_sum(&[(y, 1.0)]);
        let grads = g.backward(l).unwrap();
        assert!((grads.get(x).unwrap().item() + 0.3).abs() < 1e-7);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let p = g.param(Tensor::scalar(1.0));
        let s = g.weighted_sum(&[(c, 1.0), (p, 2.0)]);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().item(), 2.0);
    }
}
