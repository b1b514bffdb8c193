//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for the adjoint pass. Each operation keeps exactly
//! what its adjoint needs (argmax indices, normalized activations) and
//! recomputes the rest (convolution columns) to bound memory.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{col2im, gemm, im2col, max_pool, softmax_in_place};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::class_balance::PROB_FLOOR;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Batch-norm behaviour for one call.
#[derive(Debug, Clone)]
pub enum BnMode {
    /// Normalize with batch statistics and record them for the running update.
    Train,
    /// Normalize with the given running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub key: String,
    pub mean: Vec<f64>,
    /// Unbiased variance, the convention used for running estimates.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Param,
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, k: usize, pad: usize },
    ConvTranspose2x2 { x: NodeId, w: NodeId, b: NodeId },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, x_hat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu { x: NodeId },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    Concat { a: NodeId, b: NodeId },
    Reshape { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Softmax { x: NodeId },
    WeightedNll { probs: NodeId, pixels: Vec<Option<(usize, f64)>>, count: usize },
    Mse { x: NodeId, target: Vec<f64> },
    Sum { terms: Vec<NodeId> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    bn_stats: Vec<BnStats>,
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Data that gradients do not flow into.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Constant, false)
    }

    /// A free leaf whose gradient is reported by [`Gradients::of`].
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Variable, true)
    }

    /// Leaf for a named parameter; repeated calls share one node so gradients
    /// from every use accumulate.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let t = store.get(name)?.clone();
        let id = self.push(t, Op::Param, true);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Stride-1 "same" convolution. `w` is `[Cout, Cin, k, k]`, `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(shape_err(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if ws[1] != cin {
            return Err(shape_err(format!("conv2d expects {} input channels, got {cin}", ws[1])));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(shape_err("conv2d bias length"));
            }
        }
        let pad = k / 2;
        let hw = h * wd;
        let mut out = vec![0.0; n * cout * hw];
        let mut cols = if k == 1 { Vec::new() } else { vec![0.0; cin * k * k * hw] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                let img = &xv[s * cin * hw..(s + 1) * cin * hw];
                let src: &[f64] = if k == 1 {
                    img
                } else {
                    im2col(img, cin, h, wd, k, pad, &mut cols);
                    &cols
                };
                let dst = &mut out[s * cout * hw..(s + 1) * cout * hw];
                gemm(cout, cin * k * k, hw, wv, false, src, false, dst, 0.0);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for s in 0..n {
                    for co in 0..cout {
                        let o = (s * cout + co) * hw;
                        out[o..o + hw].iter_mut().for_each(|v| *v += bv[co]);
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.needs(&deps);
        Ok(self.push(Tensor::from_vec(&[n, cout, h, wd], out)?, Op::Conv2d { x, w, b, k, pad }, rg))
    }

    /// Kernel-2, stride-2 transposed convolution doubling spatial size.
    /// `w` is `[Cin, Cout, 2, 2]`.
    pub fn conv_transpose2x2(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != 2 || ws[3] != 2 {
            return Err(shape_err(format!("conv_transpose input {xs:?} weight {ws:?}")));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[1];
        if self.value(b).shape() != [cout] {
            return Err(shape_err("conv_transpose bias length"));
        }
        let hw = h * wd;
        let (oh, ow) = (2 * h, 2 * wd);
        let mut out = vec![0.0; n * cout * oh * ow];
        let mut t = vec![0.0; cout * 4 * hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        for s in 0..n {
            let img = &xv[s * cin * hw..(s + 1) * cin * hw];
            gemm(cout * 4, cin, hw, wv, true, img, false, &mut t, 0.0);
            let dst = &mut out[s * cout * oh * ow..(s + 1) * cout * oh * ow];
            for co in 0..cout {
                for q in 0..4 {
                    let (dy, dx) = (q / 2, q % 2);
                    let row = &t[(co * 4 + q) * hw..(co * 4 + q + 1) * hw];
                    for y in 0..h {
                        for xx in 0..wd {
                            dst[(co * oh + 2 * y + dy) * ow + 2 * xx + dx] = row[y * wd + xx] + bv[co];
                        }
                    }
                }
            }
        }
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(Tensor::from_vec(&[n, cout, oh, ow], out)?, Op::ConvTranspose2x2 { x, w, b }, rg))
    }

    /// Batch norm over all axes except axis 1 (`[N, C]` or `[N, C, H, W]`).
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mode: BnMode, key: &str) -> Result<NodeId> {
        let xt = self.value(x);
        let shape = xt.shape().to_vec();
        if shape.len() < 2 {
            return Err(shape_err("batch_norm needs at least [N, C]"));
        }
        let (n, c, s) = xt.ncs();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err("batch_norm affine parameter length"));
        }
        let m = n * s;
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut x_hat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; c];
        let train = matches!(mode, BnMode::Train);
        let mut stats = BnStats { key: key.to_string(), mean: vec![0.0; c], var: vec![0.0; c] };
        for ch in 0..c {
            let (mean, var) = match &mode {
                BnMode::Train => {
                    if m < 2 {
                        return Err(Error::InvalidInput(format!(
                            "batch_norm `{key}` in training mode needs more than one value per channel"
                        )));
                    }
                    let mut sum = 0.0;
                    for i in 0..n {
                        sum += xv[(i * c + ch) * s..(i * c + ch + 1) * s].iter().sum::<f64>();
                    }
                    let mean = sum / m as f64;
                    let mut sq = 0.0;
                    for i in 0..n {
                        sq += xv[(i * c + ch) * s..(i * c + ch + 1) * s]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>();
                    }
                    stats.mean[ch] = mean;
                    stats.var[ch] = sq / (m - 1) as f64;
                    (mean, sq / m as f64)
                }
                BnMode::Eval { mean, var } => (mean[ch], var[ch]),
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = is;
            for i in 0..n {
                let off = (i * c + ch) * s;
                for j in off..off + s {
                    let xh = (xv[j] - mean) * is;
                    x_hat[j] = xh;
                    out[j] = g[ch] * xh + bt[ch];
                }
            }
        }
        if let BnMode::Eval { mean, var } = &mode {
            if mean.len() != c || var.len() != c {
                return Err(shape_err("batch_norm running statistics length"));
            }
        }
        if train {
            self.bn_stats.push(stats);
        }
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::BatchNorm { x, gamma, beta, x_hat, inv_std, train },
            rg,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_vec(t.shape(), out).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Non-overlapping `k x k` max pooling.
    pub fn max_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || k == 0 || xs[2] % k != 0 || xs[3] % k != 0 {
            return Err(shape_err(format!("max_pool window {k} on {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / k, w / k);
        let per_in = c * h * w;
        let per_out = c * oh * ow;
        let mut out = vec![0.0; n * per_out];
        let mut argmax = vec![0usize; n * per_out];
        let xv = self.value(x).data();
        for s in 0..n {
            max_pool(
                &xv[s * per_in..(s + 1) * per_in],
                c,
                h,
                w,
                k,
                &mut out[s * per_out..(s + 1) * per_out],
                &mut argmax[s * per_out..(s + 1) * per_out],
            );
            argmax[s * per_out..(s + 1) * per_out].iter_mut().for_each(|a| *a += s * per_in);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::from_vec(&[n, c, oh, ow], out)?, Op::MaxPool { x, argmax }, rg))
    }

    /// Concatenation along channels.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err(format!("concat {sa:?} with {sb:?}")));
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let s = sa[2] * sa[3];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * s);
        for i in 0..n {
            out.extend_from_slice(&av[i * ca * s..(i + 1) * ca * s]);
            out.extend_from_slice(&bv[i * cb * s..(i + 1) * cb * s]);
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_vec(&[n, ca + cb, sa[2], sa[3]], out)?, Op::Concat { a, b }, rg))
    }

    /// `[N, ...]` to `[N, prod(...)]`.
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let n = t.shape()[0];
        let f = t.len() / n.max(1);
        let value = t.clone().reshaped(&[n, f]).expect("same size");
        let rg = self.needs(&[x]);
        self.push(value, Op::Reshape { x }, rg)
    }

    /// `x [N, Fin] * w [Fin, Fout] + b [Fout]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err(format!("linear input {xs:?} weight {ws:?}")));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; n * fout];
        gemm(n, fin, fout, self.value(x).data(), false, self.value(w).data(), false, &mut out, 0.0);
        if let Some(b) = b {
            if self.value(b).shape() != [fout] {
                return Err(shape_err("linear bias length"));
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.needs(&deps);
        Ok(self.push(Tensor::from_vec(&[n, fout], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Softmax along axis 1.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let (n, c, s) = t.ncs();
        let mut out = t.data().to_vec();
        let mut buf = vec![0.0; c];
        for i in 0..n {
            for p in 0..s {
                for ch in 0..c {
                    buf[ch] = out[(i * c + ch) * s + p];
                }
                softmax_in_place(&mut buf);
                for ch in 0..c {
                    out[(i * c + ch) * s + p] = buf[ch];
                }
            }
        }
        let value = Tensor::from_vec(t.shape(), out).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, Op::Softmax { x }, rg)
    }

    /// Mean over counted pixels of `-weight * ln(max(p[class], floor))`.
    ///
    /// `pixels` runs over `(sample, row, col)` in row-major order; `None`
    /// marks an ignored pixel, which contributes neither value nor gradient.
    pub fn weighted_nll(&mut self, probs: NodeId, pixels: Vec<Option<(usize, f64)>>) -> Result<NodeId> {
        let t = self.value(probs);
        let (n, c, s) = t.ncs();
        if pixels.len() != n * s {
            return Err(shape_err(format!("{} pixel targets for {} pixels", pixels.len(), n * s)));
        }
        let pv = t.data();
        let mut total = 0.0;
        let mut count = 0usize;
        for (idx, px) in pixels.iter().enumerate() {
            if let Some((class, weight)) = *px {
                if class >= c {
                    return Err(shape_err(format!("class {class} outside {c} channels")));
                }
                let (i, p) = (idx / s, idx % s);
                total -= weight * pv[(i * c + class) * s + p].max(PROB_FLOOR).ln();
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.needs(&[probs]);
        Ok(self.push(Tensor::scalar(loss), Op::WeightedNll { probs, pixels, count }, rg))
    }

    /// Mean squared error against a constant target, averaged over every element.
    pub fn mse(&mut self, x: NodeId, target: &[f64]) -> Result<NodeId> {
        let xv = self.value(x).data();
        if xv.len() != target.len() {
            return Err(shape_err(format!("mse of {} values against {}", xv.len(), target.len())));
        }
        let loss = if xv.is_empty() {
            0.0
        } else {
            xv.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / xv.len() as f64
        };
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { x, target: target.to_vec() }, rg))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let mut total = 0.0;
        for &t in terms {
            let v = self.value(t);
            if v.len() != 1 {
                return Err(shape_err("sum expects scalar terms"));
            }
            total += v.item();
        }
        let rg = self.needs(terms);
        Ok(self.push(Tensor::scalar(total), Op::Sum { terms: terms.to_vec() }, rg))
    }

    /// Fingerprint of every piecewise choice on the tape: ReLU on/off states,
    /// max-pool winners and probabilities clamped at the log floor. Two
    /// evaluations with equal fingerprints lie on the same smooth piece,
    /// which is what a finite-difference check needs.
    pub fn activation_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => self.value(*x).data().iter().for_each(|&v| (v > 0.0).hash(&mut h)),
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                Op::WeightedNll { probs, .. } => self.value(*probs).data().iter().for_each(|&p| (p > PROB_FLOOR).hash(&mut h)),
                _ => {}
            }
        }
        h.finish()
    }

    /// Statistics recorded by training-mode batch norms, in call order.
    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn_stats
    }

    /// Adjoint pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.adjoint(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (name, id) in &self.params {
            if let Some(g) = &grads[id.0] {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of `{name}`")));
                }
                params.insert(name.clone(), g.clone());
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn adjoint(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gv = g.data();
        match &self.nodes[idx].op {
            Op::Constant | Op::Variable | Op::Param => {}
            &Op::Conv2d { x, w, b, k, pad } => {
                let xs = self.value(x).shape();
                let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = self.value(w).shape()[0];
                let hw = h * wd;
                let ck = cin * k * k;
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let need_x = self.nodes[x.0].requires_grad;
                let mut dw = vec![0.0; cout * ck];
                let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
                let mut cols = vec![0.0; if k == 1 { 0 } else { ck * hw }];
                let mut dcols = vec![0.0; if k == 1 || !need_x { 0 } else { ck * hw }];
                for s in 0..n {
                    let img = &xv[s * cin * hw..(s + 1) * cin * hw];
                    let go = &gv[s * cout * hw..(s + 1) * cout * hw];
                    let src: &[f64] = if k == 1 {
                        img
                    } else {
                        im2col(img, cin, h, wd, k, pad, &mut cols);
                        &cols
                    };
                    gemm(cout, hw, ck, go, false, src, true, &mut dw, 1.0);
                    if need_x {
                        let dst = &mut dx[s * cin * hw..(s + 1) * cin * hw];
                        if k == 1 {
                            gemm(ck, cout, hw, wv, true, go, false, dst, 1.0);
                        } else {
                            gemm(ck, cout, hw, wv, true, go, false, &mut dcols, 0.0);
                            col2im(&dcols, cin, h, wd, k, pad, dst);
                        }
                    }
                }
                let ws = self.value(w).shape().to_vec();
                self.accumulate(grads, w, Tensor::from_vec(&ws, dw).unwrap());
                if let Some(b) = b {
                    let mut db = vec![0.0; cout];
                    for s in 0..n {
                        for (co, d) in db.iter_mut().enumerate() {
                            let o = (s * cout + co) * hw;
                            *d += gv[o..o + hw].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, b, Tensor::from_vec(&[cout], db).unwrap());
                }
                if need_x {
                    self.accumulate(grads, x, Tensor::from_vec(xs, dx).unwrap());
                }
            }
            &Op::ConvTranspose2x2 { x, w, b } => {
                let xs = self.value(x).shape();
                let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = self.value(w).shape()[1];
                let hw = h * wd;
                let (oh, ow) = (2 * h, 2 * wd);
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let need_x = self.nodes[x.0].requires_grad;
                let mut dt = vec![0.0; cout * 4 * hw];
                let mut dw = vec![0.0; cin * cout * 4];
                let mut db = vec![0.0; cout];
                let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
                for s in 0..n {
                    let go = &gv[s * cout * oh * ow..(s + 1) * cout * oh * ow];
                    for co in 0..cout {
                        for q in 0..4 {
                            let (dy, ddx) = (q / 2, q % 2);
                            let row = &mut dt[(co * 4 + q) * hw..(co * 4 + q + 1) * hw];
                            for y in 0..h {
                                for xx in 0..wd {
                                    let v = go[(co * oh + 2 * y + dy) * ow + 2 * xx + ddx];
                                    row[y * wd + xx] = v;
                                    db[co] += v;
                                }
                            }
                        }
                    }
                    let img = &xv[s * cin * hw..(s + 1) * cin * hw];
                    gemm(cin, hw, cout * 4, img, false, &dt, true, &mut dw, 1.0);
                    if need_x {
                        let dst = &mut dx[s * cin * hw..(s + 1) * cin * hw];
                        gemm(cin, cout * 4, hw, wv, false, &dt, false, dst, 1.0);
                    }
                }
                let ws = self.value(w).shape().to_vec();
                self.accumulate(grads, w, Tensor::from_vec(&ws, dw).unwrap());
                self.accumulate(grads, b, Tensor::from_vec(&[cout], db).unwrap());
                if need_x {
                    self.accumulate(grads, x, Tensor::from_vec(xs, dx).unwrap());
                }
            }
            Op::BatchNorm { x, gamma, beta, x_hat, inv_std, train } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (n, c, s) = self.value(x).ncs();
                let gam = self.value(gamma).data();
                let m = (n * s) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    for i in 0..n {
                        let off = (i * c + ch) * s;
                        for j in off..off + s {
                            dbeta[ch] += gv[j];
                            dgamma[ch] += gv[j] * x_hat[j];
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; gv.len()];
                    for ch in 0..c {
                        let scale = gam[ch] * inv_std[ch];
                        for i in 0..n {
                            let off = (i * c + ch) * s;
                            for j in off..off + s {
                                dx[j] = if *train {
                                    scale / m * (m * gv[j] - dbeta[ch] - x_hat[j] * dgamma[ch])
                                } else {
                                    scale * gv[j]
                                };
                            }
                        }
                    }
                    let shape = self.value(x).shape().to_vec();
                    self.accumulate(grads, x, Tensor::from_vec(&shape, dx).unwrap());
                }
                self.accumulate(grads, gamma, Tensor::from_vec(&[c], dgamma).unwrap());
                self.accumulate(grads, beta, Tensor::from_vec(&[c], dbeta).unwrap());
            }
            &Op::Relu { x } => {
                let xv = self.value(x).data();
                let dx: Vec<f64> = xv.iter().zip(gv).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect();
                let shape = self.value(x).shape().to_vec();
                self.accumulate(grads, x, Tensor::from_vec(&shape, dx).unwrap());
            }
            Op::MaxPool { x, argmax } => {
                let x = *x;
                let mut dx = vec![0.0; self.value(x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gv[o];
                }
                let shape = self.value(x).shape().to_vec();
                self.accumulate(grads, x, Tensor::from_vec(&shape, dx).unwrap());
            }
            &Op::Concat { a, b } => {
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let (n, ca, cb) = (sa[0], sa[1], sb[1]);
                let s = sa[2] * sa[3];
                let mut da = Vec::with_capacity(n * ca * s);
                let mut dbv = Vec::with_capacity(n * cb * s);
                for i in 0..n {
                    let base = i * (ca + cb) * s;
                    da.extend_from_slice(&gv[base..base + ca * s]);
                    dbv.extend_from_slice(&gv[base + ca * s..base + (ca + cb) * s]);
                }
                self.accumulate(grads, a, Tensor::from_vec(&sa, da).unwrap());
                self.accumulate(grads, b, Tensor::from_vec(&sb, dbv).unwrap());
            }
            &Op::Reshape { x } => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(grads, x, g.clone().reshaped(&shape).unwrap());
            }
            &Op::Linear { x, w, b } => {
                let xs = self.value(x).shape().to_vec();
                let ws = self.value(w).shape().to_vec();
                let (n, fin, fout) = (xs[0], xs[1], ws[1]);
                let mut dw = vec![0.0; fin * fout];
                gemm(fin, n, fout, self.value(x).data(), true, gv, false, &mut dw, 0.0);
                self.accumulate(grads, w, Tensor::from_vec(&ws, dw).unwrap());
                if let Some(b) = b {
                    let mut db = vec![0.0; fout];
                    for row in gv.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    self.accumulate(grads, b, Tensor::from_vec(&[fout], db).unwrap());
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; n * fin];
                    gemm(n, fout, fin, gv, false, self.value(w).data(), true, &mut dx, 0.0);
                    self.accumulate(grads, x, Tensor::from_vec(&xs, dx).unwrap());
                }
            }
            &Op::Softmax { x } => {
                let p = self.nodes[idx].value.data();
                let (n, c, s) = self.value(x).ncs();
                let mut dx = vec![0.0; p.len()];
                for i in 0..n {
                    for q in 0..s {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            let j = (i * c + ch) * s + q;
                            dot += p[j] * gv[j];
                        }
                        for ch in 0..c {
                            let j = (i * c + ch) * s + q;
                            dx[j] = p[j] * (gv[j] - dot);
                        }
                    }
                }
                let shape = self.value(x).shape().to_vec();
                self.accumulate(grads, x, Tensor::from_vec(&shape, dx).unwrap());
            }
            Op::WeightedNll { probs, pixels, count } => {
                let probs = *probs;
                let t = self.value(probs);
                let (_, c, s) = t.ncs();
                let pv = t.data();
                let mut dp = vec![0.0; pv.len()];
                if *count > 0 {
                    let scale = g.item() / *count as f64;
                    for (idx, px) in pixels.iter().enumerate() {
                        if let Some((class, weight)) = *px {
                            let (i, q) = (idx / s, idx % s);
                            let j = (i * c + class) * s + q;
                            if pv[j] > PROB_FLOOR {
                                dp[j] = -scale * weight / pv[j];
                            }
                        }
                    }
                }
                let shape = t.shape().to_vec();
                self.accumulate(grads, probs, Tensor::from_vec(&shape, dp).unwrap());
            }
            Op::Mse { x, target } => {
                let x = *x;
                let xv = self.value(x).data();
                let scale = 2.0 * g.item() / xv.len().max(1) as f64;
                let dx: Vec<f64> = xv.iter().zip(target).map(|(a, b)| scale * (a - b)).collect();
                let shape = self.value(x).shape().to_vec();
                self.accumulate(grads, x, Tensor::from_vec(&shape, dx).unwrap());
            }
            Op::Sum { terms } => {
                for &t in terms {
                    self.accumulate(grads, t, Tensor::scalar(g.item()));
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a node, if any flowed into it.
    pub fn of(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter reached by the loss, keyed by name.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}
