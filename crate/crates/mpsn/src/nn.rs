//! Minimal CNN substrate: convolution, channel normalization, ReLU, and
//! SGD, all in f64 with explicit backward passes.
//!
//! Activations are `(C, H, W)` arrays. Convolutions use "same" padding
//! (`pad = k / 2`), so the spatial output is exactly `ceil(in / stride)`.
//! Backward passes are verified against central finite differences in the
//! tests below; the rest of the crate builds on them.

use ndarray::{Array1, Array3, ArrayD, Ix4, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A `(C, H, W)` activation map.
pub type Feat = Array3<f64>;

/// Sample from N(0, std) via Box-Muller, driven by the crate-wide RNG.
pub fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 2-D convolution with square kernel, "same" padding and per-output bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(c_out, c_in, k, k)`, stored dynamic for uniform parameter traversal.
    pub weight: ArrayD<f64>,
    /// `(c_out,)`
    pub bias: ArrayD<f64>,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let mut weight = ArrayD::<f64>::zeros(IxDyn(&[c_out, c_in, k, k]));
        weight.mapv_inplace(|_| normal(rng, std));
        Conv2d {
            weight,
            bias: ArrayD::zeros(IxDyn(&[c_out])),
            stride,
        }
    }

    pub fn zeroed(c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Conv2d {
            weight: ArrayD::zeros(IxDyn(&[c_out, c_in, k, k])),
            bias: ArrayD::zeros(IxDyn(&[c_out])),
            stride,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn pad(&self) -> usize {
        self.kernel() / 2
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (k, p, s) = (self.kernel(), self.pad(), self.stride);
        ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1)
    }

    pub fn forward(&self, x: &Feat) -> Feat {
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(c_in, self.c_in(), "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let c_out = self.c_out();
        let (k, p, s) = (self.kernel(), self.pad(), self.stride);

        let wv = self.weight.view().into_dimensionality::<Ix4>().unwrap();
        let xs = x.as_slice().expect("conv input must be contiguous");
        let mut out = Feat::zeros((c_out, ho, wo));
        {
            let os = out.as_slice_mut().unwrap();
            for co in 0..c_out {
                let b = self.bias[co];
                let base = co * ho * wo;
                os[base..base + ho * wo].fill(b);
            }
            for co in 0..c_out {
                for ci in 0..c_in {
                    for ky in 0..k {
                        let (ylo, yhi) = valid_range(h, ho, s, p, ky);
                        for kx in 0..k {
                            let (xlo, xhi) = valid_range(w, wo, s, p, kx);
                            let wgt = wv[[co, ci, ky, kx]];
                            if wgt == 0.0 {
                                continue;
                            }
                            for yo in ylo..yhi {
                                let yi = yo * s + ky - p;
                                let xrow = ci * h * w + yi * w;
                                let orow = co * ho * wo + yo * wo;
                                for xo in xlo..xhi {
                                    let xi = xo * s + kx - p;
                                    os[orow + xo] += wgt * xs[xrow + xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradients w.r.t. weights, bias, and input given upstream `dy`.
    pub fn backward(&self, x: &Feat, dy: &Feat) -> (ConvGrad, Feat) {
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, ho, wo) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
        assert_eq!(c_out, self.c_out());
        let (k, p, s) = (self.kernel(), self.pad(), self.stride);

        let wv = self.weight.view().into_dimensionality::<Ix4>().unwrap();
        let xs = x.as_slice().unwrap();
        let dys = dy.as_slice().unwrap();

        let mut dw = ArrayD::<f64>::zeros(IxDyn(&[c_out, c_in, k, k]));
        let mut db = ArrayD::<f64>::zeros(IxDyn(&[c_out]));
        let mut dx = Feat::zeros((c_in, h, w));
        let dxs = dx.as_slice_mut().unwrap();

        for co in 0..c_out {
            let mut acc = 0.0;
            let orow = co * ho * wo;
            for v in &dys[orow..orow + ho * wo] {
                acc += v;
            }
            db[co] = acc;
        }
        for co in 0..c_out {
            for ci in 0..c_in {
                for ky in 0..k {
                    let (ylo, yhi) = valid_range(h, ho, s, p, ky);
                    for kx in 0..k {
                        let (xlo, xhi) = valid_range(w, wo, s, p, kx);
                        let wgt = wv[[co, ci, ky, kx]];
                        let mut wacc = 0.0;
                        for yo in ylo..yhi {
                            let yi = yo * s + ky - p;
                            let xrow = ci * h * w + yi * w;
                            let orow = co * ho * wo + yo * wo;
                            for xo in xlo..xhi {
                                let xi = xo * s + kx - p;
                                let g = dys[orow + xo];
                                wacc += g * xs[xrow + xi];
                                dxs[xrow + xi] += wgt * g;
                            }
                        }
                        dw[[co, ci, ky, kx]] = wacc;
                    }
                }
            }
        }
        (ConvGrad { dw, db }, dx)
    }
}

/// Output index range `[lo, hi)` for which `o*s + kk - p` lands inside the
/// input extent `n`.
fn valid_range(n: usize, n_out: usize, s: usize, p: usize, kk: usize) -> (usize, usize) {
    let lo = if p > kk { (p - kk).div_ceil(s) } else { 0 };
    let top = n as isize - 1 + p as isize - kk as isize;
    let hi = if top < 0 {
        0
    } else {
        n_out.min(top as usize / s + 1)
    };
    (lo.min(hi), hi)
}

#[derive(Debug, Clone)]
pub struct ConvGrad {
    pub dw: ArrayD<f64>,
    pub db: ArrayD<f64>,
}

// ---------------------------------------------------------------------------
// Channel normalization
// ---------------------------------------------------------------------------

/// Normalization statistics scope. With batch size 1, batch normalization
/// over (N, H, W) and instance normalization coincide: both standardize each
/// channel over its spatial extent. The kind is kept for configuration and
/// checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NormKind {
    Batch,
    Instance,
}

/// Per-channel standardization with learnable gain and shift.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gamma: ArrayD<f64>,
    pub beta: ArrayD<f64>,
    pub eps: f64,
    pub kind: NormKind,
}

/// Cached statistics from a normalization forward pass.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Array1<f64>,
    /// `1 / sqrt(var + eps)` per channel.
    pub inv: Array1<f64>,
}

impl ChannelNorm {
    pub fn new(c: usize, kind: NormKind) -> Self {
        ChannelNorm {
            gamma: ArrayD::ones(IxDyn(&[c])),
            beta: ArrayD::zeros(IxDyn(&[c])),
            eps: 1e-5,
            kind,
        }
    }

    pub fn forward(&self, x: &Feat) -> (Feat, NormStats) {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let n = (h * w) as f64;
        let mut out = Feat::zeros((c, h, w));
        let mut mean = Array1::<f64>::zeros(c);
        let mut inv = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let xc = x.index_axis(ndarray::Axis(0), ci);
            let m = xc.sum() / n;
            let var = xc.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n;
            let iv = 1.0 / (var + self.eps).sqrt();
            mean[ci] = m;
            inv[ci] = iv;
            let (g, b) = (self.gamma[ci], self.beta[ci]);
            let mut oc = out.index_axis_mut(ndarray::Axis(0), ci);
            oc.assign(&xc.mapv(|v| g * (v - m) * iv + b));
        }
        (out, NormStats { mean, inv })
    }

    pub fn backward(&self, x: &Feat, stats: &NormStats, dy: &Feat) -> (NormGrad, Feat) {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let n = (h * w) as f64;
        let mut dgamma = ArrayD::<f64>::zeros(IxDyn(&[c]));
        let mut dbeta = ArrayD::<f64>::zeros(IxDyn(&[c]));
        let mut dx = Feat::zeros((c, h, w));
        for ci in 0..c {
            let xc = x.index_axis(ndarray::Axis(0), ci);
            let dyc = dy.index_axis(ndarray::Axis(0), ci);
            let (m, iv, g) = (stats.mean[ci], stats.inv[ci], self.gamma[ci]);
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for (&v, &d) in xc.iter().zip(dyc.iter()) {
                let xhat = (v - m) * iv;
                sum_dy += d;
                sum_dy_xhat += d * xhat;
            }
            dgamma[ci] = sum_dy_xhat;
            dbeta[ci] = sum_dy;
            let mut dxc = dx.index_axis_mut(ndarray::Axis(0), ci);
            for ((&v, &d), o) in xc.iter().zip(dyc.iter()).zip(dxc.iter_mut()) {
                let xhat = (v - m) * iv;
                *o = g * iv * (d - sum_dy / n - xhat * sum_dy_xhat / n);
            }
        }
        (NormGrad { dgamma, dbeta }, dx)
    }
}

#[derive(Debug, Clone)]
pub struct NormGrad {
    pub dgamma: ArrayD<f64>,
    pub dbeta: ArrayD<f64>,
}

// ---------------------------------------------------------------------------
// Layers, blocks, stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Norm(ChannelNorm),
    Relu,
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv { x: Feat },
    Norm { x: Feat, stats: NormStats },
    Relu { x: Feat },
}

#[derive(Debug, Clone)]
pub enum LayerGrad {
    Conv(ConvGrad),
    Norm(NormGrad),
    Relu,
}

impl Layer {
    pub fn forward(&self, x: &Feat) -> Feat {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::Norm(nm) => nm.forward(x).0,
            Layer::Relu => x.mapv(|v| v.max(0.0)),
        }
    }

    pub fn forward_train(&self, x: Feat) -> (Feat, LayerCache) {
        match self {
            Layer::Conv(c) => {
                let y = c.forward(&x);
                (y, LayerCache::Conv { x })
            }
            Layer::Norm(nm) => {
                let (y, stats) = nm.forward(&x);
                (y, LayerCache::Norm { x, stats })
            }
            Layer::Relu => {
                let y = x.mapv(|v| v.max(0.0));
                (y, LayerCache::Relu { x })
            }
        }
    }

    pub fn backward(&self, cache: &LayerCache, dy: &Feat) -> (LayerGrad, Feat) {
        match (self, cache) {
            (Layer::Conv(c), LayerCache::Conv { x }) => {
                let (g, dx) = c.backward(x, dy);
                (LayerGrad::Conv(g), dx)
            }
            (Layer::Norm(nm), LayerCache::Norm { x, stats }) => {
                let (g, dx) = nm.backward(x, stats, dy);
                (LayerGrad::Norm(g), dx)
            }
            (Layer::Relu, LayerCache::Relu { x }) => {
                let mut dx = dy.clone();
                ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
                (LayerGrad::Relu, dx)
            }
            _ => panic!("layer/cache mismatch"),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&ArrayD<f64>)) {
        match self {
            Layer::Conv(c) => {
                f(&c.weight);
                f(&c.bias);
            }
            Layer::Norm(nm) => {
                f(&nm.gamma);
                f(&nm.beta);
            }
            Layer::Relu => {}
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut ArrayD<f64>)) {
        match self {
            Layer::Conv(c) => {
                f(&mut c.weight);
                f(&mut c.bias);
            }
            Layer::Norm(nm) => {
                f(&mut nm.gamma);
                f(&mut nm.beta);
            }
            Layer::Relu => {}
        }
    }

    fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Norm(nm) => vec![&mut nm.gamma, &mut nm.beta],
            Layer::Relu => vec![],
        }
    }
}

impl LayerGrad {
    fn visit(&self, f: &mut dyn FnMut(&ArrayD<f64>)) {
        match self {
            LayerGrad::Conv(g) => {
                f(&g.dw);
                f(&g.db);
            }
            LayerGrad::Norm(g) => {
                f(&g.dgamma);
                f(&g.dbeta);
            }
            LayerGrad::Relu => {}
        }
    }

    fn tensors(&self) -> Vec<&ArrayD<f64>> {
        match self {
            LayerGrad::Conv(g) => vec![&g.dw, &g.db],
            LayerGrad::Norm(g) => vec![&g.dgamma, &g.dbeta],
            LayerGrad::Relu => vec![],
        }
    }
}

/// Residual wiring for a block.
#[derive(Debug, Clone)]
pub enum Shortcut {
    /// Plain sequential block.
    None,
    /// `y = body(x) + x`.
    Identity,
    /// `y = body(x) + proj(x)`, used when stride or channels change.
    Proj(Conv2d),
}

/// A run of layers with optional residual connection.
#[derive(Debug, Clone)]
pub struct Block {
    pub body: Vec<Layer>,
    pub shortcut: Shortcut,
}

impl Block {
    pub fn plain(body: Vec<Layer>) -> Self {
        Block {
            body,
            shortcut: Shortcut::None,
        }
    }

    pub fn forward(&self, x: &Feat) -> Feat {
        let mut h = x.clone();
        for layer in &self.body {
            h = layer.forward(&h);
        }
        match &self.shortcut {
            Shortcut::None => h,
            Shortcut::Identity => h + x,
            Shortcut::Proj(c) => h + c.forward(x),
        }
    }

    pub fn forward_train(&self, x: Feat) -> (Feat, BlockCache) {
        let needs_input = !matches!(self.shortcut, Shortcut::None);
        let x_in = if needs_input { Some(x.clone()) } else { None };
        let mut h = x;
        let mut caches = Vec::with_capacity(self.body.len());
        for layer in &self.body {
            let (y, cache) = layer.forward_train(h);
            caches.push(cache);
            h = y;
        }
        match &self.shortcut {
            Shortcut::None => {}
            Shortcut::Identity => h = h + x_in.as_ref().unwrap(),
            Shortcut::Proj(c) => h = h + c.forward(x_in.as_ref().unwrap()),
        }
        (h, BlockCache { layers: caches, x_in })
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Feat) -> (BlockGrad, Feat) {
        let mut grads_rev = Vec::with_capacity(self.body.len());
        let mut d = dy.clone();
        for (layer, lc) in self.body.iter().zip(&cache.layers).rev() {
            let (g, dx) = layer.backward(lc, &d);
            grads_rev.push(g);
            d = dx;
        }
        grads_rev.reverse();
        let mut shortcut_grad = None;
        match &self.shortcut {
            Shortcut::None => {}
            Shortcut::Identity => d = d + dy,
            Shortcut::Proj(c) => {
                let (g, dskip) = c.backward(cache.x_in.as_ref().unwrap(), dy);
                shortcut_grad = Some(g);
                d = d + dskip;
            }
        }
        (
            BlockGrad {
                layers: grads_rev,
                shortcut: shortcut_grad,
            },
            d,
        )
    }

    fn visit(&self, f: &mut dyn FnMut(&ArrayD<f64>)) {
        for layer in &self.body {
            layer.visit(f);
        }
        if let Shortcut::Proj(c) = &self.shortcut {
            f(&c.weight);
            f(&c.bias);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut ArrayD<f64>)) {
        for layer in &mut self.body {
            layer.visit_mut(f);
        }
        if let Shortcut::Proj(c) = &mut self.shortcut {
            f(&mut c.weight);
            f(&mut c.bias);
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        let mut out = Vec::new();
        for layer in &mut self.body {
            out.extend(layer.params_mut());
        }
        if let Shortcut::Proj(c) = &mut self.shortcut {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    pub layers: Vec<LayerCache>,
    pub x_in: Option<Feat>,
}

#[derive(Debug, Clone)]
pub struct BlockGrad {
    pub layers: Vec<LayerGrad>,
    pub shortcut: Option<ConvGrad>,
}

impl BlockGrad {
    fn visit(&self, f: &mut dyn FnMut(&ArrayD<f64>)) {
        for g in &self.layers {
            g.visit(f);
        }
        if let Some(g) = &self.shortcut {
            f(&g.dw);
            f(&g.db);
        }
    }

    pub fn tensors(&self) -> Vec<&ArrayD<f64>> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend(g.tensors());
        }
        if let Some(g) = &self.shortcut {
            out.push(&g.dw);
            out.push(&g.db);
        }
        out
    }
}

/// A named stage: one entry of the backbone split table.
#[derive(Debug, Clone)]
pub struct Stage {
    pub name: String,
    pub blocks: Vec<Block>,
}

/// A sequential sub-network (FN, FDN, BN or BDN).
#[derive(Debug, Clone, Default)]
pub struct SubNet {
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone)]
pub struct SubNetCache {
    pub blocks: Vec<BlockCache>,
}

#[derive(Debug, Clone)]
pub struct SubNetGrad {
    pub blocks: Vec<BlockGrad>,
}

impl SubNet {
    pub fn forward(&self, x: &Feat) -> Feat {
        let mut h = x.clone();
        for stage in &self.stages {
            for block in &stage.blocks {
                h = block.forward(&h);
            }
        }
        h
    }

    pub fn forward_train(&self, x: Feat) -> (Feat, SubNetCache) {
        let mut h = x;
        let mut caches = Vec::new();
        for stage in &self.stages {
            for block in &stage.blocks {
                let (y, c) = block.forward_train(h);
                caches.push(c);
                h = y;
            }
        }
        (h, SubNetCache { blocks: caches })
    }

    pub fn backward(&self, cache: &SubNetCache, dy: &Feat) -> (SubNetGrad, Feat) {
        let blocks: Vec<&Block> = self.stages.iter().flat_map(|s| &s.blocks).collect();
        let mut grads_rev = Vec::with_capacity(blocks.len());
        let mut d = dy.clone();
        for (block, bc) in blocks.iter().zip(&cache.blocks).rev() {
            let (g, dx) = block.backward(bc, &d);
            grads_rev.push(g);
            d = dx;
        }
        grads_rev.reverse();
        (SubNetGrad { blocks: grads_rev }, d)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&ArrayD<f64>)) {
        for stage in &self.stages {
            for block in &stage.blocks {
                block.visit(f);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut ArrayD<f64>)) {
        for stage in &mut self.stages {
            for block in &mut stage.blocks {
                block.visit_mut(f);
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            for block in &mut stage.blocks {
                out.extend(block.params_mut());
            }
        }
        out
    }

    /// All parameters flattened into one vector, traversal order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |a| out.extend(a.iter().copied()));
        out
    }

    /// Shape signature of every parameter tensor, traversal order.
    pub fn shape_signature(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        self.visit(&mut |a| out.push(a.shape().to_vec()));
        out
    }

    /// Total multiplicative stride across all conv layers.
    pub fn total_stride(&self) -> usize {
        let mut s = 1;
        for stage in &self.stages {
            for block in &stage.blocks {
                for layer in &block.body {
                    if let Layer::Conv(c) = layer {
                        s *= c.stride;
                    }
                }
            }
        }
        s
    }
}

impl SubNetGrad {
    pub fn visit(&self, f: &mut dyn FnMut(&ArrayD<f64>)) {
        for g in &self.blocks {
            g.visit(f);
        }
    }

    pub fn tensors(&self) -> Vec<&ArrayD<f64>> {
        self.blocks.iter().flat_map(|g| g.tensors()).collect()
    }
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

/// SGD with momentum, weight decay and global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    velocity: Vec<ArrayD<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, clip_norm: Option<f64>) -> Self {
        Sgd {
            momentum,
            weight_decay,
            clip_norm,
            velocity: Vec::new(),
        }
    }

    /// One update over parallel parameter / gradient lists. Parameter order
    /// must be stable across calls; velocity buffers key off it.
    pub fn step(&mut self, lr: f64, params: Vec<&mut ArrayD<f64>>, grads: Vec<&ArrayD<f64>>) {
        assert_eq!(params.len(), grads.len(), "param/grad list mismatch");
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
        }
        assert_eq!(self.velocity.len(), params.len());

        let scale = match self.clip_norm {
            Some(c) => {
                let sq: f64 = grads
                    .iter()
                    .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                    .sum();
                let norm = sq.sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        for ((p, g), v) in params.into_iter().zip(grads).zip(self.velocity.iter_mut()) {
            assert_eq!(p.shape(), g.shape(), "param/grad shape mismatch");
            for ((vel, pv), &gv) in v.iter_mut().zip(p.iter_mut()).zip(g.iter()) {
                *vel = self.momentum * *vel + gv * scale + self.weight_decay * *pv;
                *pv -= lr * *vel;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_feat(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Feat {
        let mut x = Feat::zeros((c, h, w));
        x.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        x
    }

    /// Direct per-output-pixel convolution, independent of the production loops.
    fn conv_oracle(conv: &Conv2d, x: &Feat) -> Feat {
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ho, wo) = conv.out_hw(h, w);
        let (k, p, s) = (conv.kernel(), conv.pad(), conv.stride);
        let wv = conv.weight.view().into_dimensionality::<Ix4>().unwrap();
        let mut out = Feat::zeros((conv.c_out(), ho, wo));
        for co in 0..conv.c_out() {
            for yo in 0..ho {
                for xo in 0..wo {
                    let mut acc = conv.bias[co];
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let yi = yo as isize * s as isize + ky as isize - p as isize;
                                let xi = xo as isize * s as isize + kx as isize - p as isize;
                                if yi >= 0 && yi < h as isize && xi >= 0 && xi < w as isize {
                                    acc += wv[[co, ci, ky, kx]]
                                        * x[[ci, yi as usize, xi as usize]];
                                }
                            }
                        }
                    }
                    out[[co, yo, xo]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_direct_oracle() {
        let mut r = rng(2);
        for &(k, s) in &[(3usize, 1usize), (3, 2), (1, 1), (1, 2)] {
            let mut conv = Conv2d::new(3, 4, k, s, &mut r);
            conv.bias.mapv_inplace(|_| r.gen_range(-0.5..0.5));
            let x = random_feat(&mut r, 3, 7, 6);
            let got = conv.forward(&x);
            let want = conv_oracle(&conv, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_output_is_ceil_of_input_over_stride() {
        let mut r = rng(3);
        let conv = Conv2d::new(1, 1, 3, 2, &mut r);
        for h in 2..12usize {
            let x = random_feat(&mut r, 1, h, h);
            let y = conv.forward(&x);
            assert_eq!(y.shape()[1], h.div_ceil(2));
        }
    }

    /// Scalar loss `sum(block(x) * probe)` for finite-difference checks.
    fn probe_loss(block: &Block, x: &Feat, probe: &Feat) -> f64 {
        let y = block.forward(x);
        (&y * probe).sum()
    }

    fn check_block_gradients(block: &mut Block, c_in: usize, h: usize, w: usize, seed: u64) {
        let mut r = rng(seed);
        let x = random_feat(&mut r, c_in, h, w);
        let y = block.forward(&x);
        let probe = {
            let mut p = Feat::zeros((y.shape()[0], y.shape()[1], y.shape()[2]));
            p.mapv_inplace(|_| r.gen_range(-1.0..1.0));
            p
        };

        let (grad, dx) = {
            let (_, cache) = block.forward_train(x.clone());
            block.backward(&cache, &probe)
        };

        // Input gradient.
        let eps = 1e-6;
        let mut x_fd = x.clone();
        for idx in 0..x.len() {
            let flat = x_fd.as_slice_mut().unwrap();
            let orig = flat[idx];
            flat[idx] = orig + eps;
            let lp = probe_loss(block, &x_fd, &probe);
            x_fd.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = probe_loss(block, &x_fd, &probe);
            x_fd.as_slice_mut().unwrap()[idx] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = dx.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()),
                "input grad {idx}: fd={fd} analytic={an}"
            );
        }

        // Parameter gradients: perturb every parameter element.
        let mut analytic = Vec::new();
        grad.visit(&mut |a| analytic.extend(a.iter().copied()));
        let mut flat_idx = 0;
        let n_tensors = {
            let mut n = 0;
            block.visit(&mut |_| n += 1);
            n
        };
        for t in 0..n_tensors {
            let len = {
                let mut lens = Vec::new();
                block.visit(&mut |a| lens.push(a.len()));
                lens[t]
            };
            for e in 0..len {
                let bump = |delta: f64, block: &mut Block| {
                    let mut seen = 0;
                    block.visit_mut(&mut |a| {
                        if seen == t {
                            a.as_slice_mut().unwrap()[e] += delta;
                        }
                        seen += 1;
                    });
                };
                bump(eps, block);
                let lp = probe_loss(block, &x, &probe);
                bump(-2.0 * eps, block);
                let lm = probe_loss(block, &x, &probe);
                bump(eps, block);
                let fd = (lp - lm) / (2.0 * eps);
                let an = analytic[flat_idx];
                assert!(
                    (fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()),
                    "param grad tensor {t} elem {e}: fd={fd} analytic={an}"
                );
                flat_idx += 1;
            }
        }
        assert_eq!(flat_idx, analytic.len());
    }

    #[test]
    fn conv_relu_norm_chain_gradcheck() {
        let mut r = rng(5);
        let mut block = Block::plain(vec![
            Layer::Conv(Conv2d::new(2, 3, 3, 2, &mut r)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(3, 3, 3, 1, &mut r)),
            Layer::Norm(ChannelNorm::new(3, NormKind::Batch)),
        ]);
        check_block_gradients(&mut block, 2, 5, 4, 6);
    }

    #[test]
    fn identity_residual_block_gradcheck() {
        let mut r = rng(7);
        let mut block = Block {
            body: vec![
                Layer::Conv(Conv2d::new(3, 3, 3, 1, &mut r)),
                Layer::Relu,
                Layer::Conv(Conv2d::new(3, 3, 3, 1, &mut r)),
            ],
            shortcut: Shortcut::Identity,
        };
        check_block_gradients(&mut block, 3, 4, 4, 8);
    }

    #[test]
    fn projected_residual_block_gradcheck() {
        let mut r = rng(9);
        let mut block = Block {
            body: vec![
                Layer::Conv(Conv2d::new(2, 4, 3, 2, &mut r)),
                Layer::Relu,
                Layer::Conv(Conv2d::new(4, 4, 3, 1, &mut r)),
            ],
            shortcut: Shortcut::Proj(Conv2d::new(2, 4, 1, 2, &mut r)),
        };
        check_block_gradients(&mut block, 2, 6, 5, 10);
    }

    #[test]
    fn relu_backward_masks_nonpositive_inputs() {
        let x = ndarray::arr3(&[[[-1.0, 0.0], [2.0, 3.0]]]);
        let (y, cache) = Layer::Relu.forward_train(x);
        assert_eq!(y, ndarray::arr3(&[[[0.0, 0.0], [2.0, 3.0]]]));
        let dy = ndarray::arr3(&[[[5.0, 5.0], [5.0, 5.0]]]);
        let (_, dx) = Layer::Relu.backward(&cache, &dy);
        assert_eq!(dx, ndarray::arr3(&[[[0.0, 0.0], [5.0, 5.0]]]));
    }

    #[test]
    fn norm_standardizes_each_channel() {
        let mut r = rng(11);
        let x = random_feat(&mut r, 3, 6, 6);
        let norm = ChannelNorm::new(3, NormKind::Instance);
        let (y, _) = norm.forward(&x);
        for c in 0..3 {
            let yc = y.index_axis(ndarray::Axis(0), c);
            let n = yc.len() as f64;
            let mean = yc.sum() / n;
            let var = yc.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn sgd_momentum_accumulates_and_clips() {
        let mut p = ArrayD::<f64>::zeros(IxDyn(&[2]));
        let g = ArrayD::<f64>::ones(IxDyn(&[2]));
        let mut opt = Sgd::new(0.9, 0.0, None);
        opt.step(0.1, vec![&mut p], vec![&g]);
        assert!((p[0] + 0.1).abs() < 1e-12);
        opt.step(0.1, vec![&mut p], vec![&g]);
        // velocity = 0.9 * 1 + 1 = 1.9 so p = -0.1 - 0.19
        assert!((p[0] + 0.29).abs() < 1e-12);

        let mut p2 = ArrayD::<f64>::zeros(IxDyn(&[2]));
        let g2 = ArrayD::from_elem(IxDyn(&[2]), 10.0);
        let mut opt2 = Sgd::new(0.0, 0.0, Some(1.0));
        opt2.step(1.0, vec![&mut p2], vec![&g2]);
        // ||g|| = sqrt(200), clipped to 1, each component 10/sqrt(200)
        let expect = 10.0 / 200f64.sqrt();
        assert!((p2[0] + expect).abs() < 1e-12);
    }

    #[test]
    fn subnet_composition_and_stride() {
        let mut r = rng(13);
        let net = SubNet {
            stages: vec![
                Stage {
                    name: "a".into(),
                    blocks: vec![Block::plain(vec![
                        Layer::Conv(Conv2d::new(3, 4, 3, 2, &mut r)),
                        Layer::Relu,
                    ])],
                },
                Stage {
                    name: "b".into(),
                    blocks: vec![Block::plain(vec![
                        Layer::Conv(Conv2d::new(4, 6, 3, 2, &mut r)),
                        Layer::Norm(ChannelNorm::new(6, NormKind::Batch)),
                    ])],
                },
            ],
        };
        assert_eq!(net.total_stride(), 4);
        let x = random_feat(&mut r, 3, 16, 12);
        let y = net.forward(&x);
        assert_eq!(y.shape(), &[6, 4, 3]);
        // Training-mode forward matches plain forward.
        let (yt, cache) = net.forward_train(x.clone());
        assert_eq!(y, yt);
        // Backward produces one grad tensor per parameter tensor.
        let (grads, dx) = net.backward(&cache, &Feat::ones((6, 4, 3)));
        assert_eq!(dx.shape(), x.shape());
        let mut n_params = 0;
        net.visit(&mut |_| n_params += 1);
        let mut n_grads = 0;
        grads.visit(&mut |_| n_grads += 1);
        assert_eq!(n_params, n_grads);
    }
}
