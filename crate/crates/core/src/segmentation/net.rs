//! A small 2D encoder-decoder for cooled-region segmentation.
//!
//! Three encoder stages (stride-2 3×3 conv then 3×3 conv, ReLU) and three
//! decoder stages (nearest-neighbor ×2 upsampling, concatenation with the
//! matching skip, 3×3 conv, ReLU), then a 1×1 conv and a logistic output.
//! Forward and backward passes are written out by hand in `f64`; training is
//! Adam on mean per-pixel binary cross-entropy.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{postprocess, SegmentationError};
use crate::io::{RoiMask, ThermalFrame};

const CHECKPOINT_MAGIC: &[u8; 8] = b"TVSEGNT1";

/// One 2D convolution layer (`same` zero padding).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }
}

impl Conv {
    fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        // He-uniform
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let weight = (0..cout * cin * k * k).map(|_| rng.random_range(-bound..bound)).collect();
        Self { name: name.to_string(), cin, cout, k, stride, weight, bias: vec![0.0; cout] }
    }

    fn out_dim(&self, n: usize) -> usize {
        n.div_ceil(self.stride)
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.cin);
        let (ho, wo) = (self.out_dim(x.h), self.out_dim(x.w));
        let mut out = Tensor::zeros(self.cout, ho, wo);
        let pad = (self.k / 2) as isize;
        let (k, s) = (self.k, self.stride as isize);
        for co in 0..self.cout {
            let o = &mut out.data[co * ho * wo..(co + 1) * ho * wo];
            o.fill(self.bias[co]);
            for ci in 0..self.cin {
                let xin = &x.data[ci * x.h * x.w..(ci + 1) * x.h * x.w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.weight[((co * self.cin + ci) * k + ky) * k + kx];
                        for oy in 0..ho {
                            let iy = oy as isize * s + ky as isize - pad;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let row = &xin[iy as usize * x.w..(iy as usize + 1) * x.w];
                            let orow = &mut o[oy * wo..(oy + 1) * wo];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                let ix = ox as isize * s + kx as isize - pad;
                                if ix >= 0 && ix < x.w as isize {
                                    *ov += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    fn backward(&self, x: &Tensor, dout: &Tensor, grad: &mut ConvGrad) -> Tensor {
        let (ho, wo) = (dout.h, dout.w);
        let mut dx = Tensor::zeros(x.c, x.h, x.w);
        let pad = (self.k / 2) as isize;
        let (k, s) = (self.k, self.stride as isize);
        for co in 0..self.cout {
            let d = &dout.data[co * ho * wo..(co + 1) * ho * wo];
            grad.bias[co] += d.iter().sum::<f64>();
            for ci in 0..self.cin {
                let xin = &x.data[ci * x.h * x.w..(ci + 1) * x.h * x.w];
                let dxin = &mut dx.data[ci * x.h * x.w..(ci + 1) * x.h * x.w];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((co * self.cin + ci) * k + ky) * k + kx;
                        let wv = self.weight[widx];
                        let mut gw = 0.0;
                        for oy in 0..ho {
                            let iy = oy as isize * s + ky as isize - pad;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let base = iy as usize * x.w;
                            for ox in 0..wo {
                                let ix = ox as isize * s + kx as isize - pad;
                                if ix >= 0 && ix < x.w as isize {
                                    let g = d[oy * wo + ox];
                                    gw += g * xin[base + ix as usize];
                                    dxin[base + ix as usize] += g * wv;
                                }
                            }
                        }
                        grad.weight[widx] += gw;
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvGrad {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

fn relu(mut t: Tensor) -> Tensor {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    t
}

fn relu_backward(out: &Tensor, mut d: Tensor) -> Tensor {
    for (g, o) in d.data.iter_mut().zip(&out.data) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
    d
}

fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        for i in 0..h {
            for j in 0..w {
                out.data[(c * h + i) * w + j] = x.data[(c * x.h + i / 2) * x.w + j / 2];
            }
        }
    }
    out
}

fn upsample2_backward(d: &Tensor, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(d.c, h, w);
    for c in 0..d.c {
        for i in 0..d.h {
            for j in 0..d.w {
                out.data[(c * h + i / 2) * w + j / 2] += d.data[(c * d.h + i) * d.w + j];
            }
        }
    }
    out
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert!(a.h == b.h && a.w == b.w);
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Tensor { c: a.c + b.c, h: a.h, w: a.w, data }
}

fn split(d: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let n = ca * d.h * d.w;
    (
        Tensor { c: ca, h: d.h, w: d.w, data: d.data[..n].to_vec() },
        Tensor { c: d.c - ca, h: d.h, w: d.w, data: d.data[n..].to_vec() },
    )
}

fn add_into(acc: &mut Tensor, t: &Tensor) {
    for (a, b) in acc.data.iter_mut().zip(&t.data) {
        *a += b;
    }
}

// layer indices
const ENC0A: usize = 0;
const ENC0B: usize = 1;
const ENC1A: usize = 2;
const ENC1B: usize = 3;
const ENC2A: usize = 4;
const ENC2B: usize = 5;
const DEC2: usize = 6;
const DEC1: usize = 7;
const DEC0: usize = 8;
const HEAD: usize = 9;

/// Encoder-decoder segmenter with channel widths `[w0, w1, w2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterNet {
    pub widths: [usize; 3],
    pub seed: u64,
    pub layers: Vec<Conv>,
}

struct Cache {
    x: Tensor,
    acts: Vec<Tensor>,
    e0: Tensor,
    e1: Tensor,
}

impl SegmenterNet {
    /// He-uniform initialization from `seed`.
    pub fn new(widths: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w0, w1, w2] = widths;
        let layers = vec![
            Conv::new("enc0.down", 1, w0, 3, 2, &mut rng),
            Conv::new("enc0.conv", w0, w0, 3, 1, &mut rng),
            Conv::new("enc1.down", w0, w1, 3, 2, &mut rng),
            Conv::new("enc1.conv", w1, w1, 3, 1, &mut rng),
            Conv::new("enc2.down", w1, w2, 3, 2, &mut rng),
            Conv::new("enc2.conv", w2, w2, 3, 1, &mut rng),
            Conv::new("dec2.conv", w2 + w1, w1, 3, 1, &mut rng),
            Conv::new("dec1.conv", w1 + w0, w0, 3, 1, &mut rng),
            Conv::new("dec0.conv", w0 + 1, w0, 3, 1, &mut rng),
            Conv::new("head", w0, 1, 1, 1, &mut rng),
        ];
        Self { widths, seed, layers }
    }

    pub fn default_widths(seed: u64) -> Self {
        Self::new([8, 16, 32], seed)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameters flattened in layer order (weights then bias per layer).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&p[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[k..k + nb]);
            k += nb;
        }
    }

    fn forward_cached(&self, x: Tensor) -> (Tensor, Cache) {
        let l = &self.layers;
        let a0 = relu(l[ENC0A].forward(&x));
        let e0 = relu(l[ENC0B].forward(&a0));
        let a1 = relu(l[ENC1A].forward(&e0));
        let e1 = relu(l[ENC1B].forward(&a1));
        let a2 = relu(l[ENC2A].forward(&e1));
        let e2 = relu(l[ENC2B].forward(&a2));
        let u2 = concat(&upsample2(&e2), &e1);
        let d2 = relu(l[DEC2].forward(&u2));
        let u1 = concat(&upsample2(&d2), &e0);
        let d1 = relu(l[DEC1].forward(&u1));
        let u0 = concat(&upsample2(&d1), &x);
        let d0 = relu(l[DEC0].forward(&u0));
        let logits = l[HEAD].forward(&d0);
        let acts = vec![a0, e0.clone(), a1, e1.clone(), a2, e2, u2, d2, u1, d1, u0, d0];
        (logits, Cache { x, acts, e0, e1 })
    }

    fn backward(&self, cache: &Cache, dlogits: &Tensor) -> Vec<ConvGrad> {
        let l = &self.layers;
        let mut g: Vec<ConvGrad> = l
            .iter()
            .map(|c| ConvGrad { weight: vec![0.0; c.weight.len()], bias: vec![0.0; c.bias.len()] })
            .collect();
        let [a0, e0, a1, e1, a2, e2, u2, d2, u1, d1, u0, d0] = &cache.acts[..] else { unreachable!() };
        let dd0 = l[HEAD].backward(d0, dlogits, &mut g[HEAD]);
        let du0 = l[DEC0].backward(u0, &relu_backward(d0, dd0), &mut g[DEC0]);
        let (dup1, _dx) = split(&du0, d1.c);
        let dd1 = upsample2_backward(&dup1, d1.h, d1.w);
        let du1 = l[DEC1].backward(u1, &relu_backward(d1, dd1), &mut g[DEC1]);
        let (dup2, mut de0) = split(&du1, d2.c);
        let dd2 = upsample2_backward(&dup2, d2.h, d2.w);
        let du2 = l[DEC2].backward(u2, &relu_backward(d2, dd2), &mut g[DEC2]);
        let (dup3, mut de1) = split(&du2, e2.c);
        let de2 = upsample2_backward(&dup3, e2.h, e2.w);
        let da2 = l[ENC2B].backward(a2, &relu_backward(e2, de2), &mut g[ENC2B]);
        let de1_main = l[ENC2A].backward(e1, &relu_backward(a2, da2), &mut g[ENC2A]);
        add_into(&mut de1, &de1_main);
        let da1 = l[ENC1B].backward(a1, &relu_backward(e1, de1), &mut g[ENC1B]);
        let de0_main = l[ENC1A].backward(e0, &relu_backward(a1, da1), &mut g[ENC1A]);
        add_into(&mut de0, &de0_main);
        let da0 = l[ENC0B].backward(a0, &relu_backward(e0, de0), &mut g[ENC0B]);
        let _ = l[ENC0A].backward(&cache.x, &relu_backward(a0, da0), &mut g[ENC0A]);
        let _ = (&cache.e0, &cache.e1);
        g
    }

    /// Mean per-pixel cross-entropy on one labeled frame and its gradient
    /// with respect to [`Self::params`].
    pub fn loss_and_gradient(&self, frame: &ThermalFrame, mask: &RoiMask) -> (f64, Vec<f64>) {
        let (w, h) = (frame.width(), frame.height());
        let (logits, cache) = self.forward_cached(normalized_input(frame));
        let (loss, dlogits) = bce(&logits, mask.bits(), w, h, 1.0 / (w * h) as f64);
        (loss, flat_grad(&self.backward(&cache, &dlogits)))
    }

    /// Per-pixel viable-ROI probabilities for a frame of any size.
    pub fn predict_proba(&self, frame: &ThermalFrame) -> Vec<f64> {
        let (w, h) = (frame.width(), frame.height());
        let x = normalized_input(frame);
        let (logits, _) = self.forward_cached(x);
        crop(&logits, w, h).into_iter().map(sigmoid).collect()
    }

    /// Writes the checkpoint: magic, u32 header length, JSON header, f32 tensors.
    pub fn save(&self, path: &Path, cfg: Option<&TrainConfig>) -> Result<(), SegmentationError> {
        let header = CheckpointHeader {
            widths: self.widths,
            seed: self.seed,
            config: cfg.cloned(),
            tensors: self
                .layers
                .iter()
                .flat_map(|l| {
                    [
                        TensorInfo { name: format!("{}.weight", l.name), shape: vec![l.cout, l.cin, l.k, l.k] },
                        TensorInfo { name: format!("{}.bias", l.name), shape: vec![l.cout] },
                    ]
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| SegmentationError::Checkpoint(e.to_string()))?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(json.len() as u32).to_le_bytes())?;
        out.write_all(&json)?;
        for v in self.params() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SegmentationError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| SegmentationError::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let mut net = SegmenterNet::new(header.widths, header.seed);
        let floats: Vec<f64> = bytes[12 + hlen..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if floats.len() != net.n_params() || (bytes.len() - 12 - hlen) % 4 != 0 {
            return Err(bad("tensor payload size does not match header"));
        }
        net.set_params(&floats);
        Ok(net)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    widths: [usize; 3],
    seed: u64,
    config: Option<TrainConfig>,
    tensors: Vec<TensorInfo>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Z-scored temperatures, edge-padded to a multiple of 8 in each dimension.
fn normalized_input(frame: &ThermalFrame) -> Tensor {
    let (w, h) = (frame.width(), frame.height());
    let n = (w * h) as f64;
    let mean = frame.temps().iter().map(|&t| t as f64).sum::<f64>() / n;
    let var = frame.temps().iter().map(|&t| (t as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    let (hp, wp) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let mut t = Tensor::zeros(1, hp, wp);
    for i in 0..hp {
        for j in 0..wp {
            let v = frame.at(i.min(h - 1), j.min(w - 1)) as f64;
            t.data[i * wp + j] = (v - mean) / sd;
        }
    }
    t
}

fn crop(t: &Tensor, w: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(w * h);
    for i in 0..h {
        out.extend_from_slice(&t.data[i * t.w..i * t.w + w]);
    }
    out
}

/// Mean BCE over the unpadded pixels and its gradient w.r.t. the logits.
///
/// Each pixel contributes only its own class term, so a confidently wrong
/// logit yields an infinite loss rather than being clamped away.
fn bce(logits: &Tensor, target: &[bool], w: usize, h: usize, scale: f64) -> (f64, Tensor) {
    let mut grad = Tensor::zeros(1, logits.h, logits.w);
    let mut loss = 0.0;
    for i in 0..h {
        for j in 0..w {
            let k = i * logits.w + j;
            let p = sigmoid(logits.data[k]);
            let y = target[i * w + j];
            loss -= if y { p.ln() } else { (1.0 - p).ln() };
            grad.data[k] = (p - if y { 1.0 } else { 0.0 }) * scale;
        }
    }
    (loss * scale, grad)
}

/// Adam hyper-parameters and schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub widths: [usize; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            epochs: 50,
            seed: 0,
            widths: [8, 16, 32],
        }
    }
}

/// Adam state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
        }
    }

    /// Overrides the step size for subsequent steps (schedules).
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub net: SegmenterNet,
    /// Mean training loss of each epoch.
    pub losses: Vec<f64>,
}

fn flat_grad(g: &[ConvGrad]) -> Vec<f64> {
    let mut out = Vec::new();
    for c in g {
        out.extend_from_slice(&c.weight);
        out.extend_from_slice(&c.bias);
    }
    out
}

/// Loss and flattened parameter gradient for one batch.
fn batch_gradient(net: &SegmenterNet, batch: &[&(ThermalFrame, RoiMask)]) -> (f64, Vec<f64>) {
    use rayon::prelude::*;
    let total_px: usize = batch.iter().map(|(f, _)| f.width() * f.height()).sum();
    let scale = 1.0 / total_px as f64;
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|(frame, mask)| {
            let x = normalized_input(frame);
            let (logits, cache) = net.forward_cached(x);
            let (loss, dlogits) = bce(&logits, mask.bits(), frame.width(), frame.height(), scale);
            (loss, flat_grad(&net.backward(&cache, &dlogits)))
        })
        .collect();
    let mut grad = vec![0.0; net.n_params()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss, grad)
}

/// Step size of `epoch`: cosine annealing from `base` toward zero. Late
/// full-size Adam steps on an almost-fit set overshoot and spike the loss.
fn cosine_rate(base: f64, epoch: usize, epochs: usize) -> f64 {
    0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

/// Trains a fresh net with Adam on mean per-pixel binary cross-entropy,
/// the step size annealed over the run (see [`cosine_rate`]).
pub fn train_segmenter(dataset: &[(ThermalFrame, RoiMask)], cfg: &TrainConfig) -> Result<TrainReport, SegmentationError> {
    if dataset.is_empty() {
        return Err(SegmentationError::EmptyDataset);
    }
    let (w, h) = (dataset[0].0.width(), dataset[0].0.height());
    if dataset.iter().any(|(f, m)| f.width() != w || f.height() != h || m.width() != w || m.height() != h) {
        return Err(SegmentationError::DimensionMismatch);
    }
    let mut net = SegmenterNet::new(cfg.widths, cfg.seed);
    let mut adam = Adam::new(net.n_params(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let batch_size = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        adam.set_learning_rate(cosine_rate(cfg.learning_rate, epoch, cfg.epochs));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grad) = batch_gradient(&net, &batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(SegmentationError::NonFiniteLoss { epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            let mut p = net.params();
            adam.step(&mut p, &grad);
            net.set_params(&p);
        }
        let mean = epoch_loss / dataset.len() as f64;
        log::debug!("segmenter epoch {epoch}: loss {mean:.6}");
        losses.push(mean);
    }
    Ok(TrainReport { net, losses })
}

/// Thresholds the net's probabilities at 0.5 and applies the shared post-processing.
///
/// May return an empty mask; callers treat that as no cold region.
pub fn infer_mask(net: &SegmenterNet, frame: &ThermalFrame) -> RoiMask {
    let (w, h) = (frame.width(), frame.height());
    let bits: Vec<bool> = net.predict_proba(frame).iter().map(|&p| p >= 0.5).collect();
    if !bits.iter().any(|b| *b) {
        return RoiMask::empty(w, h);
    }
    postprocess(&bits, w, h)
}
