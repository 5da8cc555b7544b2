//! Frame alignment by maximizing the enhanced correlation coefficient (ECC).
//!
//! A [`WarpModel`] maps reference (video frame 0) coordinates to coordinates
//! in the moving frame, so `aligned(x) = moving(W x)`. The optimizer is the
//! forward-additive Gauss-Newton scheme of Evangelidis and Psarakis, run over
//! a two-level box-filter pyramid. Every accepted iteration has a correlation
//! no lower than the previous one: a step that lowers it is halved, and five
//! consecutive rejected halvings end the search.

use serde::{Deserialize, Serialize};

use crate::io::{RoiMask, ThermalFrame, ThermalSequence};
use crate::segmentation::otsu_threshold;

/// Steps halved this many times without improving rho end the search.
const MAX_BACKTRACKS: usize = 5;
/// Stabilization runs with any video frame below this rho need review.
pub const REVIEW_RHO: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistrationError {
    #[error("zero intensity variance in the {0} image; correlation undefined")]
    FlatImage(&'static str),
    #[error("alignment diverged: {0}")]
    Diverged(String),
    #[error("warp is not invertible (det = {0:e})")]
    NonInvertibleWarp(f64),
    #[error("frames differ in size")]
    DimensionMismatch,
    #[error("frame {index}: {source}")]
    Frame { index: i64, source: Box<RegistrationError> },
    #[error("sequence needs at least 2 frames")]
    TooFewFrames,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpKind {
    Translation,
    Euclidean,
    Affine,
}

impl WarpKind {
    pub fn n_params(self) -> usize {
        match self {
            WarpKind::Translation => 2,
            WarpKind::Euclidean => 3,
            WarpKind::Affine => 6,
        }
    }
}

impl std::str::FromStr for WarpKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "translation" => Ok(WarpKind::Translation),
            "euclidean" => Ok(WarpKind::Euclidean),
            "affine" => Ok(WarpKind::Affine),
            other => Err(format!("unknown warp kind '{other}'")),
        }
    }
}

/// 2D geometric transform `[a b tx; c d ty]` with its fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpModel {
    pub kind: WarpKind,
    /// `[tx, ty]`, `[theta, tx, ty]` or `[a, b, tx, c, d, ty]`.
    pub params: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted iteration at full resolution, starting
    /// with the initial warp. Equal to rho unless the reference carries a
    /// photometric basis (see [`EccReference::with_basis`]).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rho_log: Vec<f64>,
}

impl WarpModel {
    pub fn identity(kind: WarpKind) -> Self {
        let params = match kind {
            WarpKind::Translation => vec![0.0, 0.0],
            WarpKind::Euclidean => vec![0.0, 0.0, 0.0],
            WarpKind::Affine => vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        };
        Self { kind, params, rho: 1.0, iterations: 0, converged: true, rho_log: Vec::new() }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { params: vec![tx, ty], ..Self::identity(WarpKind::Translation) }
    }

    pub fn euclidean(theta: f64, tx: f64, ty: f64) -> Self {
        Self { params: vec![theta, tx, ty], ..Self::identity(WarpKind::Euclidean) }
    }

    pub fn affine(m: [f64; 6]) -> Self {
        Self { params: m.to_vec(), ..Self::identity(WarpKind::Affine) }
    }

    /// The 2×3 matrix `[a, b, tx, c, d, ty]`.
    pub fn matrix(&self) -> [f64; 6] {
        let p = &self.params;
        match self.kind {
            WarpKind::Translation => [1.0, 0.0, p[0], 0.0, 1.0, p[1]],
            WarpKind::Euclidean => {
                let (s, c) = p[0].sin_cos();
                [c, -s, p[1], s, c, p[2]]
            }
            WarpKind::Affine => [p[0], p[1], p[2], p[3], p[4], p[5]],
        }
    }

    pub fn translation_part(&self) -> (f64, f64) {
        let m = self.matrix();
        (m[2], m[5])
    }

    /// Re-expresses this warp as `kind` (used to seed a wider family from a narrower one).
    pub fn as_kind(&self, kind: WarpKind) -> WarpModel {
        let m = self.matrix();
        let params = match kind {
            WarpKind::Translation => vec![m[2], m[5]],
            WarpKind::Euclidean => vec![m[3].atan2(m[0]), m[2], m[5]],
            WarpKind::Affine => m.to_vec(),
        };
        WarpModel { kind, params, ..self.clone() }
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let [a, b, tx, c, d, ty] = self.matrix();
        (a * p.0 + b * p.1 + tx, c * p.0 + d * p.1 + ty)
    }

    /// Closed-form inverse as an affine warp.
    pub fn inverse(&self) -> Result<WarpModel, RegistrationError> {
        let [a, b, tx, c, d, ty] = self.matrix();
        let det = a * d - b * c;
        if !(det.abs() >= 1e-12) {
            return Err(RegistrationError::NonInvertibleWarp(det));
        }
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        let itx = -(ia * tx + ib * ty);
        let ity = -(ic * tx + id * ty);
        Ok(WarpModel { kind: WarpKind::Affine, params: vec![ia, ib, itx, ic, id, ity], ..self.clone() })
    }

    /// `self ∘ inner`: apply `inner` first. Result is affine; bookkeeping comes from `self`.
    pub fn compose(&self, inner: &WarpModel) -> WarpModel {
        let [a, b, tx, c, d, ty] = self.matrix();
        let [e, f, ux, g, h, uy] = inner.matrix();
        let m = [a * e + b * g, a * f + b * h, a * ux + b * uy + tx, c * e + d * g, c * f + d * h, c * ux + d * uy + ty];
        WarpModel { kind: WarpKind::Affine, params: m.to_vec(), ..self.clone() }
    }

    /// Maps a moving-frame point back to reference coordinates.
    pub fn apply_inverse(&self, p: (f64, f64)) -> Result<(f64, f64), RegistrationError> {
        Ok(self.inverse()?.apply(p))
    }

    fn scaled(&self, factor: f64) -> WarpModel {
        let mut w = self.clone();
        match self.kind {
            WarpKind::Translation => {
                w.params[0] *= factor;
                w.params[1] *= factor;
            }
            WarpKind::Euclidean => {
                w.params[1] *= factor;
                w.params[2] *= factor;
            }
            WarpKind::Affine => {
                w.params[2] *= factor;
                w.params[5] *= factor;
            }
        }
        w
    }
}

#[derive(Debug, Clone)]
pub struct EccConfig {
    pub max_iterations: usize,
    /// Convergence threshold on the parameter-update norm.
    pub epsilon: f64,
    /// Restricts the correlation support to these reference pixels.
    pub mask: Option<RoiMask>,
    /// 1 = full resolution only, 2 = one extra half-resolution level.
    pub pyramid_levels: usize,
    /// Gaussian pre-smoothing of both frames, σ in pixels; 0 disables.
    pub smoothing_sigma: f64,
}

impl Default for EccConfig {
    fn default() -> Self {
        Self { max_iterations: 100, epsilon: 1e-5, mask: None, pyramid_levels: 2, smoothing_sigma: 0.5 }
    }
}

/// A resampled frame; pixels whose source fell outside the moving frame are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFrame {
    pub width: usize,
    pub height: usize,
    pub timestamp: f64,
    pub temps: Vec<f64>,
    pub valid: Vec<bool>,
}

impl AlignedFrame {
    /// Wraps an unwarped frame (all pixels valid).
    pub fn from_frame(f: &ThermalFrame) -> Self {
        Self {
            width: f.width(),
            height: f.height(),
            timestamp: f.timestamp(),
            temps: f.temps().iter().map(|&t| t as f64).collect(),
            valid: vec![true; f.width() * f.height()],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> Option<f64> {
        let k = row * self.width + col;
        self.valid[k].then(|| self.temps[k])
    }

    pub fn map_temps(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for t in &mut out.temps {
            *t = f(*t);
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Image {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Image {
    fn from_frame(f: &ThermalFrame) -> Self {
        Self { w: f.width(), h: f.height(), data: f.temps().iter().map(|&t| t as f64).collect() }
    }

    #[inline]
    fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.w + col]
    }

    /// Bilinear sample at continuous coordinates (pixel centers at +0.5).
    #[inline]
    fn sample(&self, u: f64, v: f64) -> Option<f64> {
        let fx = u - 0.5;
        let fy = v - 0.5;
        let (wm, hm) = ((self.w - 1) as f64, (self.h - 1) as f64);
        if !(fx >= 0.0 && fy >= 0.0 && fx <= wm && fy <= hm) {
            return None;
        }
        let mut x0 = fx.floor() as usize;
        let mut y0 = fy.floor() as usize;
        if x0 + 1 >= self.w {
            x0 = self.w.saturating_sub(2);
        }
        if y0 + 1 >= self.h {
            y0 = self.h.saturating_sub(2);
        }
        let ax = fx - x0 as f64;
        let ay = fy - y0 as f64;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let top = (1.0 - ax) * self.get(y0, x0) + ax * self.get(y0, x1);
        let bottom = (1.0 - ax) * self.get(y1, x0) + ax * self.get(y1, x1);
        Some((1.0 - ay) * top + ay * bottom)
    }

    /// Central-difference gradients; one-sided at the borders.
    fn gradients(&self) -> (Image, Image) {
        let (w, h) = (self.w, self.h);
        let mut gx = vec![0.0; w * h];
        let mut gy = vec![0.0; w * h];
        for i in 0..h {
            for j in 0..w {
                let (l, r) = (j.saturating_sub(1), (j + 1).min(w - 1));
                let (u, d) = (i.saturating_sub(1), (i + 1).min(h - 1));
                if r > l {
                    gx[i * w + j] = (self.get(i, r) - self.get(i, l)) / (r - l) as f64;
                }
                if d > u {
                    gy[i * w + j] = (self.get(d, j) - self.get(u, j)) / (d - u) as f64;
                }
            }
        }
        (Image { w, h, data: gx }, Image { w, h, data: gy })
    }

    /// 2×2 box-filter downsampling.
    fn half(&self) -> Image {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut data = Vec::with_capacity(w * h);
        for i in 0..h {
            for j in 0..w {
                let s = self.get(2 * i, 2 * j)
                    + self.get(2 * i, 2 * j + 1)
                    + self.get(2 * i + 1, 2 * j)
                    + self.get(2 * i + 1, 2 * j + 1);
                data.push(0.25 * s);
            }
        }
        Image { w, h, data }
    }
}

impl Image {
    /// Separable Gaussian blur with replicated borders.
    fn blurred(&self, sigma: f64) -> Image {
        if !(sigma > 0.0) {
            return self.clone();
        }
        let r = (3.0 * sigma).ceil() as isize;
        let mut k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= total);
        let (w, h) = (self.w as isize, self.h as isize);
        let mut tmp = vec![0.0; self.data.len()];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let c = (j + t as isize - r).clamp(0, w - 1);
                    acc += kv * self.data[(i * w + c) as usize];
                }
                tmp[(i * w + j) as usize] = acc;
            }
        }
        let mut data = vec![0.0; self.data.len()];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let rr = (i + t as isize - r).clamp(0, h - 1);
                    acc += kv * tmp[(rr * w + j) as usize];
                }
                data[(i * w + j) as usize] = acc;
            }
        }
        Image { w: self.w, h: self.h, data }
    }
}

fn half_mask(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let (hw, hh) = (w / 2, h / 2);
    let mut out = Vec::with_capacity(hw * hh);
    for i in 0..hh {
        for j in 0..hw {
            let at = |r: usize, c: usize| mask[r * w + c];
            out.push(at(2 * i, 2 * j) && at(2 * i, 2 * j + 1) && at(2 * i + 1, 2 * j) && at(2 * i + 1, 2 * j + 1));
        }
    }
    out
}

fn variance_under(img: &Image, mask: &[bool]) -> f64 {
    let (mut s, mut s2, mut n) = (0.0, 0.0, 0usize);
    for (v, m) in img.data.iter().zip(mask) {
        if *m {
            s += v;
            s2 += v * v;
            n += 1;
        }
    }
    if n < 2 {
        return 0.0;
    }
    let mean = s / n as f64;
    (s2 / n as f64 - mean * mean).max(0.0)
}

/// One pyramid level of the reference, with its support mask.
struct RefLevel {
    img: Image,
    mask: Vec<bool>,
    support: usize,
    shift: f64,
    /// Photometric nuisance image in reference coordinates, centered.
    basis: Option<Vec<f64>>,
}

struct MovingLevel {
    img: Image,
    gx: Image,
    gy: Image,
    shift: f64,
}

fn mean_of(img: &Image) -> f64 {
    img.data.iter().sum::<f64>() / img.data.len() as f64
}

/// Reference frame prepared once and shared by every moving frame.
pub struct EccReference {
    levels: Vec<RefLevel>,
    smoothing_sigma: f64,
}

impl EccReference {
    pub fn new(reference: &ThermalFrame, config: &EccConfig) -> Result<Self, RegistrationError> {
        Self::build(reference, None, config)
    }

    /// Like [`EccReference::new`], but intensity changes along `basis` (one
    /// value per reference pixel) are ignored along with gain and offset:
    /// the correlation is taken after projecting out `{1, basis}`.
    ///
    /// A cooled region whose contrast fades between two frames otherwise
    /// pulls the warp along the background gradient.
    pub fn with_basis(reference: &ThermalFrame, basis: &[f64], config: &EccConfig) -> Result<Self, RegistrationError> {
        if basis.len() != reference.width() * reference.height() {
            return Err(RegistrationError::DimensionMismatch);
        }
        Self::build(reference, Some(basis), config)
    }

    fn build(reference: &ThermalFrame, basis: Option<&[f64]>, config: &EccConfig) -> Result<Self, RegistrationError> {
        let img = Image::from_frame(reference).blurred(config.smoothing_sigma);
        let mut basis = basis.map(|b| Image { w: img.w, h: img.h, data: b.to_vec() }.blurred(config.smoothing_sigma));
        let mask = match &config.mask {
            Some(m) => {
                if m.width() != img.w || m.height() != img.h {
                    return Err(RegistrationError::DimensionMismatch);
                }
                m.bits().to_vec()
            }
            None => vec![true; img.w * img.h],
        };
        if !(variance_under(&img, &mask) > 0.0) {
            return Err(RegistrationError::FlatImage("reference"));
        }
        let centered = |b: &Image| {
            let m = mean_of(b);
            b.data.iter().map(|v| v - m).collect::<Vec<_>>()
        };
        let support = mask.iter().filter(|m| **m).count();
        let first = RefLevel { support, shift: mean_of(&img), basis: basis.as_ref().map(centered), img, mask };
        let mut levels = vec![first];
        for _ in 1..config.pyramid_levels.max(1) {
            let last = levels.last().unwrap();
            if last.img.w < 32 || last.img.h < 32 {
                break;
            }
            let img = last.img.half();
            let mask = half_mask(&last.mask, last.img.w, last.img.h);
            let support = mask.iter().filter(|m| **m).count();
            if support < 16 || !(variance_under(&img, &mask) > 0.0) {
                break;
            }
            basis = basis.map(|b| b.half());
            levels.push(RefLevel { shift: mean_of(&img), basis: basis.as_ref().map(centered), img, mask, support });
        }
        Ok(Self { levels, smoothing_sigma: config.smoothing_sigma })
    }
}

fn moving_levels(moving: &ThermalFrame, n: usize, sigma: f64) -> Vec<MovingLevel> {
    let mut out: Vec<MovingLevel> = Vec::with_capacity(n);
    let mut img = Image::from_frame(moving).blurred(sigma);
    for k in 0..n {
        if k > 0 {
            img = out[k - 1].img.half();
        }
        let (gx, gy) = img.gradients();
        out.push(MovingLevel { shift: mean_of(&img), img: img.clone(), gx, gy });
    }
    out
}

/// Everything one Gauss-Newton step needs, evaluated at a given warp.
struct Evaluation {
    /// Plain correlation coefficient.
    rho: f64,
    /// The maximized objective: rho after projecting out the photometric basis.
    score: f64,
    delta: Vec<f64>,
}

fn jacobian_row(kind: WarpKind, params: &[f64], x: f64, y: f64, gx: f64, gy: f64, out: &mut [f64; 6]) {
    match kind {
        WarpKind::Translation => {
            out[0] = gx;
            out[1] = gy;
        }
        WarpKind::Euclidean => {
            let (s, c) = params[0].sin_cos();
            out[0] = gx * (-s * x - c * y) + gy * (c * x - s * y);
            out[1] = gx;
            out[2] = gy;
        }
        WarpKind::Affine => {
            out[0] = gx * x;
            out[1] = gx * y;
            out[2] = gx;
            out[3] = gy * x;
            out[4] = gy * y;
            out[5] = gy;
        }
    }
}

fn solve(h: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let m = nalgebra::DMatrix::from_row_slice(n, n, h);
    let v = nalgebra::DVector::from_column_slice(b);
    let chol = nalgebra::Cholesky::new(m)?;
    Some(chol.solve(&v).iter().copied().collect())
}

/// Bilinear weights at continuous coordinates, shared by an image and its gradients.
#[inline]
fn bilinear(w: usize, h: usize, u: f64, v: f64) -> Option<([usize; 4], [f64; 4])> {
    let fx = u - 0.5;
    let fy = v - 0.5;
    if !(fx >= 0.0 && fy >= 0.0 && fx <= (w - 1) as f64 && fy <= (h - 1) as f64) {
        return None;
    }
    let x0 = (fx.floor() as usize).min(w.saturating_sub(2));
    let y0 = (fy.floor() as usize).min(h.saturating_sub(2));
    let ax = fx - x0 as f64;
    let ay = fy - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Some((
        [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        [(1.0 - ax) * (1.0 - ay), ax * (1.0 - ay), (1.0 - ax) * ay, ax * ay],
    ))
}

#[inline]
fn interp(data: &[f64], (idx, wt): &([usize; 4], [f64; 4])) -> f64 {
    wt[0] * data[idx[0]] + wt[1] * data[idx[1]] + wt[2] * data[idx[2]] + wt[3] * data[idx[3]]
}

/// Running sums over the sampled pixels; values are shifted by fixed offsets
/// to keep the centered moments accurate.
struct Sums {
    n: usize,
    t: f64,
    v: f64,
    tt: f64,
    vv: f64,
    tv: f64,
    g: [f64; 6],
    gt: [f64; 6],
    gv: [f64; 6],
    h: [f64; 36],
    // basis moments
    m: f64,
    mm: f64,
    mt: f64,
    mv: f64,
    gm: [f64; 6],
}

fn evaluate(
    r: &RefLevel,
    mv: &MovingLevel,
    warp: &WarpModel,
    with_step: bool,
) -> Result<Evaluation, RegistrationError> {
    let np = warp.kind.n_params();
    let [a, b, tx, c, d, ty] = warp.matrix();
    let (w, h) = (r.img.w, r.img.h);
    let (mw, mh) = (mv.img.w, mv.img.h);
    let mut s = Sums {
        n: 0,
        t: 0.0,
        v: 0.0,
        tt: 0.0,
        vv: 0.0,
        tv: 0.0,
        g: [0.0; 6],
        gt: [0.0; 6],
        gv: [0.0; 6],
        h: [0.0; 36],
        m: 0.0,
        mm: 0.0,
        mt: 0.0,
        mv: 0.0,
        gm: [0.0; 6],
    };
    let mut row = [0.0; 6];
    for i in 0..h {
        let y = i as f64 + 0.5;
        for j in 0..w {
            let k = i * w + j;
            if !r.mask[k] {
                continue;
            }
            let x = j as f64 + 0.5;
            let (u, v) = (a * x + b * y + tx, c * x + d * y + ty);
            let Some(bw) = bilinear(mw, mh, u, v) else { continue };
            let tv = r.img.data[k] - r.shift;
            let iv = interp(&mv.img.data, &bw) - mv.shift;
            s.n += 1;
            s.t += tv;
            s.v += iv;
            s.tt += tv * tv;
            s.vv += iv * iv;
            s.tv += tv * iv;
            let mk = r.basis.as_ref().map_or(0.0, |b| b[k]);
            s.m += mk;
            s.mm += mk * mk;
            s.mt += mk * tv;
            s.mv += mk * iv;
            if with_step {
                let gx = interp(&mv.gx.data, &bw);
                let gy = interp(&mv.gy.data, &bw);
                jacobian_row(warp.kind, &warp.params, x, y, gx, gy, &mut row);
                for p in 0..np {
                    let gp = row[p];
                    s.g[p] += gp;
                    s.gt[p] += gp * tv;
                    s.gv[p] += gp * iv;
                    s.gm[p] += gp * mk;
                    for q in p..np {
                        s.h[p * np + q] += gp * row[q];
                    }
                }
            }
        }
    }
    let n = s.n;
    if 2 * n < r.support {
        return Err(RegistrationError::Diverged(format!(
            "warp maps {} of {} support pixels out of bounds",
            r.support - n,
            r.support
        )));
    }
    let nf = n as f64;
    let (tm, im) = (s.t / nf, s.v / nf);
    let plain_t = s.tt - nf * tm * tm;
    let plain_i = s.vv - nf * im * im;
    if !(plain_t > 0.0) {
        return Err(RegistrationError::FlatImage("reference"));
    }
    if !(plain_i > 0.0) {
        return Err(RegistrationError::FlatImage("moving"));
    }
    let rho = ((s.tv - nf * tm * im) / (plain_t.sqrt() * plain_i.sqrt())).clamp(-1.0, 1.0);

    // Inner products after projecting out span{1, basis} over the sampled
    // pixels: <a,b> - [Σa Σma] G⁻¹ [Σb Σmb]ᵀ with G the Gram matrix of {1, basis}.
    // Without a basis this is plain centering.
    let det = nf * s.mm - s.m * s.m;
    let ginv = if r.basis.is_some() && det > 1e-9 * nf * s.mm.max(f64::MIN_POSITIVE) {
        [s.mm / det, -s.m / det, nf / det]
    } else {
        [1.0 / nf, 0.0, 0.0]
    };
    let q = |ab: f64, a1: f64, am: f64, b1: f64, bm: f64| {
        ab - (a1 * (ginv[0] * b1 + ginv[1] * bm) + am * (ginv[1] * b1 + ginv[2] * bm))
    };
    let tnorm2 = q(s.tt, s.t, s.mt, s.t, s.mt);
    let inorm2 = q(s.vv, s.v, s.mv, s.v, s.mv);
    if !(tnorm2 > 0.0 && inorm2 > 0.0) {
        return Err(RegistrationError::FlatImage("basis-projected"));
    }
    let corr = q(s.tv, s.t, s.mt, s.v, s.mv);
    let score = (corr / (tnorm2.sqrt() * inorm2.sqrt())).clamp(-1.0, 1.0);
    if !with_step {
        return Ok(Evaluation { rho, score, delta: Vec::new() });
    }

    let mut hess = vec![0.0; np * np];
    for p in 0..np {
        for k in p..np {
            // Jacobian columns are projected like the images
            let v = q(s.h[p * np + k], s.g[p], s.gm[p], s.g[k], s.gm[k]);
            hess[p * np + k] = v;
            hess[k * np + p] = v;
        }
    }
    // projections of the images onto the Jacobian columns
    let iproj: Vec<f64> = (0..np).map(|p| q(s.gv[p], s.g[p], s.gm[p], s.v, s.mv)).collect();
    let tproj: Vec<f64> = (0..np).map(|p| q(s.gt[p], s.g[p], s.gm[p], s.t, s.mt)).collect();
    let Some(hi_ip) = solve(&hess, &iproj, np) else {
        return Err(RegistrationError::Diverged("singular Gauss-Newton Hessian".into()));
    };
    let hi_tp = solve(&hess, &tproj, np).unwrap_or_else(|| vec![0.0; np]);
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let lambda_n = inorm2 - dot(&iproj, &hi_ip);
    let lambda_d = corr - dot(&tproj, &hi_ip);
    let lambda = if lambda_d > 0.0 {
        lambda_n / lambda_d
    } else {
        // correlation not yet positive in the linearized subspace
        let denom = tnorm2 - dot(&tproj, &hi_tp);
        if denom > 0.0 && lambda_n > 0.0 {
            (lambda_n / denom).sqrt()
        } else {
            1.0
        }
    };
    let eproj: Vec<f64> = (0..np).map(|p| lambda * tproj[p] - iproj[p]).collect();
    let delta = solve(&hess, &eproj, np)
        .ok_or_else(|| RegistrationError::Diverged("singular Gauss-Newton Hessian".into()))?;
    if delta.iter().any(|d| !d.is_finite()) {
        return Err(RegistrationError::Diverged("non-finite update".into()));
    }
    Ok(Evaluation { rho, score, delta })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct LevelResult {
    warp: WarpModel,
    iterations: usize,
    converged: bool,
    log: Vec<f64>,
}

fn optimize_level(
    r: &RefLevel,
    mv: &MovingLevel,
    init: WarpModel,
    max_iterations: usize,
    epsilon: f64,
) -> Result<LevelResult, RegistrationError> {
    let mut warp = init;
    let mut current = evaluate(r, mv, &warp, true)?;
    let mut log = vec![current.score];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iterations {
        let mut step = current.delta.clone();
        if norm(&step) < epsilon {
            converged = true;
            break;
        }
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let mut cand = warp.clone();
            for (p, s) in cand.params.iter_mut().zip(&step) {
                *p += s;
            }
            match evaluate(r, mv, &cand, true) {
                Ok(ev) if ev.score >= current.score => {
                    accepted = Some((cand, ev));
                    break;
                }
                Ok(_) | Err(RegistrationError::Diverged(_)) => {}
                Err(e) => return Err(e),
            }
            for s in &mut step {
                *s *= 0.5;
            }
        }
        iterations += 1;
        match accepted {
            Some((cand, ev)) => {
                warp = cand;
                current = ev;
                log.push(current.score);
            }
            None => {
                // no ascent direction left at this resolution
                converged = norm(&step) < epsilon;
                break;
            }
        }
    }
    warp.rho = current.rho;
    Ok(LevelResult { warp, iterations, converged, log })
}

/// Aligns `moving` to a prepared reference, starting from `init`.
pub fn ecc_align_prepared(
    reference: &EccReference,
    moving: &ThermalFrame,
    init: &WarpModel,
    config: &EccConfig,
) -> Result<WarpModel, RegistrationError> {
    let base = &reference.levels[0];
    if moving.width() != base.img.w || moving.height() != base.img.h {
        return Err(RegistrationError::DimensionMismatch);
    }
    let levels = moving_levels(moving, reference.levels.len(), reference.smoothing_sigma);
    if !(variance_under(&levels[0].img, &vec![true; base.img.w * base.img.h]) > 0.0) {
        return Err(RegistrationError::FlatImage("moving"));
    }
    let n_levels = reference.levels.len();
    let mut warp = init.clone().scaled(0.5f64.powi(n_levels as i32 - 1));
    let mut used = 0;
    let mut result = None;
    for lvl in (0..n_levels).rev() {
        let budget = if lvl == 0 { config.max_iterations - used } else { (config.max_iterations - used) / 2 };
        let r = optimize_level(&reference.levels[lvl], &levels[lvl], warp.clone(), budget, config.epsilon)?;
        used += r.iterations;
        if lvl > 0 {
            warp = r.warp.scaled(2.0);
        } else {
            result = Some(r);
        }
    }
    let r = result.expect("full-resolution level always runs");
    Ok(WarpModel {
        kind: init.kind,
        params: r.warp.params,
        rho: r.warp.rho,
        iterations: used,
        converged: r.converged,
        rho_log: r.log,
    })
}

/// Finds the warp of `kind` maximizing the correlation between `reference`
/// and the warped `moving` frame, starting from the identity.
pub fn ecc_align(
    reference: &ThermalFrame,
    moving: &ThermalFrame,
    kind: WarpKind,
    config: &EccConfig,
) -> Result<WarpModel, RegistrationError> {
    if !reference.same_shape(moving) {
        return Err(RegistrationError::DimensionMismatch);
    }
    let prepared = EccReference::new(reference, config)?;
    ecc_align_prepared(&prepared, moving, &WarpModel::identity(kind), config)
}

/// Bilinear resampling `out(x) = moving(W x)`; out-of-bounds pixels are invalid.
pub fn resample(moving: &ThermalFrame, w: &WarpModel) -> AlignedFrame {
    let img = Image::from_frame(moving);
    let [a, b, tx, c, d, ty] = w.matrix();
    let (width, height) = (moving.width(), moving.height());
    let mut temps = Vec::with_capacity(width * height);
    let mut valid = Vec::with_capacity(width * height);
    for i in 0..height {
        for j in 0..width {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            match img.sample(a * x + b * y + tx, c * x + d * y + ty) {
                Some(v) => {
                    temps.push(v);
                    valid.push(true);
                }
                None => {
                    temps.push(f64::NAN);
                    valid.push(false);
                }
            }
        }
    }
    AlignedFrame { width, height, timestamp: moving.timestamp(), temps, valid }
}

#[derive(Debug, Clone)]
pub struct StabilizeConfig {
    pub frame_kind: WarpKind,
    pub precool_kind: WarpKind,
    /// Frames between keyframes (see [`stabilize_sequence`]).
    pub keyframe_interval: usize,
    /// Project the cooled region of frame 0 out of every correlation.
    pub cooling_basis: bool,
    pub ecc: EccConfig,
}

pub const DEFAULT_KEYFRAME_INTERVAL: usize = 10;

/// Pre-smoothing σ for sequence stabilization. Late in the recovery the
/// scene carries little structure besides smooth background, and sensor
/// noise would otherwise dominate each hop of the chain.
pub const STABILIZE_SMOOTHING_SIGMA: f64 = 1.5;

impl Default for StabilizeConfig {
    fn default() -> Self {
        Self {
            frame_kind: WarpKind::Euclidean,
            precool_kind: WarpKind::Affine,
            keyframe_interval: DEFAULT_KEYFRAME_INTERVAL,
            cooling_basis: true,
            ecc: EccConfig { smoothing_sigma: STABILIZE_SMOOTHING_SIGMA, ..EccConfig::default() },
        }
    }
}

impl StabilizeConfig {
    /// Uses `kind` for both video frames and the precool image.
    pub fn uniform(kind: WarpKind) -> Self {
        Self { frame_kind: kind, precool_kind: kind, ..Self::default() }
    }
}

/// Warps of one sequence, all relative to video frame 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stabilization {
    pub precool: WarpModel,
    pub frames: Vec<WarpModel>,
}

/// One line of `warps.jsonl`. `frame_index` is -1 for the precool image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpLogLine {
    pub frame_index: i64,
    pub kind: WarpKind,
    pub params: [f64; 6],
    pub rho: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl Stabilization {
    /// True when any video frame correlates below [`REVIEW_RHO`] after alignment.
    ///
    /// The precool image is excluded: cooling changes its content, so its
    /// correlation with frame 0 is low even under perfect alignment.
    pub fn review_required(&self) -> bool {
        self.frames.iter().any(|w| w.rho < REVIEW_RHO)
    }

    pub fn min_frame_rho(&self) -> f64 {
        self.frames.iter().map(|w| w.rho).fold(f64::INFINITY, f64::min)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let lines = std::iter::once((-1i64, &self.precool)).chain(self.frames.iter().enumerate().map(|(k, w)| (k as i64, w)));
        for (frame_index, w) in lines {
            let line = WarpLogLine {
                frame_index,
                kind: w.kind,
                params: w.matrix(),
                rho: w.rho,
                iterations: w.iterations,
                converged: w.converged,
            };
            out.push_str(&serde_json::to_string(&line).expect("warp log serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let mut precool = None;
        let mut frames = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let l: WarpLogLine = serde_json::from_str(line)?;
            let w = WarpModel {
                params: WarpModel::affine(l.params).as_kind(l.kind).params,
                kind: l.kind,
                rho: l.rho,
                iterations: l.iterations,
                converged: l.converged,
                rho_log: Vec::new(),
            };
            if l.frame_index < 0 {
                precool = Some(w);
            } else {
                frames.push(w);
            }
        }
        let precool = precool.ok_or_else(|| serde::de::Error::custom("warp log has no precool entry"))?;
        Ok(Self { precool, frames })
    }
}

/// A richer warp must raise rho by this much over translation to be kept.
pub const MIN_RHO_GAIN: f64 = 2e-3;

/// Fits a translation first, then refines it to `kind`; the extra freedom is
/// kept only if it earns [`MIN_RHO_GAIN`]. Weakly textured pairs otherwise let
/// scale and shear wander with almost no change in rho.
fn align_nested(reference: &EccReference, moving: &ThermalFrame, kind: WarpKind, config: &EccConfig) -> Result<WarpModel, RegistrationError> {
    let base = ecc_align_prepared(reference, moving, &WarpModel::identity(WarpKind::Translation), config)?;
    if kind == WarpKind::Translation {
        return Ok(base);
    }
    let fallback = WarpModel { kind, ..base.as_kind(kind) };
    match ecc_align_prepared(reference, moving, &fallback, config) {
        Ok(rich) if rich.rho >= base.rho + MIN_RHO_GAIN => Ok(WarpModel { iterations: base.iterations + rich.iterations, ..rich }),
        _ => Ok(fallback),
    }
}

/// Cooled-region weight of frame 0 in `[0, 1]`, or `None` when the frame
/// has no usable two-class split.
///
/// Otsu's cold class gives the region. Within [`BASIS_EDGE_BAND`] pixels of
/// the class boundary the weight is solved pixel by pixel as
/// `(warm - v) / (warm - cold)`, where `warm` and `cold` are planes fit to
/// nearby off-band pixels of each class. A global plane-minus-contrast fit is
/// the fallback when a side has too few pixels. A thresholded edge alone sits
/// off the true edge wherever the background slopes, which would
/// reintroduce the bias the basis is meant to remove.
fn cooled_region(frame0: &ThermalFrame) -> Option<ThermalFrame> {
    let (w, h) = (frame0.width(), frame0.height());
    let values: Vec<f64> = frame0.temps().iter().map(|&t| t as f64).collect();
    let thr = otsu_threshold(&values)?;
    let cold: Vec<bool> = values.iter().map(|&v| v <= thr).collect();
    let share = cold.iter().filter(|c| **c).count() as f64 / cold.len() as f64;
    if !(0.005..=0.75).contains(&share) {
        return None;
    }
    // least squares for v ≈ a + b·x + c·y - e·cold, coordinates scaled to [0, 1]
    let mut ata = nalgebra::Matrix4::<f64>::zeros();
    let mut atb = nalgebra::Vector4::<f64>::zeros();
    let row = |k: usize| {
        let (x, y) = (((k % w) as f64 + 0.5) / w as f64, ((k / w) as f64 + 0.5) / h as f64);
        nalgebra::Vector4::new(1.0, x, y, if cold[k] { -1.0 } else { 0.0 })
    };
    for (k, &v) in values.iter().enumerate() {
        let r = row(k);
        ata += r * r.transpose();
        atb += r * v;
    }
    let coef = ata.cholesky()?.solve(&atb);
    let e = coef[3];
    if !(e > 0.0) {
        return None;
    }
    let band = BASIS_EDGE_BAND as isize;
    let near_edge = |i: usize, j: usize| {
        let c = cold[i * w + j];
        (-band..=band).any(|di| {
            (-band..=band).any(|dj| {
                let (r, q) = (i as isize + di, j as isize + dj);
                r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < w && cold[r as usize * w + q as usize] != c
            })
        })
    };
    let band_mask: Vec<bool> = (0..w * h).map(|k| near_edge(k / w, k % w)).collect();
    // plane through one class's off-band pixels around (i, j), evaluated at (i, j)
    let local_level = |i: usize, j: usize, want_cold: bool| -> Option<f64> {
        let r = BASIS_LOCAL_RADIUS as isize;
        let mut ata = nalgebra::Matrix3::<f64>::zeros();
        let mut atb = nalgebra::Vector3::<f64>::zeros();
        let mut n = 0;
        for di in -r..=r {
            for dj in -r..=r {
                let (y, x) = (i as isize + di, j as isize + dj);
                if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
                    continue;
                }
                let k = y as usize * w + x as usize;
                if band_mask[k] || cold[k] != want_cold {
                    continue;
                }
                let a = nalgebra::Vector3::new(1.0, dj as f64, di as f64);
                ata += a * a.transpose();
                atb += a * values[k];
                n += 1;
            }
        }
        if n < 8 {
            return None;
        }
        ata.try_inverse().map(|inv| (inv * atb)[0])
    };
    let weights: Vec<f32> = (0..w * h)
        .map(|k| {
            let (i, j) = (k / w, k % w);
            if band_mask[k] {
                let local = local_level(i, j, false).zip(local_level(i, j, true));
                let (warm, depth) = match local {
                    Some((hot, cool)) if hot - cool > 0.25 * e => (hot, hot - cool),
                    _ => {
                        let r = row(k);
                        (coef[0] + coef[1] * r[1] + coef[2] * r[2], e)
                    }
                };
                ((warm - values[k]) / depth).clamp(0.0, 1.0) as f32
            } else if cold[k] {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    ThermalFrame::new(w, h, frame0.timestamp(), weights).ok()
}

/// Half-width, pixels, of the band around the cold-region boundary where the
/// basis weight is solved rather than thresholded.
pub const BASIS_EDGE_BAND: usize = 2;

/// Radius of the window whose off-band pixels give the local warm and cold
/// levels at a band pixel. Local planes follow background structure that a
/// single global plane misses, which would shift the solved edge.
const BASIS_LOCAL_RADIUS: usize = 6;

/// Aligns every video frame and the precool image to video frame 0.
///
/// Each video frame is registered against the most recent keyframe, and the
/// keyframe's own warp is chained on. Frame 0 is the first keyframe and every
/// `keyframe_interval`-th frame becomes the next one. Short hops keep the
/// scene nearly unchanged between reference and moving frame while the
/// cooled region recovers; few hops keep the chained error small. A frame's
/// `rho` is its correlation with its keyframe. The precool image is
/// registered against the last, most recovered frame and that frame's warp
/// is chained on.
///
/// With `cooling_basis`, the cold region of frame 0 (carried into each
/// reference's coordinates by its warp) is projected out of every
/// correlation, so the fading contrast of the cooled disk does not drag the
/// warps. Rotation and affine terms go through [`align_nested`]: the cooled
/// disk is nearly rotation symmetric, and unearned rotation compounds along
/// the chain.
pub fn stabilize_sequence(seq: &ThermalSequence, config: &StabilizeConfig) -> Result<Stabilization, RegistrationError> {
    let frames = seq.frames();
    if frames.len() < 2 {
        return Err(RegistrationError::TooFewFrames);
    }
    let interval = config.keyframe_interval.max(1);
    let tag = |index: i64| move |e: RegistrationError| RegistrationError::Frame { index, source: Box::new(e) };
    let cold = if config.cooling_basis { cooled_region(&frames[0]) } else { None };
    // `warp` maps frame-0 coordinates into the reference frame
    let prepare = |frame: &ThermalFrame, warp: &WarpModel| -> Result<EccReference, RegistrationError> {
        match &cold {
            None => EccReference::new(frame, &config.ecc),
            Some(c) => {
                let mapped = resample(c, &warp.inverse()?);
                let basis: Vec<f64> = mapped.temps.iter().zip(&mapped.valid).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect();
                EccReference::with_basis(frame, &basis, &config.ecc)
            }
        }
    };
    let mut warps = Vec::with_capacity(frames.len());
    warps.push(WarpModel { rho: 1.0, converged: true, rho_log: vec![1.0], ..WarpModel::identity(config.frame_kind) });
    let mut key = (0, prepare(&frames[0], &warps[0]).map_err(tag(0))?);
    for k in 1..frames.len() {
        let step = align_nested(&key.1, &frames[k], config.frame_kind, &config.ecc).map_err(tag(k as i64))?;
        let chained = step.compose(&warps[key.0]).as_kind(config.frame_kind);
        warps.push(WarpModel { rho: step.rho, iterations: step.iterations, converged: step.converged, rho_log: step.rho_log, ..chained });
        if k % interval == 0 && k + 1 < frames.len() {
            key = (k, prepare(&frames[k], &warps[k]).map_err(tag(k as i64))?);
        }
    }
    // The last frame is the most recovered, so it looks most like the precool image.
    let last = frames.len() - 1;
    let reference = prepare(&frames[last], &warps[last]).map_err(tag(-1))?;
    let step = align_nested(&reference, seq.precool(), config.precool_kind, &config.ecc).map_err(tag(-1))?;
    let chained = step.compose(&warps[last]).as_kind(config.precool_kind);
    let precool = WarpModel { rho: step.rho, iterations: step.iterations, converged: step.converged, rho_log: step.rho_log, ..chained };
    Ok(Stabilization { precool, frames: warps })
}

/// The sequence resampled into frame-0 coordinates.
#[derive(Debug, Clone)]
pub struct AlignedSequence {
    pub precool: AlignedFrame,
    pub frames: Vec<AlignedFrame>,
}

impl AlignedSequence {
    pub fn new(seq: &ThermalSequence, stab: &Stabilization) -> Self {
        use rayon::prelude::*;
        assert_eq!(seq.frames().len(), stab.frames.len(), "one warp per frame");
        let frames = seq.frames().par_iter().zip(&stab.frames).map(|(f, w)| resample(f, w)).collect();
        Self { precool: resample(seq.precool(), &stab.precool), frames }
    }

    /// An already-registered sequence (every warp is the identity).
    pub fn unwarped(seq: &ThermalSequence) -> Self {
        Self {
            precool: AlignedFrame::from_frame(seq.precool()),
            frames: seq.frames().iter().map(AlignedFrame::from_frame).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.precool.width
    }

    pub fn height(&self) -> usize {
        self.precool.height
    }

    /// Video frame whose timestamp equals `t` seconds.
    pub fn frame_at(&self, t: f64) -> Option<&AlignedFrame> {
        self.frames.iter().find(|f| (f.timestamp - t).abs() < 1e-9)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_case, PhantomSpec};

    fn smooth(w: usize, h: usize) -> ThermalFrame {
        ThermalFrame::from_fn(w, h, 0.0, |x, y| {
            30.0 + 2.0 * (-((x - 0.45 * w as f64).powi(2) + (y - 0.5 * h as f64).powi(2)) / 200.0).exp()
                + 0.8 * (x / 9.0).sin() * (y / 13.0).cos()
                + 0.01 * x
        })
        .unwrap()
    }

    fn as_frame(a: &AlignedFrame, fill: f64) -> ThermalFrame {
        let temps = a.temps.iter().zip(&a.valid).map(|(t, v)| if *v { *t as f32 } else { fill as f32 }).collect();
        ThermalFrame::new(a.width, a.height, a.timestamp, temps).unwrap()
    }

    #[test]
    fn self_alignment_is_identity() {
        let f = smooth(64, 48);
        for kind in [WarpKind::Translation, WarpKind::Euclidean, WarpKind::Affine] {
            let w = ecc_align(&f, &f, kind, &EccConfig::default()).unwrap();
            assert!((w.rho - 1.0).abs() <= 1e-9, "{kind:?} rho {}", w.rho);
            assert!(w.converged);
            let id = WarpModel::identity(kind);
            for (a, b) in w.params.iter().zip(&id.params) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn recovers_known_shift() {
        let f = smooth(96, 80);
        let truth = WarpModel::translation(3.0, -2.0);
        let moving = as_frame(&resample(&f, &truth), 30.0);
        let mut cfg = EccConfig::default();
        // exclude the border band left invalid by the synthetic shift
        cfg.mask = Some(RoiMask::from_fn(96, 80, |x, y| x > 6.0 && x < 88.0 && y > 6.0 && y < 72.0));
        let w = ecc_align(&f, &moving, WarpKind::Translation, &cfg).unwrap();
        let inv = truth.inverse().unwrap();
        let (tx, ty) = w.translation_part();
        let (ex, ey) = inv.translation_part();
        assert!((tx - ex).abs() < 0.1 && (ty - ey).abs() < 0.1, "{tx} {ty}");
        assert!(w.rho > 0.999);
    }

    #[test]
    fn flat_images_rejected() {
        let c = ThermalFrame::constant(32, 32, 0.0, 30.0).unwrap();
        assert!(matches!(ecc_align(&c, &c, WarpKind::Affine, &EccConfig::default()), Err(RegistrationError::FlatImage(_))));
        let f = smooth(32, 32);
        assert!(matches!(
            ecc_align(&f, &c, WarpKind::Translation, &EccConfig::default()),
            Err(RegistrationError::FlatImage("moving"))
        ));
    }

    #[test]
    fn point_warps() {
        let id = WarpModel::identity(WarpKind::Affine);
        assert_eq!(id.apply((10.0, 20.0)), (10.0, 20.0));
        let t = WarpModel::translation(3.0, -2.0);
        assert_eq!(t.apply((0.0, 0.0)), (3.0, -2.0));
        let singular = WarpModel::affine([1.0, 2.0, 0.0, 2.0, 4.0, 0.0]);
        assert!(matches!(singular.inverse(), Err(RegistrationError::NonInvertibleWarp(_))));
    }

    #[test]
    fn resample_identity_and_unit_shift() {
        let f = smooth(20, 10);
        let same = resample(&f, &WarpModel::identity(WarpKind::Euclidean));
        assert!(same.valid.iter().all(|v| *v));
        for (a, b) in same.temps.iter().zip(f.temps()) {
            assert_eq!(a.to_bits(), (*b as f64).to_bits());
        }
        let shifted = resample(&f, &WarpModel::translation(1.0, 0.0));
        for i in 0..10 {
            for j in 0..19 {
                assert_eq!(shifted.at(i, j), Some(f.at(i, j + 1) as f64));
            }
            assert_eq!(shifted.at(i, 19), None);
        }
    }

    #[test]
    fn resample_half_pixel_ramp() {
        let f = ThermalFrame::from_fn(16, 12, 0.0, |x, y| 20.0 + 0.5 * x + 0.25 * y).unwrap();
        let out = resample(&f, &WarpModel::translation(0.5, 0.5));
        for i in 0..11 {
            for j in 0..15 {
                let expect = 20.0 + 0.5 * (j as f64 + 1.0) + 0.25 * (i as f64 + 1.0);
                let got = out.at(i, j).unwrap();
                // source temperatures carry f32 rounding
                assert!((got - expect).abs() < 1e-5, "{got} vs {expect}");
                let exact = 0.25 * (f.at(i, j) as f64 + f.at(i, j + 1) as f64 + f.at(i + 1, j) as f64 + f.at(i + 1, j + 1) as f64);
                assert!((got - exact).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rho_log_is_monotone_and_kinds_hold_shape() {
        let spec = PhantomSpec::small(96, 72, 4).noise_free();
        let case = generate_case(&spec, "c", "p").unwrap();
        let frames = case.sequence.frames();
        let w = ecc_align(&frames[0], &frames[30], WarpKind::Euclidean, &EccConfig::default()).unwrap();
        assert!(w.rho_log.windows(2).all(|p| p[1] >= p[0]));
        let m = w.matrix();
        assert!((m[0] * m[4] - m[1] * m[3] - 1.0).abs() < 1e-12);
        assert!(w.iterations <= 100);
    }

    #[test]
    fn stabilize_two_identical_frames() {
        let f = smooth(40, 40);
        let seq = ThermalSequence::new(f.clone().with_timestamp(-10.0), vec![f.clone(), f.clone().with_timestamp(1.0)], 1.0).unwrap();
        let s = stabilize_sequence(&seq, &StabilizeConfig::default()).unwrap();
        assert_eq!(s.frames.len(), 2);
        for w in s.frames.iter().chain([&s.precool]) {
            assert!((w.rho - 1.0).abs() < 1e-9);
            let m = w.matrix();
            let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
            assert!(m.iter().zip(id).all(|(a, b)| (a - b).abs() < 1e-9));
        }
        assert!(!s.review_required());
        let back = Stabilization::from_jsonl(&s.to_jsonl()).unwrap();
        assert_eq!(back.frames.len(), 2);
        assert_eq!(back.precool.matrix(), s.precool.matrix());
    }

    #[test]
    fn single_frame_sequence_refused() {
        let f = smooth(40, 40);
        let seq = ThermalSequence::new(f.clone().with_timestamp(-1.0), vec![f], 1.0).unwrap();
        assert!(matches!(stabilize_sequence(&seq, &StabilizeConfig::default()), Err(RegistrationError::TooFewFrames)));
    }
}
