//! Synthetic localized-cooling thermal cases with known ground truth.
//!
//! The temperature field is Newtonian recovery of an alcohol-cooled disk on a
//! smooth skin background:
//!
//! ```text
//! T(x, y, t) = base(x, y)
//!            - ΔT · w_disk · ((1 - w_nod) · exp(-t / τ_s) + w_nod · exp(-t / τ_n))
//!            + δ · w_nod · viable · (1 - exp(-t / τ_n))
//! ```
//!
//! where `w_disk` and `w_nod` are the disk and nodule indicators with a
//! logistic edge about a pixel wide, and `τ_n = τ_s` for a nonviable nodule.
//! The pre-cooling image is `base + δ · w_nod · viable`. Each frame is then displaced by a
//! per-frame jitter (the scene moves by `(dx, dy)` in the image) and sensor
//! noise is added. Frame 0 is never jittered, so it defines the reference
//! coordinates of the truth mask.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::{self, CaseError, CaseRecord, Label, NoduleAnnotation, Provenance, RoiMask, ThermalFrame, ThermalSequence};

/// Truth sidecar file name; never read by the pipeline itself.
pub const TRUTH_FILE: &str = "truth.json";
pub const TRUTH_MASK_FILE: &str = "truth_mask.pgm";
/// Dataset manifest written by [`generate_study`].
pub const STUDY_FILE: &str = "dataset.json";

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Case(#[from] CaseError),
}

/// A smooth Gaussian bump of the skin background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: [f64; 2],
    pub sigma: f64,
    pub amplitude: f64,
}

impl Bump {
    /// One axis of the Gaussian; the bump is the product of both axes.
    fn factor(&self, d: f64) -> f64 {
        (-(d * d) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    /// Mean skin temperature, °C.
    pub skin_base: f64,
    /// Linear skin gradient across the full frame width / height, °C.
    pub gradient: [f64; 2],
    pub bumps: Vec<Bump>,
    pub disk_center: [f64; 2],
    pub disk_radius: f64,
    /// Cooling depth ΔT at t = 0, °C.
    pub cooling_depth: f64,
    /// Skin recovery time constant τ_s, s.
    pub tau_skin: f64,
    pub nodule_center: [f64; 2],
    pub nodule_radius: f64,
    pub viable: bool,
    /// Equilibrium offset δ of a viable nodule, °C.
    pub nodule_offset: f64,
    /// Recovery time constant τ_n of a viable nodule, s.
    pub tau_nodule: f64,
    /// Sensor noise standard deviation, °C.
    pub noise_sigma: f64,
    /// Per-frame jitter is uniform in `[-a, a]²` pixels.
    pub jitter_amplitude: f64,
    pub precool_time: f64,
    pub duration: f64,
    pub frame_rate: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

impl PhantomSpec {
    /// Default 320×240 viable spec; background bumps drawn from `seed`.
    pub fn with_seed(seed: u64) -> Self {
        let (width, height) = (320, 240);
        let mut spec = Self {
            width,
            height,
            skin_base: 33.0,
            gradient: [0.6, 0.3],
            bumps: Vec::new(),
            disk_center: [160.0, 120.0],
            disk_radius: 60.0,
            cooling_depth: 2.0,
            tau_skin: 45.0,
            nodule_center: [172.0, 112.0],
            nodule_radius: 8.0,
            viable: true,
            nodule_offset: 0.4,
            tau_nodule: 20.0,
            noise_sigma: 0.04,
            jitter_amplitude: 2.0,
            precool_time: -60.0,
            duration: 120.0,
            frame_rate: 1.0,
            seed,
        };
        spec.reseed_bumps(6, 0.3);
        spec
    }

    /// Scaled-down spec (geometry proportional to the default) for fast tests.
    pub fn small(width: usize, height: usize, seed: u64) -> Self {
        let mut s = Self::with_seed(seed);
        let k = width as f64 / 320.0;
        s.width = width;
        s.height = height;
        s.disk_center = [width as f64 / 2.0, height as f64 / 2.0];
        s.disk_radius = 60.0 * k;
        s.nodule_center = [s.disk_center[0] + 12.0 * k, s.disk_center[1] - 8.0 * k];
        s.nodule_radius = (8.0 * k).max(2.5);
        s.reseed_bumps(6, 0.3);
        s
    }

    /// Replaces the background bumps with `n` bumps drawn from `self.seed`.
    pub fn reseed_bumps(&mut self, n: usize, amplitude: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xB0B5);
        let scale = self.width.min(self.height) as f64;
        self.bumps = (0..n)
            .map(|_| Bump {
                center: [rng.random_range(0.0..self.width as f64), rng.random_range(0.0..self.height as f64)],
                sigma: rng.random_range(0.05..0.15) * scale,
                amplitude: rng.random_range(-amplitude..amplitude),
            })
            .collect();
    }

    pub fn nonviable(mut self) -> Self {
        self.viable = false;
        self
    }

    pub fn noise_free(mut self) -> Self {
        self.noise_sigma = 0.0;
        self
    }

    pub fn without_jitter(mut self) -> Self {
        self.jitter_amplitude = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: &str| Err(PhantomError::InvalidSpec(m.to_string()));
        if self.width < 8 || self.height < 8 {
            return bad("frame smaller than 8x8");
        }
        let positive = [
            self.skin_base,
            self.disk_radius,
            self.cooling_depth,
            self.tau_skin,
            self.nodule_radius,
            self.tau_nodule,
            self.duration,
            self.frame_rate,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("all physical constants must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.jitter_amplitude >= 0.0 && self.nodule_offset >= 0.0) {
            return bad("noise, jitter and nodule offset must be non-negative");
        }
        if self.tau_nodule > self.tau_skin {
            return bad("nodule recovery must not be slower than skin recovery");
        }
        if !(self.precool_time < 0.0) {
            return bad("precool image must precede cooling");
        }
        if self.duration > io::MAX_VIDEO_SECONDS {
            return bad("video longer than 125 s");
        }
        let d = dist(self.nodule_center, self.disk_center);
        if d + self.nodule_radius > self.disk_radius {
            return bad("nodule must lie inside the cooled disk");
        }
        Ok(())
    }

    fn effective(&self) -> (f64, f64) {
        if self.viable {
            (self.nodule_offset, self.tau_nodule)
        } else {
            (0.0, self.tau_skin)
        }
    }

    pub fn in_disk(&self, x: f64, y: f64) -> bool {
        dist([x, y], self.disk_center) <= self.disk_radius
    }

    pub fn in_nodule(&self, x: f64, y: f64) -> bool {
        dist([x, y], self.nodule_center) <= self.nodule_radius
    }

    /// Skin background without cooling or nodule.
    pub fn base(&self, x: f64, y: f64) -> f64 {
        let mut v = self.ramp(x, y);
        for b in &self.bumps {
            v += b.amplitude * b.factor(x - b.center[0]) * b.factor(y - b.center[1]);
        }
        v
    }

    fn ramp(&self, x: f64, y: f64) -> f64 {
        self.skin_base + self.gradient[0] * (x / self.width as f64 - 0.5) + self.gradient[1] * (y / self.height as f64 - 0.5)
    }

    /// Membership weight of the cooled disk: a logistic edge of scale
    /// [`EDGE_SCALE`] crossing 1/2 exactly at the radius.
    pub fn disk_weight(&self, x: f64, y: f64) -> f64 {
        soft_edge(self.disk_radius - dist([x, y], self.disk_center))
    }

    pub fn nodule_weight(&self, x: f64, y: f64) -> f64 {
        soft_edge(self.nodule_radius - dist([x, y], self.nodule_center))
    }

    fn time_terms(&self, t: f64) -> TimeTerms {
        let (offset, tau_n) = self.effective();
        TimeTerms { precool: t < 0.0, es: (-t / self.tau_skin).exp(), en: (-t / tau_n).exp(), offset }
    }

    fn compose(&self, x: f64, y: f64, base: f64, tt: &TimeTerms) -> f64 {
        let wn = self.nodule_weight(x, y);
        if tt.precool {
            return base + tt.offset * wn;
        }
        base - self.cooling_depth * self.disk_weight(x, y) * ((1.0 - wn) * tt.es + wn * tt.en) + tt.offset * wn * (1.0 - tt.en)
    }

    /// Noise-free, jitter-free temperature at scene point `(x, y)` and time `t`
    /// (`t < 0` gives the pre-cooling field).
    pub fn temperature(&self, x: f64, y: f64, t: f64) -> f64 {
        self.compose(x, y, self.base(x, y), &self.time_terms(t))
    }

    pub fn frame_times(&self) -> Vec<f64> {
        let n = (self.duration * self.frame_rate).round() as usize;
        (0..=n).map(|k| k as f64 / self.frame_rate).collect()
    }

    pub fn true_mask(&self) -> RoiMask {
        RoiMask::from_fn(self.width, self.height, |x, y| self.in_disk(x, y))
    }

    pub fn nodule_mask(&self) -> RoiMask {
        RoiMask::from_fn(self.width, self.height, |x, y| self.in_nodule(x, y))
    }
}

/// Width scale of the disk and nodule edges, pixels. Heat diffusion keeps a
/// real cooled boundary from being a step; a sampled step would also bias
/// sub-pixel registration.
pub const EDGE_SCALE: f64 = 0.5;

struct TimeTerms {
    precool: bool,
    es: f64,
    en: f64,
    offset: f64,
}

fn soft_edge(inside: f64) -> f64 {
    // saturated to the last bit well before 40 scale lengths
    let z = inside / EDGE_SCALE;
    if z > 40.0 {
        1.0
    } else if z < -40.0 {
        0.0
    } else {
        1.0 / (1.0 + (-z).exp())
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Jitter actually applied to one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub t: f64,
    pub dx: f64,
    pub dy: f64,
}

/// Hidden ground truth for a generated case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub true_mask: String,
    /// Precool first, then one entry per video frame.
    pub jitter: Vec<Jitter>,
    pub spec: PhantomSpec,
}

pub struct PhantomCase {
    pub record: CaseRecord,
    pub sequence: ThermalSequence,
    pub truth: PhantomTruth,
    pub mask: RoiMask,
}

/// One frame of [`PhantomSpec::temperature`] with the scene displaced by
/// `jitter`. Bump factors are separable, so they are tabulated per row and
/// column with the same arithmetic as the closed form.
fn render(spec: &PhantomSpec, t: f64, jitter: (f64, f64), noise: &mut impl FnMut() -> f64) -> Result<ThermalFrame, CaseError> {
    let tt = spec.time_terms(t);
    let xs: Vec<f64> = (0..spec.width).map(|j| j as f64 + 0.5 - jitter.0).collect();
    let ys: Vec<f64> = (0..spec.height).map(|i| i as f64 + 0.5 - jitter.1).collect();
    let cols: Vec<Vec<f64>> = spec.bumps.iter().map(|b| xs.iter().map(|x| b.factor(x - b.center[0])).collect()).collect();
    let rows: Vec<Vec<f64>> = spec.bumps.iter().map(|b| ys.iter().map(|y| b.factor(y - b.center[1])).collect()).collect();
    let mut temps = Vec::with_capacity(spec.width * spec.height);
    for (i, &y) in ys.iter().enumerate() {
        for (j, &x) in xs.iter().enumerate() {
            let mut base = spec.ramp(x, y);
            for (k, b) in spec.bumps.iter().enumerate() {
                base += b.amplitude * cols[k][j] * rows[k][i];
            }
            temps.push((spec.compose(x, y, base, &tt) + noise()) as f32);
        }
    }
    ThermalFrame::new(spec.width, spec.height, t, temps)
}

/// Generates one case. Deterministic in `spec` (including its seed).
pub fn generate_case(spec: &PhantomSpec, case_id: &str, participant_id: &str) -> Result<PhantomCase, PhantomError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let times = spec.frame_times();
    let a = spec.jitter_amplitude;
    let draw_jitter = |rng: &mut ChaCha8Rng| {
        if a > 0.0 {
            (rng.random_range(-a..=a), rng.random_range(-a..=a))
        } else {
            (0.0, 0.0)
        }
    };
    let mut jitter = Vec::with_capacity(times.len() + 1);
    let pj = draw_jitter(&mut rng);
    jitter.push(Jitter { t: spec.precool_time, dx: pj.0, dy: pj.1 });
    for (k, &t) in times.iter().enumerate() {
        let j = if k == 0 { (0.0, 0.0) } else { draw_jitter(&mut rng) };
        jitter.push(Jitter { t, dx: j.0, dy: j.1 });
    }

    let normal = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| PhantomError::InvalidSpec(e.to_string()))?;
    let sigma = spec.noise_sigma;
    let mut noise = || if sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };

    let precool = render(spec, spec.precool_time, (jitter[0].dx, jitter[0].dy), &mut noise)?;
    let mut frames = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let j = jitter[k + 1];
        frames.push(render(spec, t, (j.dx, j.dy), &mut noise)?);
    }
    let sequence = ThermalSequence::new(precool, frames, spec.frame_rate)?;
    let record = CaseRecord {
        case_id: case_id.to_string(),
        participant_id: participant_id.to_string(),
        sequence_path: io::PAYLOAD_FILE.to_string(),
        annotations: vec![NoduleAnnotation::point(
            "n1",
            spec.nodule_center[0] + jitter[0].dx,
            spec.nodule_center[1] + jitter[0].dy,
        )],
        label: if spec.viable { Label::Viable } else { Label::Nonviable },
        provenance: Provenance::Phantom,
    };
    record.validate(spec.width, spec.height)?;
    let truth = PhantomTruth { true_mask: TRUTH_MASK_FILE.to_string(), jitter, spec: spec.clone() };
    Ok(PhantomCase { record, sequence, truth, mask: spec.true_mask() })
}

impl PhantomCase {
    /// Writes the case plus `truth.json` and the truth mask into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), PhantomError> {
        io::write_case(&self.record, &self.sequence, dir)?;
        self.mask.save_pgm(&dir.join(TRUTH_MASK_FILE))?;
        let json = serde_json::to_vec_pretty(&self.truth).map_err(CaseError::from)?;
        fs::write(dir.join(TRUTH_FILE), json).map_err(CaseError::from)?;
        Ok(())
    }
}

pub fn read_truth(dir: &Path) -> Result<PhantomTruth, PhantomError> {
    let bytes = fs::read(dir.join(TRUTH_FILE)).map_err(CaseError::from)?;
    Ok(serde_json::from_slice(&bytes).map_err(CaseError::from)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyEntry {
    pub case_id: String,
    pub participant_id: String,
    pub dir: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyManifest {
    pub seed: u64,
    pub cases: Vec<StudyEntry>,
}

impl StudyManifest {
    pub fn load(root: &Path) -> Result<Self, CaseError> {
        let path = root.join(STUDY_FILE);
        if !path.is_file() {
            return Err(CaseError::MissingManifest(path.display().to_string()));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn case_dir(&self, root: &Path, entry: &StudyEntry) -> PathBuf {
        root.join(&entry.dir)
    }
}

/// Per-case specs of a study: balanced labels (viable count =
/// `round(n · fraction)`), randomized nuisance parameters.
pub fn study_specs(base: &PhantomSpec, n_cases: usize, viable_fraction: f64, seed: u64) -> Result<Vec<PhantomSpec>, PhantomError> {
    if n_cases < 4 {
        return Err(PhantomError::InvalidSpec(format!("study needs at least 4 cases, got {n_cases}")));
    }
    if !(0.0..=1.0).contains(&viable_fraction) {
        return Err(PhantomError::InvalidSpec(format!("viable fraction {viable_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_viable = (n_cases as f64 * viable_fraction).round() as usize;
    let mut labels: Vec<bool> = (0..n_cases).map(|i| i < n_viable).collect();
    // Fisher-Yates with the study RNG
    for i in (1..labels.len()).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    let k = base.width as f64 / 320.0;
    labels
        .into_iter()
        .map(|viable| {
            let mut s = base.clone();
            s.seed = rng.random();
            s.viable = viable;
            s.skin_base = base.skin_base + rng.random_range(-1.0..=1.0);
            s.disk_radius = base.disk_radius * rng.random_range(0.8..=1.2);
            s.disk_center = [
                base.disk_center[0] + rng.random_range(-10.0..=10.0) * k,
                base.disk_center[1] + rng.random_range(-10.0..=10.0) * k,
            ];
            let r = rng.random_range(0.0..=0.4) * s.disk_radius;
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            s.nodule_center = [s.disk_center[0] + r * phi.cos(), s.disk_center[1] + r * phi.sin()];
            s.nodule_offset = if viable { rng.random_range(0.25..=0.6) } else { 0.0 };
            s.reseed_bumps(base.bumps.len().max(1), 0.3);
            s.validate()?;
            Ok(s)
        })
        .collect()
}

/// Generates a labeled study under `out` and writes `dataset.json`.
pub fn generate_study(
    out: &Path,
    base: &PhantomSpec,
    n_cases: usize,
    viable_fraction: f64,
    seed: u64,
) -> Result<StudyManifest, PhantomError> {
    let specs = study_specs(base, n_cases, viable_fraction, seed)?;
    fs::create_dir_all(out).map_err(CaseError::from)?;
    let entries = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let case_id = format!("case{:03}", i + 1);
            let participant_id = format!("p{:03}", i + 1);
            let case = generate_case(spec, &case_id, &participant_id)?;
            case.write(&out.join(&case_id))?;
            Ok(StudyEntry { dir: case_id.clone(), case_id, participant_id, label: case.record.label })
        })
        .collect::<Result<Vec<_>, PhantomError>>()?;
    let manifest = StudyManifest { seed, cases: entries };
    let json = serde_json::to_vec_pretty(&manifest).map_err(CaseError::from)?;
    fs::write(out.join(STUDY_FILE), json).map_err(CaseError::from)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window_mean(frame: &ThermalFrame, cx: f64, cy: f64, half: usize, mask: Option<&RoiMask>) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for i in 0..frame.height() {
            for j in 0..frame.width() {
                let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
                let inside_window = (x - cx).abs() < half as f64 && (y - cy).abs() < half as f64;
                let inside_mask = mask.map_or(true, |m| m.get(i, j));
                if inside_window && inside_mask {
                    s += frame.at(i, j) as f64;
                    n += 1;
                }
            }
        }
        s / n as f64
    }

    #[test]
    fn viable_nodule_is_warmer_at_the_end() {
        let spec = PhantomSpec::with_seed(7);
        let case = generate_case(&spec, "c", "p").unwrap();
        let last = case.sequence.frames().last().unwrap();
        let [cx, cy] = spec.nodule_center;
        let roi = window_mean(last, spec.disk_center[0], spec.disk_center[1], 1000, Some(&case.mask));
        let nodule = window_mean(last, cx, cy, 10, None);
        assert!(nodule - roi >= 0.25, "contrast {}", nodule - roi);
    }

    #[test]
    fn nonviable_noise_free_nodule_is_invisible() {
        let spec = PhantomSpec::small(64, 48, 3).nonviable().noise_free().without_jitter();
        let case = generate_case(&spec, "c", "p").unwrap();
        for f in case.sequence.frames() {
            for i in 0..spec.height {
                for j in 0..spec.width {
                    let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
                    if spec.in_nodule(x, y) {
                        // same law as any other cooled pixel
                        let expect = spec.base(x, y) - spec.cooling_depth * spec.disk_weight(x, y) * (-f.timestamp() / spec.tau_skin).exp();
                        assert!((f.at(i, j) as f64 - expect).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn noise_free_matches_closed_form() {
        let spec = PhantomSpec::small(48, 40, 11).noise_free();
        let case = generate_case(&spec, "c", "p").unwrap();
        let frames = std::iter::once(case.sequence.precool()).chain(case.sequence.frames());
        for (f, j) in frames.zip(&case.truth.jitter) {
            assert_eq!(f.timestamp(), j.t);
            for i in 0..spec.height {
                for c in 0..spec.width {
                    let (x, y) = (c as f64 + 0.5 - j.dx, i as f64 + 0.5 - j.dy);
                    assert_eq!(f.at(i, c), spec.temperature(x, y, j.t) as f32);
                }
            }
        }
    }

    #[test]
    fn measured_noise_matches_sigma() {
        let mut spec = PhantomSpec::small(40, 32, 5).without_jitter();
        spec.bumps.clear();
        spec.gradient = [0.0, 0.0];
        let a = generate_case(&spec, "c", "p").unwrap();
        let clean = generate_case(&spec.clone().noise_free(), "c", "p").unwrap();
        let mut diffs = Vec::new();
        for (f, g) in a.sequence.frames().iter().zip(clean.sequence.frames()) {
            diffs.extend(f.temps().iter().zip(g.temps()).map(|(x, y)| (*x - *y) as f64));
            if diffs.len() >= 1000 {
                break;
            }
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 0.04).abs() < 0.004, "sd {sd}");
    }

    #[test]
    fn recovery_is_monotone() {
        let spec = PhantomSpec::with_seed(1);
        let [cx, cy] = spec.disk_center;
        let (nx, ny) = (spec.nodule_center[0], spec.nodule_center[1]);
        for (x, y) in [(cx - 30.0, cy + 20.0), (nx, ny)] {
            let mut prev = f64::NEG_INFINITY;
            for t in spec.frame_times() {
                let v = spec.temperature(x, y, t);
                assert!(v > prev);
                prev = v;
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let spec = PhantomSpec::small(32, 24, 9);
        let a = generate_case(&spec, "c", "p").unwrap();
        let b = generate_case(&spec, "c", "p").unwrap();
        assert_eq!(a.sequence, b.sequence);
        let mut other = spec.clone();
        other.seed = 10;
        let c = generate_case(&other, "c", "p").unwrap();
        assert_ne!(a.truth.jitter, c.truth.jitter);
        assert_eq!(a.truth.jitter[1].dx, 0.0);
        assert!(a.truth.jitter.iter().all(|j| j.dx.abs() <= 2.0 && j.dy.abs() <= 2.0));
    }

    #[test]
    fn invalid_specs() {
        let mut s = PhantomSpec::default();
        s.nodule_center = [0.0, 0.0];
        assert!(matches!(generate_case(&s, "c", "p"), Err(PhantomError::InvalidSpec(_))));
        let mut s = PhantomSpec::default();
        s.tau_nodule = 60.0;
        assert!(s.validate().is_err());
        let mut s = PhantomSpec::default();
        s.cooling_depth = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn study_label_balance() {
        let base = PhantomSpec::small(32, 24, 0);
        let count = |n, seed| {
            study_specs(&base, n, 0.5, seed).unwrap().iter().filter(|s| s.viable).count()
        };
        assert_eq!(count(60, 1), 30);
        assert!(matches!(count(5, 1), 2 | 3));
        assert!(study_specs(&base, 3, 0.5, 1).is_err());
        let specs = study_specs(&base, 20, 0.5, 4).unwrap();
        for s in &specs {
            if s.viable {
                assert!((0.25..=0.6).contains(&s.nodule_offset));
            }
        }
    }

    #[test]
    fn study_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let base = PhantomSpec::small(32, 24, 0);
        let m = generate_study(dir.path(), &base, 4, 0.5, 2).unwrap();
        let back = StudyManifest::load(dir.path()).unwrap();
        assert_eq!(m, back);
        let e = &back.cases[0];
        let (rec, seq) = io::read_case(&back.case_dir(dir.path(), e)).unwrap();
        assert_eq!(rec.label, e.label);
        assert_eq!(seq.frames().len(), 121);
        let truth = read_truth(&back.case_dir(dir.path(), e)).unwrap();
        assert_eq!(truth.jitter.len(), 122);
        let other = tempfile::tempdir().unwrap();
        let m2 = generate_study(other.path(), &base, 4, 0.5, 3).unwrap();
        let j = |m: &StudyManifest, root: &Path| read_truth(&m.case_dir(root, &m.cases[0])).unwrap().jitter;
        assert_ne!(j(&m, dir.path()), j(&m2, other.path()));
    }
}
