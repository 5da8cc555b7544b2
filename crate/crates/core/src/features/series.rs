//! Region time series and the temporal feature family.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{window_mask, FeatureBlock, FeatureError, Family};
use crate::io::{RoiMask, DECIMATED_SAMPLES};
use crate::registration::{AlignedFrame, AlignedSequence};

/// DFT length for the spectral features (zero-padded).
pub const SPECTRUM_LEN: usize = 128;
pub const TEMPORAL_NAMES: [&str; 7] = [
    "auc",
    "slope",
    "skewness",
    "kurtosis",
    "spectral_centroid",
    "spectral_slope",
    "dominant_frequency",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Roi,
    Win20,
    Win40,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Roi, Region::Win20, Region::Win40];

    pub fn name(self) -> &'static str {
        match self {
            Region::Roi => "roi",
            Region::Win20 => "win20",
            Region::Win40 => "win40",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    Mean,
    Std,
}

impl Signal {
    pub fn name(self) -> &'static str {
        match self {
            Signal::Mean => "mean",
            Signal::Std => "std",
        }
    }
}

/// One statistic of one region sampled once per second over `t = 0..=120`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSeries {
    pub region: Region,
    pub signal: Signal,
    pub samples: Vec<f64>,
}

/// Mean and population standard deviation, independent of value order.
///
/// Values are sorted before summing so any permutation gives identical bits.
pub(crate) fn mean_std(values: &mut [f64]) -> (f64, f64) {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub(crate) fn gather(frame: &AlignedFrame, pixels: &[usize], out: &mut Vec<f64>) {
    out.clear();
    out.extend(pixels.iter().filter(|&&k| frame.valid[k]).map(|&k| frame.temps[k]));
}

/// The per-second frames `t = 0, 1, ..., 120`.
pub(crate) fn second_frames(aligned: &AlignedSequence) -> Result<Vec<&AlignedFrame>, FeatureError> {
    (0..DECIMATED_SAMPLES)
        .map(|k| aligned.frame_at(k as f64).ok_or(FeatureError::MissingFrame(k as f64)))
        .collect()
}

/// Six series in `(region, signal)` order: roi, win20, win40 × mean, std.
///
/// Windows are centered on `point` (frame-0 coordinates), clipped to the frame
/// and intersected with the mask.
pub fn extract_region_series(
    aligned: &AlignedSequence,
    mask: &RoiMask,
    point: (f64, f64),
) -> Result<Vec<RegionSeries>, FeatureError> {
    let (w, h) = (aligned.width(), aligned.height());
    if mask.width() != w || mask.height() != h {
        return Err(FeatureError::DimensionMismatch);
    }
    let frames = second_frames(aligned)?;
    let regions = [
        mask.clone(),
        mask.and(&window_mask(w, h, point, 20.0)),
        mask.and(&window_mask(w, h, point, 40.0)),
    ];
    let mut out = Vec::with_capacity(6);
    let mut buf = Vec::new();
    for (region, m) in Region::ALL.into_iter().zip(&regions) {
        let pixels: Vec<usize> = (0..w * h).filter(|&k| m.bits()[k]).collect();
        let (mut means, mut stds) = (Vec::with_capacity(frames.len()), Vec::with_capacity(frames.len()));
        for f in &frames {
            gather(f, &pixels, &mut buf);
            if buf.is_empty() {
                return Err(FeatureError::EmptyRegion { region: region.name().into(), t: f.timestamp });
            }
            let (m, s) = mean_std(&mut buf);
            means.push(m);
            stds.push(s);
        }
        out.push(RegionSeries { region, signal: Signal::Mean, samples: means });
        out.push(RegionSeries { region, signal: Signal::Std, samples: stds });
    }
    Ok(out)
}

/// Skewness and excess kurtosis with the zero-variance rule (both 0).
fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in x {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    // rounding noise on a constant series must not become a moment
    let floor = 1e-12 * mean.abs().max(1.0);
    if m2.sqrt() <= floor {
        return (0.0, 0.0);
    }
    (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
}

fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// One-sided power spectrum of the mean-removed series, bins `1..=64`
/// with frequencies `k / 128` Hz.
pub fn power_spectrum(samples: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    buf.resize(SPECTRUM_LEN.max(samples.len()), Complex::new(0.0, 0.0));
    let len = buf.len();
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    let half = len / 2;
    let freqs = (1..=half).map(|k| k as f64 / len as f64).collect();
    let power = buf[1..=half].iter().map(|c| c.norm_sqr()).collect();
    (freqs, power)
}

/// The seven temporal features of one series sampled at 1 Hz from `t = 0`.
pub fn series_features(samples: &[f64]) -> [f64; 7] {
    let t: Vec<f64> = (0..samples.len()).map(|k| k as f64).collect();
    let auc: f64 = samples.windows(2).map(|p| 0.5 * (p[0] + p[1])).sum();
    let slope = ls_slope(&t, samples);
    let (skew, kurt) = moments(samples);
    let (freqs, power) = power_spectrum(samples);
    let total: f64 = power.iter().sum();
    let (centroid, spectral_slope, dominant) = if total > 0.0 {
        let centroid = freqs.iter().zip(&power).map(|(f, p)| f * p).sum::<f64>() / total;
        let logp: Vec<f64> = power.iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect();
        let mut best = 0;
        for k in 1..power.len() {
            if power[k] > power[best] {
                best = k;
            }
        }
        (centroid, ls_slope(&freqs, &logp), freqs[best])
    } else {
        (0.0, 0.0, 0.0)
    };
    [auc, slope, skew, kurt, centroid, spectral_slope, dominant]
}

/// 6 series × 7 features.
pub fn temporal_features(series: &[RegionSeries]) -> Result<FeatureBlock, FeatureError> {
    if series.len() != 6 {
        return Err(FeatureError::WrongLength { family: Family::Temporal, expected: 6, got: series.len() });
    }
    let mut names = Vec::with_capacity(42);
    let mut values = Vec::with_capacity(42);
    for s in series {
        if s.samples.len() != DECIMATED_SAMPLES {
            return Err(FeatureError::WrongLength {
                family: Family::Temporal,
                expected: DECIMATED_SAMPLES,
                got: s.samples.len(),
            });
        }
        for (name, v) in TEMPORAL_NAMES.iter().zip(series_features(&s.samples)) {
            names.push(format!("temporal.{}.{}.{name}", s.region.name(), s.signal.name()));
            values.push(v);
        }
    }
    FeatureBlock::new(Family::Temporal, names, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn constant_series() {
        let f = series_features(&[30.0; 121]);
        assert_eq!(f, [3600.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_series() {
        let x: Vec<f64> = (0..121).map(|t| 30.0 + 0.01 * t as f64).collect();
        let f = series_features(&x);
        assert!(close(f[0], 3600.0 + 0.01 * 7200.0, 1e-9));
        assert!(close(f[1], 0.01, 1e-12));
        assert!(close(f[2], 0.0, 1e-9), "skew {}", f[2]);
        // uniform distribution: excess kurtosis -6/5 (n/(n^2-1) finite correction aside)
        assert!(close(f[3], -1.2, 1e-3), "kurt {}", f[3]);
    }

    fn direct_dft_power(x: &[f64], n: usize) -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        (1..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, v) in x.iter().enumerate() {
                    let a = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                    re += (v - mean) * a.cos();
                    im += (v - mean) * a.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn spectrum_matches_direct_dft() {
        let x: Vec<f64> = (0..121).map(|t| ((t * 37 % 11) as f64).sin() + 0.2 * t as f64).collect();
        let (_, p) = power_spectrum(&x);
        let oracle = direct_dft_power(&x, 128);
        for (a, b) in p.iter().zip(&oracle) {
            assert!(close(*a, *b, 1e-8 * b.max(1.0)));
        }
    }

    #[test]
    fn sinusoid_at_tenth_hz() {
        let x: Vec<f64> = (0..121).map(|t| 30.0 + (2.0 * std::f64::consts::PI * 0.1 * t as f64).sin()).collect();
        let f = series_features(&x);
        let oracle = direct_dft_power(&x, 128);
        let best = (0..oracle.len()).max_by(|&a, &b| oracle[a].total_cmp(&oracle[b])).unwrap();
        let bin = (best + 1) as f64 / 128.0;
        assert_eq!(f[6], bin);
        assert!((bin - 0.1).abs() <= 0.5 / 128.0);
        assert!((f[4] - 0.1).abs() <= 1.0 / 128.0, "centroid {}", f[4]);
    }

    #[test]
    fn mean_std_is_order_free() {
        let mut a: Vec<f64> = (0..500).map(|k| 30.0 + ((k * 7919) % 113) as f64 * 0.013).collect();
        let mut b = a.clone();
        b.reverse();
        b.rotate_left(17);
        assert_eq!(mean_std(&mut a), mean_std(&mut b));
    }
}
