//! First-order temperature statistics at t = 0, 60 and 120 s.

use std::collections::BTreeMap;

use super::series::{gather, mean_std};
use super::{FeatureBlock, FeatureError, Family};
use crate::io::RoiMask;
use crate::registration::AlignedSequence;

pub const FIRST_ORDER_TIMES: [u32; 3] = [0, 60, 120];
pub const STAT_NAMES: [&str; 5] = ["min", "mean", "max", "std", "mode"];
/// Width of the histogram bins used for the mode, °C.
pub const MODE_BIN: f64 = 0.1;

/// Center of the most populated 0.1 °C bin; ties go to the lower bin.
pub fn mode(values: &[f64]) -> f64 {
    let mut hist: BTreeMap<i64, usize> = BTreeMap::new();
    for v in values {
        *hist.entry((v / MODE_BIN).floor() as i64).or_default() += 1;
    }
    let mut best = (i64::MIN, 0);
    for (&k, &c) in &hist {
        if c > best.1 {
            best = (k, c);
        }
    }
    (best.0 as f64 + 0.5) * MODE_BIN
}

/// `[min, mean, max, std, mode]` of a non-empty sample.
pub fn stats(values: &mut [f64]) -> [f64; 5] {
    let (mean, std) = mean_std(values);
    // mean_std leaves the slice sorted
    [values[0], mean, values[values.len() - 1], std, mode(values)]
}

fn sub(a: &[f64; 5], b: &[f64; 5]) -> [f64; 5] {
    std::array::from_fn(|i| a[i] - b[i])
}

/// 18 signals × 5 statistics.
///
/// Signals: roi, nodule and nodule−roi at each time, then the frame-pair
/// differences t60−t0, t120−t60 and t120−t0 of those three.
pub fn first_order(aligned: &AlignedSequence, roi: &RoiMask, nodule: &RoiMask) -> Result<FeatureBlock, FeatureError> {
    let index = |m: &RoiMask| -> Vec<usize> { (0..m.bits().len()).filter(|&k| m.bits()[k]).collect() };
    let (roi_px, nod_px) = (index(roi), index(nodule));
    let mut per_time = Vec::with_capacity(3);
    let mut buf = Vec::new();
    for t in FIRST_ORDER_TIMES {
        let f = aligned.frame_at(t as f64).ok_or(FeatureError::MissingFrame(t as f64))?;
        let mut region_stats = |px: &[usize], name: &str| {
            gather(f, px, &mut buf);
            if buf.is_empty() {
                return Err(FeatureError::EmptyRegion { region: name.into(), t: t as f64 });
            }
            Ok(stats(&mut buf))
        };
        let r = region_stats(&roi_px, "roi")?;
        let n = region_stats(&nod_px, "nodule")?;
        per_time.push([r, n, sub(&n, &r)]);
    }
    const SIGNALS: [&str; 3] = ["roi", "nodule", "nodule_minus_roi"];
    let mut names = Vec::with_capacity(90);
    let mut values = Vec::with_capacity(90);
    let mut push = |prefix: String, s: &[f64; 5]| {
        for (stat, v) in STAT_NAMES.iter().zip(s) {
            names.push(format!("first_order.{prefix}.{stat}"));
            values.push(*v);
        }
    };
    for (t, sig) in FIRST_ORDER_TIMES.iter().zip(&per_time) {
        for (name, s) in SIGNALS.iter().zip(sig) {
            push(format!("t{t}.{name}"), s);
        }
    }
    for (hi, lo) in [(1, 0), (2, 1), (2, 0)] {
        let (th, tl) = (FIRST_ORDER_TIMES[hi], FIRST_ORDER_TIMES[lo]);
        for (k, name) in SIGNALS.iter().enumerate() {
            push(format!("t{th}_minus_t{tl}.{name}"), &sub(&per_time[hi][k], &per_time[lo][k]));
        }
    }
    FeatureBlock::new(Family::FirstOrder, names, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_ties_go_low() {
        assert!((mode(&[30.01, 30.02, 30.15, 30.16]) - 30.05).abs() < 1e-12);
        assert!((mode(&[30.01, 30.15, 30.16]) - 30.15).abs() < 1e-12);
        assert!((mode(&[-0.05]) + 0.05).abs() < 1e-12);
    }

    #[test]
    fn stats_of_small_sample() {
        let s = stats(&mut [3.0, 1.0, 2.0]);
        assert_eq!(&s[..3], &[1.0, 2.0, 3.0]);
        assert!((s[3] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
