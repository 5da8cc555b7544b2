//! ROI segmentation of the alcohol-cooled region.
//!
//! The default segmenter thresholds the first post-cooling frame with Otsu's
//! method and keeps the largest cold component. [`net`] holds the trainable
//! encoder-decoder alternative; both share [`postprocess`].

pub mod net;

use std::collections::VecDeque;

use crate::io::{RoiMask, ThermalFrame};

pub use net::{infer_mask, train_segmenter, SegmenterNet, TrainConfig, TrainReport};

/// Components smaller than this are not a plausible cooled region.
pub const MIN_ROI_PIXELS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum SegmentationError {
    #[error("no cold region found (largest component {0} px)")]
    NoColdRegion(usize),
    #[error("mask dimensions differ")]
    DimensionMismatch,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Otsu threshold over a 256-bin histogram spanning `[min, max]` of `values`.
///
/// Returns `None` when all values are equal.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !(hi > lo) {
        return None;
    }
    const BINS: usize = 256;
    let scale = BINS as f64 / (hi - lo);
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[(((v - lo) * scale) as usize).min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_k) = (-1.0, 0);
    for (k, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += k as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_k = k;
        }
    }
    // upper edge of the last bin assigned to the lower class
    Some(lo + (best_k + 1) as f64 / scale)
}

/// Largest 8-connected component of `bits` (ties: first in raster order).
pub fn largest_component(bits: &[bool], width: usize, height: usize) -> Vec<bool> {
    let mut label = vec![0u32; bits.len()];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..bits.len() {
        if !bits[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(k) = queue.pop_front() {
            size += 1;
            let (i, j) = ((k / width) as isize, (k % width) as isize);
            for di in -1..=1 {
                for dj in -1..=1 {
                    let (r, c) = (i + di, j + dj);
                    if r < 0 || c < 0 || r >= height as isize || c >= width as isize {
                        continue;
                    }
                    let n = r as usize * width + c as usize;
                    if bits[n] && label[n] == 0 {
                        label[n] = next;
                        queue.push_back(n);
                    }
                }
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.1).collect()
}

fn morph(bits: &[bool], width: usize, height: usize, dilate: bool) -> Vec<bool> {
    let mut out = vec![false; bits.len()];
    for i in 0..height {
        for j in 0..width {
            let mut acc = !dilate;
            for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    let (r, c) = (i as isize + di, j as isize + dj);
                    // outside the frame: background for dilation, foreground for erosion
                    let v = if r < 0 || c < 0 || r >= height as isize || c >= width as isize {
                        !dilate
                    } else {
                        bits[r as usize * width + c as usize]
                    };
                    if dilate {
                        acc |= v;
                    } else {
                        acc &= v;
                    }
                }
            }
            out[i * width + j] = acc;
        }
    }
    out
}

/// One pass of 3×3 morphological closing.
pub fn close3(bits: &[bool], width: usize, height: usize) -> Vec<bool> {
    let d = morph(bits, width, height, true);
    morph(&d, width, height, false)
}

/// Sets every background pixel not 4-connected to the frame border.
pub fn fill_holes(bits: &[bool], width: usize, height: usize) -> Vec<bool> {
    let mut outside = vec![false; bits.len()];
    let mut queue = VecDeque::new();
    for i in 0..height {
        for j in 0..width {
            let border = i == 0 || j == 0 || i + 1 == height || j + 1 == width;
            let k = i * width + j;
            if border && !bits[k] {
                outside[k] = true;
                queue.push_back(k);
            }
        }
    }
    while let Some(k) = queue.pop_front() {
        let (i, j) = (k / width, k % width);
        let mut visit = |n: usize| {
            if !bits[n] && !outside[n] {
                outside[n] = true;
                queue.push_back(n);
            }
        };
        if i > 0 {
            visit(k - width);
        }
        if i + 1 < height {
            visit(k + width);
        }
        if j > 0 {
            visit(k - 1);
        }
        if j + 1 < width {
            visit(k + 1);
        }
    }
    outside.iter().map(|o| !o).collect()
}

/// Largest component, 3×3 closing, hole filling.
pub fn postprocess(bits: &[bool], width: usize, height: usize) -> RoiMask {
    let largest = largest_component(bits, width, height);
    let closed = close3(&largest, width, height);
    let filled = fill_holes(&closed, width, height);
    RoiMask::from_bits(width, height, filled).expect("same dimensions")
}

/// Segments the cooled region of the first post-cooling frame.
pub fn segment_cold_region(frame0: &ThermalFrame) -> Result<RoiMask, SegmentationError> {
    let (w, h) = (frame0.width(), frame0.height());
    let values: Vec<f64> = frame0.temps().iter().map(|&t| t as f64).collect();
    let Some(threshold) = otsu_threshold(&values) else {
        return Err(SegmentationError::NoColdRegion(0));
    };
    let cold: Vec<bool> = values.iter().map(|&v| v < threshold).collect();
    let largest = largest_component(&cold, w, h).iter().filter(|b| **b).count();
    if largest < MIN_ROI_PIXELS {
        return Err(SegmentationError::NoColdRegion(largest));
    }
    Ok(postprocess(&cold, w, h))
}

/// Sørensen-Dice overlap; 1.0 when both masks are empty.
pub fn dice(a: &RoiMask, b: &RoiMask) -> Result<f64, SegmentationError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(SegmentationError::DimensionMismatch);
    }
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * a.intersection_count(b) as f64 / (na + nb) as f64)
}
