//! Gray-level co-occurrence matrices and the six second-order texture statistics.

use serde::{Deserialize, Serialize};

use super::FeatureError;

/// Gray levels used for texture quantization.
pub const GRAY_LEVELS: usize = 64;
pub const DISTANCES: [usize; 3] = [1, 3, 5];
pub const ANGLES: [u32; 4] = [0, 45, 90, 135];
/// Fewer co-occurring pairs than this make the statistics meaningless.
pub const MIN_PAIRS: usize = 16;

pub const PROPERTY_NAMES: [&str; 6] = ["contrast", "dissimilarity", "homogeneity", "energy", "correlation", "asm"];

/// A quantized image restricted to a region: `None` outside the region or invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayRegion {
    pub width: usize,
    pub height: usize,
    pub levels: Vec<Option<u8>>,
    pub n_levels: usize,
}

impl GrayRegion {
    pub fn new(width: usize, height: usize, levels: Vec<Option<u8>>, n_levels: usize) -> Self {
        assert_eq!(levels.len(), width * height);
        debug_assert!(levels.iter().flatten().all(|&l| (l as usize) < n_levels));
        Self { width, height, levels, n_levels }
    }

    /// Whole-grid region from plain levels.
    pub fn dense(width: usize, height: usize, levels: &[u8], n_levels: usize) -> Self {
        Self::new(width, height, levels.iter().map(|&l| Some(l)).collect(), n_levels)
    }
}

/// Pixel displacement `(dx, dy)` for a distance and angle, image rows growing downward.
pub fn offset(distance: usize, angle: u32) -> (isize, isize) {
    let d = distance as isize;
    match angle {
        0 => (d, 0),
        45 => (d, -d),
        90 => (0, -d),
        135 => (-d, -d),
        180 => (-d, 0),
        225 => (-d, d),
        270 => (0, d),
        315 => (d, d),
        other => panic!("unsupported GLCM angle {other}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlcmProps {
    pub contrast: f64,
    pub dissimilarity: f64,
    pub homogeneity: f64,
    pub energy: f64,
    pub correlation: f64,
    pub asm: f64,
}

impl GlcmProps {
    /// In [`PROPERTY_NAMES`] order.
    pub fn to_array(&self) -> [f64; 6] {
        [self.contrast, self.dissimilarity, self.homogeneity, self.energy, self.correlation, self.asm]
    }
}

/// Asymmetric pair counts `C[a][b]` for one displacement; returns the number of pairs.
pub fn cooccurrence_counts(region: &GrayRegion, distance: usize, angle: u32) -> (Vec<u64>, usize) {
    let l = region.n_levels;
    let (dx, dy) = offset(distance, angle);
    let (w, h) = (region.width as isize, region.height as isize);
    let mut counts = vec![0u64; l * l];
    let mut pairs = 0;
    for y in 0..h {
        let ny = y + dy;
        if ny < 0 || ny >= h {
            continue;
        }
        for x in 0..w {
            let nx = x + dx;
            if nx < 0 || nx >= w {
                continue;
            }
            let (Some(a), Some(b)) = (region.levels[(y * w + x) as usize], region.levels[(ny * w + nx) as usize]) else {
                continue;
            };
            counts[a as usize * l + b as usize] += 1;
            pairs += 1;
        }
    }
    (counts, pairs)
}

/// Texture statistics of a symmetric co-occurrence count matrix.
///
/// A zero-variance matrix (one populated gray level) has correlation 1.
pub fn props_from_symmetric(sym: &[u64], n_levels: usize) -> GlcmProps {
    let total: u64 = sym.iter().sum();
    let total = total as f64;
    let (mut contrast, mut dissimilarity, mut homogeneity, mut asm, mut mu) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n_levels {
        for j in 0..n_levels {
            let c = sym[i * n_levels + j];
            if c == 0 {
                continue;
            }
            let p = c as f64 / total;
            let d = i as f64 - j as f64;
            contrast += p * d * d;
            dissimilarity += p * d.abs();
            homogeneity += p / (1.0 + d * d);
            asm += p * p;
            mu += p * i as f64;
        }
    }
    let (mut var, mut cov) = (0.0, 0.0);
    for i in 0..n_levels {
        for j in 0..n_levels {
            let c = sym[i * n_levels + j];
            if c == 0 {
                continue;
            }
            let p = c as f64 / total;
            let (di, dj) = (i as f64 - mu, j as f64 - mu);
            var += p * di * di;
            cov += p * di * dj;
        }
    }
    let correlation = if var > 0.0 { cov / var } else { 1.0 };
    GlcmProps { contrast, dissimilarity, homogeneity, energy: asm.sqrt(), correlation, asm }
}

/// Symmetric, normalized GLCM statistics for one distance and angle.
pub fn glcm(region: &GrayRegion, distance: usize, angle: u32) -> Result<GlcmProps, FeatureError> {
    let (counts, pairs) = cooccurrence_counts(region, distance, angle);
    if pairs < MIN_PAIRS {
        return Err(FeatureError::TooFewPairs { distance, angle, pairs });
    }
    let l = region.n_levels;
    let mut sym = vec![0u64; l * l];
    for i in 0..l {
        for j in 0..l {
            sym[i * l + j] = counts[i * l + j] + counts[j * l + i];
        }
    }
    Ok(props_from_symmetric(&sym, l))
}
