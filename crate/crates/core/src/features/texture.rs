//! Texture families: ROI and nodule GLCM blocks and their relative comparison.

use super::glcm::{glcm, GrayRegion, ANGLES, DISTANCES, GRAY_LEVELS, PROPERTY_NAMES};
use super::{FeatureBlock, FeatureError, Family};
use crate::io::RoiMask;
use crate::registration::{AlignedFrame, AlignedSequence};

/// Video times (s) analyzed for texture, after the precool image.
pub const TEXTURE_TIMES: [u32; 7] = [15, 30, 45, 60, 75, 90, 105];
pub const TEXTURE_BLOCK_LEN: usize = 8 * 3 * 4 * 6;
/// Smallest |roi value| for which a ratio is formed.
pub const RATIO_EPS: f64 = 1e-9;

/// The eight analyzed images with their name tokens.
pub fn texture_images(aligned: &AlignedSequence) -> Result<Vec<(String, &AlignedFrame)>, FeatureError> {
    let mut out = vec![("precool".to_string(), &aligned.precool)];
    for t in TEXTURE_TIMES {
        let f = aligned.frame_at(t as f64).ok_or(FeatureError::MissingFrame(t as f64))?;
        out.push((format!("t{t}"), f));
    }
    Ok(out)
}

/// Min-max scaling to [`GRAY_LEVELS`] levels, shared by every image of a case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantizer {
    pub min: f64,
    pub max: f64,
}

impl Quantizer {
    /// Range over the valid ROI pixels of all `images`.
    pub fn fit(images: &[&AlignedFrame], roi: &RoiMask) -> Result<Self, FeatureError> {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for f in images {
            for (k, _) in roi.bits().iter().enumerate().filter(|(_, b)| **b) {
                if f.valid[k] {
                    min = min.min(f.temps[k]);
                    max = max.max(f.temps[k]);
                }
            }
        }
        if min > max {
            return Err(FeatureError::EmptyRegion { region: "roi".into(), t: f64::NAN });
        }
        Ok(Self { min, max })
    }

    pub fn level(&self, t: f64) -> u8 {
        if self.max <= self.min {
            return 0;
        }
        let q = ((t - self.min) / (self.max - self.min) * GRAY_LEVELS as f64).floor();
        q.clamp(0.0, (GRAY_LEVELS - 1) as f64) as u8
    }

    pub fn quantize(&self, frame: &AlignedFrame, region: &RoiMask) -> GrayRegion {
        let levels = (0..frame.temps.len())
            .map(|k| (region.bits()[k] && frame.valid[k]).then(|| self.level(frame.temps[k])))
            .collect();
        GrayRegion::new(frame.width, frame.height, levels, GRAY_LEVELS)
    }
}

/// 8 images × 3 distances × 4 angles × 6 properties over `region`.
pub fn textural_block(
    family: Family,
    images: &[(String, &AlignedFrame)],
    region: &RoiMask,
    quantizer: &Quantizer,
) -> Result<FeatureBlock, FeatureError> {
    let mut names = Vec::with_capacity(TEXTURE_BLOCK_LEN);
    let mut values = Vec::with_capacity(TEXTURE_BLOCK_LEN);
    for (image, frame) in images {
        let gray = quantizer.quantize(frame, region);
        for d in DISTANCES {
            for a in ANGLES {
                let props = glcm(&gray, d, a).map_err(|e| FeatureError::Image { image: image.clone(), source: Box::new(e) })?;
                for (p, v) in PROPERTY_NAMES.iter().zip(props.to_array()) {
                    names.push(format!("{}.{image}.d{d}.a{a}.{p}", family.name()));
                    values.push(v);
                }
            }
        }
    }
    FeatureBlock::new(family, names, values)
}

/// Differences then ratios of two texture blocks.
pub fn relative_textural(roi: &FeatureBlock, nodule: &FeatureBlock) -> Result<FeatureBlock, FeatureError> {
    for b in [roi, nodule] {
        if b.values.len() != TEXTURE_BLOCK_LEN {
            return Err(FeatureError::WrongLength { family: b.family, expected: TEXTURE_BLOCK_LEN, got: b.values.len() });
        }
    }
    let suffix = |n: &str| n.split_once('.').map(|(_, s)| s.to_string()).unwrap_or_default();
    let mut names = Vec::with_capacity(2 * TEXTURE_BLOCK_LEN);
    let mut values = Vec::with_capacity(2 * TEXTURE_BLOCK_LEN);
    for (n, (r, q)) in roi.names.iter().zip(roi.values.iter().zip(&nodule.values)) {
        names.push(format!("relative_textural.diff.{}", suffix(n)));
        values.push(r - q);
    }
    for (n, (r, q)) in roi.names.iter().zip(roi.values.iter().zip(&nodule.values)) {
        names.push(format!("relative_textural.ratio.{}", suffix(n)));
        values.push(if r.abs() >= RATIO_EPS { q / r } else { 0.0 });
    }
    FeatureBlock::new(Family::RelativeTextural, names, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantizer_edges() {
        let q = Quantizer { min: 30.0, max: 32.0 };
        assert_eq!(q.level(30.0), 0);
        assert_eq!(q.level(32.0), 63);
        assert_eq!(q.level(31.0), 32);
        assert_eq!(q.level(29.0), 0);
        assert_eq!(Quantizer { min: 5.0, max: 5.0 }.level(5.0), 0);
    }

    fn block(family: Family, v: f64) -> FeatureBlock {
        let names = (0..TEXTURE_BLOCK_LEN).map(|k| format!("{}.x{k}", family.name())).collect();
        FeatureBlock::new(family, names, vec![v; TEXTURE_BLOCK_LEN]).unwrap()
    }

    #[test]
    fn relative_arithmetic() {
        let same = relative_textural(&block(Family::RoiTextural, 0.25), &block(Family::NoduleTextural, 0.25)).unwrap();
        assert_eq!(same.values.len(), 1152);
        assert!(same.values[..576].iter().all(|v| *v == 0.0));
        assert!(same.values[576..].iter().all(|v| *v == 1.0));
        let r = relative_textural(&block(Family::RoiTextural, 0.5833), &block(Family::NoduleTextural, 0.0)).unwrap();
        assert_eq!((r.values[0], r.values[576]), (0.5833, 0.0));
        let z = relative_textural(&block(Family::RoiTextural, 0.0), &block(Family::NoduleTextural, 3.0)).unwrap();
        assert_eq!(z.values[576], 0.0);
        assert_eq!(r.names[0], "relative_textural.diff.x0");
        assert_eq!(r.names[576], "relative_textural.ratio.x0");
    }

    #[test]
    fn short_block_refused() {
        let short = FeatureBlock { family: Family::RoiTextural, names: vec!["a".into()], values: vec![1.0] };
        assert!(matches!(
            relative_textural(&short, &block(Family::NoduleTextural, 1.0)),
            Err(FeatureError::WrongLength { expected: 576, got: 1, .. })
        ));
    }
}
