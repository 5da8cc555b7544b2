use std::path::Path;

use image::{GrayImage, Luma};

use super::CaseError;

/// Binary region mask; `true` marks the alcohol-cooled region of interest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl RoiMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![true; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, CaseError> {
        if bits.len() != width * height {
            return Err(CaseError::DimensionMismatch(format!("{width}x{height} mask with {} bits", bits.len())));
        }
        Ok(Self { width, height, bits })
    }

    /// Mask of pixels whose center satisfies `f(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(f64, f64) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for i in 0..height {
            for j in 0..width {
                bits.push(f(j as f64 + 0.5, i as f64 + 0.5));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn intersection_count(&self, other: &RoiMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn and(&self, other: &RoiMask) -> RoiMask {
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        RoiMask { width: self.width, height: self.height, bits }
    }

    /// Writes a binary PGM (P5) with set pixels stored as 255.
    pub fn save_pgm(&self, path: &Path) -> Result<(), CaseError> {
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        });
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        image::codecs::pnm::PnmEncoder::new(&mut out)
            .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary))
            .encode(img.as_raw().as_slice(), img.width(), img.height(), image::ExtendedColorType::L8)?;
        Ok(())
    }

    pub fn load_pgm(path: &Path) -> Result<Self, CaseError> {
        let img = image::open(path)?.into_luma8();
        let bits = img.pixels().map(|p| p.0[0] > 127).collect();
        Self::from_bits(img.width() as usize, img.height() as usize, bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RoiMask::from_fn(13, 7, |x, y| (x - 6.0).powi(2) + (y - 3.0).powi(2) < 9.0);
        let p = dir.path().join("roi.pgm");
        m.save_pgm(&p).unwrap();
        let raw = std::fs::read(&p).unwrap();
        assert!(raw.starts_with(b"P5"));
        assert_eq!(RoiMask::load_pgm(&p).unwrap(), m);
    }
}
