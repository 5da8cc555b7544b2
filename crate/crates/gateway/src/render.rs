//! Fixed-palette PNG rendering of temperature rasters.

use std::io::Cursor;

use image::{ImageFormat, RgbImage};

/// Anchors of the thermal palette, cold to hot.
const PALETTE: [[f64; 3]; 6] = [
    [0.0, 0.0, 0.0],
    [70.0, 0.0, 130.0],
    [190.0, 30.0, 70.0],
    [245.0, 120.0, 0.0],
    [255.0, 215.0, 40.0],
    [255.0, 255.0, 255.0],
];

/// Color of `v` in the window `[lo, hi]`, clamped at both ends.
pub fn color(v: f64, lo: f64, hi: f64) -> [u8; 3] {
    let s = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let x = s * (PALETTE.len() - 1) as f64;
    let k = (x.floor() as usize).min(PALETTE.len() - 2);
    let f = x - k as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (PALETTE[k][c] * (1.0 - f) + PALETTE[k + 1][c] * f).round() as u8;
    }
    out
}

/// Encodes a raster as PNG; `None` pixels (outside the registered field) are drawn black.
pub fn png(width: usize, height: usize, values: &[Option<f64>], lo: f64, hi: f64) -> Vec<u8> {
    let mut img = RgbImage::new(width as u32, height as u32);
    for (k, v) in values.iter().enumerate() {
        let px = v.map_or([0, 0, 0], |v| color(v, lo, hi));
        img.put_pixel((k % width) as u32, (k / width) as u32, image::Rgb(px));
    }
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("in-memory PNG encoding");
    buf.into_inner()
}

/// Black-and-white mask PNG.
pub fn mask_png(width: usize, height: usize, bits: &[bool]) -> Vec<u8> {
    let img = image::GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([if bits[y as usize * width + x as usize] { 255 } else { 0 }])
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("in-memory PNG encoding");
    buf.into_inner()
}
