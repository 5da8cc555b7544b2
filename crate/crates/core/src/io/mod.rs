//! On-disk case format and the in-memory thermal data model.
//!
//! A case directory holds a JSON manifest (`case.json`) and one binary
//! payload (`frames.bin`) of little-endian `f32` temperatures, row-major,
//! frames concatenated with the pre-cooling image first. The manifest carries
//! a SHA-256 of the payload so truncation or bit rot is caught on load.
//!
//! Coordinates are subpixel with the origin at the top-left corner of the
//! top-left pixel: pixel `(row i, col j)` has its center at `(j + 0.5, i + 0.5)`.

mod mask;
mod polygon;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use mask::RoiMask;
pub use polygon::{polygon_area, polygon_is_simple, rasterize_polygon, Point};

/// File name of the case manifest inside a case directory.
pub const MANIFEST_FILE: &str = "case.json";
/// File name of the frame payload inside a case directory.
pub const PAYLOAD_FILE: &str = "frames.bin";

/// Physiological plus ambient envelope accepted for any temperature, in °C.
pub const TEMP_RANGE: (f32, f32) = (0.0, 60.0);
/// Latest admissible video timestamp, in seconds after cooling.
pub const MAX_VIDEO_SECONDS: f64 = 125.0;
/// Number of 1 Hz samples in the decimated view (t = 0..=120 s).
pub const DECIMATED_SAMPLES: usize = 121;

#[derive(Debug, thiserror::Error)]
pub enum CaseError {
    #[error("manifest not found at {0}")]
    MissingManifest(String),
    #[error("payload corrupt: {0}")]
    CorruptPayload(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("timestamps not strictly increasing at frame {index}")]
    NonMonotonicTimestamps { index: usize },
    #[error("timestamp {t} out of range at frame {index}")]
    TimestampOutOfRange { index: usize, t: f64 },
    #[error("case has no nodule annotations")]
    MissingAnnotation,
    #[error("invalid temperature {value} in frame {frame} at pixel {pixel}")]
    InvalidTemperature { frame: usize, pixel: usize, value: f32 },
    #[error("invalid annotation {nodule_id}: {reason}")]
    InvalidAnnotation { nodule_id: String, reason: String },
    #[error("degenerate polygon (area {area:.3} px)")]
    DegeneratePolygon { area: f64 },
    #[error("label 'unknown' is only allowed for prediction cases")]
    UnknownLabel,
    #[error("no frames in second {second} of the video")]
    IncompleteCoverage { second: usize },
    #[error("I/O failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("mask image: {0}")]
    Image(#[from] image::ImageError),
}

/// One temperature raster in °C.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalFrame {
    width: usize,
    height: usize,
    timestamp: f64,
    temps: Vec<f32>,
}

impl ThermalFrame {
    pub fn new(width: usize, height: usize, timestamp: f64, temps: Vec<f32>) -> Result<Self, CaseError> {
        if width == 0 || height == 0 || temps.len() != width * height {
            return Err(CaseError::DimensionMismatch(format!(
                "{}x{} frame with {} temperatures",
                width,
                height,
                temps.len()
            )));
        }
        if let Some((pixel, &value)) = temps
            .iter()
            .enumerate()
            .find(|(_, t)| !t.is_finite() || **t < TEMP_RANGE.0 || **t > TEMP_RANGE.1)
        {
            return Err(CaseError::InvalidTemperature { frame: 0, pixel, value });
        }
        Ok(Self { width, height, timestamp, temps })
    }

    /// Builds a frame by evaluating `f(x, y)` at every pixel center.
    pub fn from_fn(
        width: usize,
        height: usize,
        timestamp: f64,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Result<Self, CaseError> {
        let mut temps = Vec::with_capacity(width * height);
        for i in 0..height {
            for j in 0..width {
                temps.push(f(j as f64 + 0.5, i as f64 + 0.5) as f32);
            }
        }
        Self::new(width, height, timestamp, temps)
    }

    pub fn constant(width: usize, height: usize, timestamp: f64, value: f32) -> Result<Self, CaseError> {
        Self::new(width, height, timestamp, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn temps(&self) -> &[f32] {
        &self.temps
    }

    /// Temperature at pixel `(row, col)`.
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.temps[row * self.width + col]
    }

    pub fn with_timestamp(mut self, timestamp: f64) -> Self {
        self.timestamp = timestamp;
        self
    }

    pub fn same_shape(&self, other: &ThermalFrame) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Pre-cooling image plus the post-cooling video of one nodule site.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalSequence {
    precool: ThermalFrame,
    frames: Vec<ThermalFrame>,
    nominal_rate: f64,
}

impl ThermalSequence {
    pub fn new(precool: ThermalFrame, frames: Vec<ThermalFrame>, nominal_rate: f64) -> Result<Self, CaseError> {
        if frames.is_empty() {
            return Err(CaseError::DimensionMismatch("sequence has no video frames".into()));
        }
        if !(nominal_rate.is_finite() && nominal_rate > 0.0) {
            return Err(CaseError::DimensionMismatch(format!("nominal rate {nominal_rate} Hz")));
        }
        if !(precool.timestamp < 0.0) {
            return Err(CaseError::TimestampOutOfRange { index: 0, t: precool.timestamp });
        }
        for (k, f) in frames.iter().enumerate() {
            if !f.same_shape(&precool) {
                return Err(CaseError::DimensionMismatch(format!(
                    "frame {} is {}x{}, precool is {}x{}",
                    k + 1,
                    f.width,
                    f.height,
                    precool.width,
                    precool.height
                )));
            }
            if k == 0 && f.timestamp < 0.0 || f.timestamp > MAX_VIDEO_SECONDS || !f.timestamp.is_finite() {
                return Err(CaseError::TimestampOutOfRange { index: k + 1, t: f.timestamp });
            }
            if k > 0 && f.timestamp <= frames[k - 1].timestamp {
                return Err(CaseError::NonMonotonicTimestamps { index: k + 1 });
            }
        }
        Ok(Self { precool, frames, nominal_rate })
    }

    pub fn precool(&self) -> &ThermalFrame {
        &self.precool
    }

    pub fn frames(&self) -> &[ThermalFrame] {
        &self.frames
    }

    pub fn nominal_rate(&self) -> f64 {
        self.nominal_rate
    }

    pub fn width(&self) -> usize {
        self.precool.width
    }

    pub fn height(&self) -> usize {
        self.precool.height
    }

    /// 1 Hz view of the video: sample `k` is the per-pixel mean of every frame
    /// with timestamp in `[k - 0.5, k + 0.5)`, for `k = 0..=120`.
    ///
    /// A sequence already sampled at integer seconds comes back unchanged.
    pub fn decimate_1hz(&self) -> Result<ThermalSequence, CaseError> {
        let n = self.width() * self.height();
        let mut sums = vec![vec![0.0f64; n]; DECIMATED_SAMPLES];
        let mut counts = vec![0usize; DECIMATED_SAMPLES];
        for f in &self.frames {
            let bucket = (f.timestamp + 0.5).floor();
            if bucket < 0.0 || bucket >= DECIMATED_SAMPLES as f64 {
                continue;
            }
            let b = bucket as usize;
            counts[b] += 1;
            for (s, &t) in sums[b].iter_mut().zip(&f.temps) {
                *s += t as f64;
            }
        }
        let mut frames = Vec::with_capacity(DECIMATED_SAMPLES);
        for (k, (sum, count)) in sums.into_iter().zip(counts).enumerate() {
            if count == 0 {
                return Err(CaseError::IncompleteCoverage { second: k });
            }
            let temps = sum.into_iter().map(|s| (s / count as f64) as f32).collect();
            frames.push(ThermalFrame { width: self.width(), height: self.height(), timestamp: k as f64, temps });
        }
        ThermalSequence::new(self.precool.clone(), frames, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Viable,
    Nonviable,
    Unknown,
}

impl Label {
    /// `Some(true)` for viable, `Some(false)` for nonviable.
    pub fn as_positive(self) -> Option<bool> {
        match self {
            Label::Viable => Some(true),
            Label::Nonviable => Some(false),
            Label::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Phantom,
}

/// A technician's mark of one palpable nodule on the pre-cooling frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleAnnotation {
    pub nodule_id: String,
    pub point: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polygon: Option<Vec<[f64; 2]>>,
}

impl NoduleAnnotation {
    pub fn point(nodule_id: impl Into<String>, x: f64, y: f64) -> Self {
        Self { nodule_id: nodule_id.into(), point: [x, y], polygon: None }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<(), CaseError> {
        let bad = |reason: &str| CaseError::InvalidAnnotation {
            nodule_id: self.nodule_id.clone(),
            reason: reason.to_string(),
        };
        let [x, y] = self.point;
        if !(x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64) {
            return Err(bad("point outside frame"));
        }
        if let Some(poly) = &self.polygon {
            if poly.len() < 3 {
                return Err(bad("polygon needs at least 3 vertices"));
            }
            if poly.iter().flatten().any(|c| !c.is_finite()) {
                return Err(bad("non-finite polygon vertex"));
            }
            if !polygon_is_simple(poly) {
                return Err(bad("polygon self-intersects"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub participant_id: String,
    pub sequence_path: String,
    pub annotations: Vec<NoduleAnnotation>,
    pub label: Label,
    pub provenance: Provenance,
}

impl CaseRecord {
    pub fn validate(&self, width: usize, height: usize) -> Result<(), CaseError> {
        if self.annotations.is_empty() {
            return Err(CaseError::MissingAnnotation);
        }
        for a in &self.annotations {
            a.validate(width, height)?;
        }
        Ok(())
    }

    /// Like [`validate`](Self::validate) but also refuses `label = unknown`,
    /// which is only meaningful for prediction-only cases.
    pub fn validate_labeled(&self, width: usize, height: usize) -> Result<(), CaseError> {
        self.validate(width, height)?;
        if self.label == Label::Unknown {
            return Err(CaseError::UnknownLabel);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameEntry {
    t_seconds: f64,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    case_id: String,
    participant_id: String,
    label: Label,
    provenance: Provenance,
    width: usize,
    height: usize,
    nominal_rate_hz: f64,
    payload: String,
    frames: Vec<FrameEntry>,
    checksum_sha256: String,
    annotations: Vec<NoduleAnnotation>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_payload(seq: &ThermalSequence) -> (Vec<u8>, Vec<FrameEntry>) {
    let n = seq.width() * seq.height();
    let mut bytes = Vec::with_capacity((seq.frames.len() + 1) * n * 4);
    let mut entries = Vec::with_capacity(seq.frames.len() + 1);
    for f in std::iter::once(&seq.precool).chain(&seq.frames) {
        entries.push(FrameEntry { t_seconds: f.timestamp, offset: bytes.len() as u64 });
        for t in &f.temps {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
    }
    (bytes, entries)
}

/// Writes `case.json` and `frames.bin` into `dir` (created if missing).
pub fn write_case(record: &CaseRecord, seq: &ThermalSequence, dir: &Path) -> Result<(), CaseError> {
    record.validate(seq.width(), seq.height())?;
    fs::create_dir_all(dir)?;
    let (payload, frames) = encode_payload(seq);
    let manifest = Manifest {
        case_id: record.case_id.clone(),
        participant_id: record.participant_id.clone(),
        label: record.label,
        provenance: record.provenance,
        width: seq.width(),
        height: seq.height(),
        nominal_rate_hz: seq.nominal_rate,
        payload: PAYLOAD_FILE.to_string(),
        frames,
        checksum_sha256: sha256_hex(&payload),
        annotations: record.annotations.clone(),
    };
    fs::write(dir.join(PAYLOAD_FILE), &payload)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<Manifest, CaseError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(CaseError::MissingManifest(path.display().to_string()));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Frame geometry and timestamps from the manifest, without touching the payload.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameIndex {
    pub width: usize,
    pub height: usize,
    pub nominal_rate_hz: f64,
    /// Precool first.
    pub timestamps: Vec<f64>,
}

pub fn read_frame_index(dir: &Path) -> Result<FrameIndex, CaseError> {
    let m = read_manifest(dir)?;
    Ok(FrameIndex {
        width: m.width,
        height: m.height,
        nominal_rate_hz: m.nominal_rate_hz,
        timestamps: m.frames.iter().map(|f| f.t_seconds).collect(),
    })
}

/// Reads only the manifest part of a case (ids, label, annotations).
pub fn read_record(dir: &Path) -> Result<CaseRecord, CaseError> {
    let m = read_manifest(dir)?;
    let record = record_of(&m);
    record.validate(m.width, m.height)?;
    Ok(record)
}

fn record_of(m: &Manifest) -> CaseRecord {
    CaseRecord {
        case_id: m.case_id.clone(),
        participant_id: m.participant_id.clone(),
        sequence_path: m.payload.clone(),
        annotations: m.annotations.clone(),
        label: m.label,
        provenance: m.provenance,
    }
}

/// Loads and fully validates a case directory.
pub fn read_case(dir: &Path) -> Result<(CaseRecord, ThermalSequence), CaseError> {
    let m = read_manifest(dir)?;
    let payload = fs::read(dir.join(&m.payload))?;
    if sha256_hex(&payload) != m.checksum_sha256 {
        return Err(CaseError::CorruptPayload(format!(
            "checksum mismatch on {} ({} bytes)",
            m.payload,
            payload.len()
        )));
    }
    if m.frames.len() < 2 {
        return Err(CaseError::DimensionMismatch("need a precool image and at least one video frame".into()));
    }
    let frame_bytes = m.width * m.height * 4;
    if payload.len() != m.frames.len() * frame_bytes {
        return Err(CaseError::DimensionMismatch(format!(
            "payload has {} bytes, expected {} frames of {}x{}",
            payload.len(),
            m.frames.len(),
            m.width,
            m.height
        )));
    }
    let mut frames = Vec::with_capacity(m.frames.len());
    for (k, entry) in m.frames.iter().enumerate() {
        let start = entry.offset as usize;
        if start % 4 != 0 || start + frame_bytes > payload.len() {
            return Err(CaseError::DimensionMismatch(format!("frame {k} offset {start} out of payload")));
        }
        let temps = payload[start..start + frame_bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let frame = ThermalFrame::new(m.width, m.height, entry.t_seconds, temps).map_err(|e| match e {
            CaseError::InvalidTemperature { pixel, value, .. } => CaseError::InvalidTemperature { frame: k, pixel, value },
            other => other,
        })?;
        frames.push(frame);
    }
    let precool = frames.remove(0);
    let seq = ThermalSequence::new(precool, frames, m.nominal_rate_hz)?;
    let record = record_of(&m);
    record.validate(m.width, m.height)?;
    Ok((record, seq))
}

/// Replaces the annotation list in an existing manifest, leaving the payload untouched.
pub fn write_annotations(dir: &Path, annotations: &[NoduleAnnotation]) -> Result<CaseRecord, CaseError> {
    let mut m = read_manifest(dir)?;
    m.annotations = annotations.to_vec();
    let record = record_of(&m);
    record.validate(m.width, m.height)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&m)?)?;
    Ok(record)
}
