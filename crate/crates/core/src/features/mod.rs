//! The five hand-crafted feature families.
//!
//! Every successful extraction produces, per nodule, exactly
//!
//! | family | values |
//! |---|---|
//! | temporal | 42 |
//! | roi_textural | 576 |
//! | nodule_textural | 576 |
//! | relative_textural | 1152 |
//! | first_order | 90 |
//!
//! Names are dotted paths starting with the family, for example
//! `roi_textural.t15.d3.a90.contrast` or `temporal.win20.std.slope`.

pub mod first_order;
pub mod glcm;
pub mod series;
pub mod texture;

use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::{rasterize_polygon, CaseError, NoduleAnnotation, RoiMask};
use crate::registration::{AlignedSequence, RegistrationError, WarpModel};

pub use first_order::first_order;
pub use glcm::{glcm, GlcmProps, GrayRegion};
pub use series::{extract_region_series, temporal_features, RegionSeries};
pub use texture::{relative_textural, textural_block, texture_images, Quantizer};

/// Side of the square window used as nodule region when no polygon was drawn.
pub const NODULE_WINDOW: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Temporal,
    RoiTextural,
    NoduleTextural,
    RelativeTextural,
    FirstOrder,
}

impl Family {
    pub const ALL: [Family; 5] =
        [Family::Temporal, Family::RoiTextural, Family::NoduleTextural, Family::RelativeTextural, Family::FirstOrder];

    pub fn name(self) -> &'static str {
        match self {
            Family::Temporal => "temporal",
            Family::RoiTextural => "roi_textural",
            Family::NoduleTextural => "nodule_textural",
            Family::RelativeTextural => "relative_textural",
            Family::FirstOrder => "first_order",
        }
    }

    pub fn len(self) -> usize {
        match self {
            Family::Temporal => 42,
            Family::RoiTextural | Family::NoduleTextural => 576,
            Family::RelativeTextural => 1152,
            Family::FirstOrder => 90,
        }
    }

    pub fn from_name(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == s)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sum of all family lengths.
pub const TOTAL_FEATURES: usize = 42 + 576 + 576 + 1152 + 90;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("region {region} has no valid pixels at t={t}")]
    EmptyRegion { region: String, t: f64 },
    #[error("only {pairs} pixel pairs at distance {distance}, angle {angle}")]
    TooFewPairs { distance: usize, angle: u32, pairs: usize },
    #[error("image {image}: {source}")]
    Image { image: String, source: Box<FeatureError> },
    #[error("{family}: {source}")]
    Family { family: Family, source: Box<FeatureError> },
    #[error("aligned sequence has no frame at t={0}")]
    MissingFrame(f64),
    #[error("{family} block has {got} values, expected {expected}")]
    WrongLength { family: Family, expected: usize, got: usize },
    #[error("feature {0} is not finite")]
    NonFinite(String),
    #[error("mask and sequence dimensions differ")]
    DimensionMismatch,
    #[error("nodule {nodule_id}: {source}")]
    Nodule { nodule_id: String, source: Box<FeatureError> },
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error("feature table: {0}")]
    Table(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FeatureError {
    fn tagged(self, family: Family) -> Self {
        FeatureError::Family { family, source: Box::new(self) }
    }
}

/// One family's named values for one nodule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBlock {
    pub family: Family,
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl FeatureBlock {
    /// Checks the family cardinality and that every value is finite.
    pub fn new(family: Family, names: Vec<String>, values: Vec<f64>) -> Result<Self, FeatureError> {
        if values.len() != family.len() || names.len() != values.len() {
            return Err(FeatureError::WrongLength { family, expected: family.len(), got: values.len() });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite(names[k].clone()));
        }
        Ok(Self { family, names, values })
    }
}

/// Pixels whose centers fall in the `size`-wide square `[c - size/2, c + size/2)`, clipped to the frame.
pub fn window_mask(width: usize, height: usize, center: (f64, f64), size: f64) -> RoiMask {
    let half = size / 2.0;
    let inside = |v: f64, c: f64| v >= c - half && v < c + half;
    RoiMask::from_fn(width, height, |x, y| inside(x, center.0) && inside(y, center.1))
}

/// A nodule mapped into frame-0 coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct NoduleRegion {
    pub nodule_id: String,
    pub point: (f64, f64),
    pub region: RoiMask,
}

/// Maps an annotation drawn on the precool image through the inverse precool warp.
pub fn locate_nodule(
    annotation: &NoduleAnnotation,
    precool_warp: &WarpModel,
    width: usize,
    height: usize,
) -> Result<NoduleRegion, FeatureError> {
    let inv = precool_warp.inverse()?;
    let [x, y] = annotation.point;
    let point = inv.apply((x, y));
    let region = match &annotation.polygon {
        Some(poly) => {
            let mapped: Vec<[f64; 2]> = poly
                .iter()
                .map(|&[px, py]| {
                    let (u, v) = inv.apply((px, py));
                    [u, v]
                })
                .collect();
            rasterize_polygon(&mapped, width, height)?
        }
        None => window_mask(width, height, point, NODULE_WINDOW),
    };
    Ok(NoduleRegion { nodule_id: annotation.nodule_id.clone(), point, region })
}

/// Everything feature extraction needs: a registered 1 Hz sequence, its ROI
/// and the nodule annotations in precool coordinates.
#[derive(Debug, Clone)]
pub struct AlignedCase {
    pub case_id: String,
    pub annotations: Vec<NoduleAnnotation>,
    pub aligned: AlignedSequence,
    pub precool_warp: WarpModel,
    pub roi: RoiMask,
}

/// The five blocks for one nodule, in [`Family::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleFeatures {
    pub case_id: String,
    pub nodule_id: String,
    pub blocks: Vec<FeatureBlock>,
}

impl NoduleFeatures {
    pub fn block(&self, family: Family) -> Option<&FeatureBlock> {
        self.blocks.iter().find(|b| b.family == family)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().flat_map(|b| b.names.iter().map(String::as_str))
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks.iter().flat_map(|b| b.values.iter().copied())
    }
}

/// Extracts all five families for every annotated nodule.
///
/// The ROI texture block is computed once and shared by all nodules.
pub fn extract_all(case: &AlignedCase) -> Result<Vec<NoduleFeatures>, FeatureError> {
    let aligned = &case.aligned;
    let (w, h) = (aligned.width(), aligned.height());
    if case.roi.width() != w || case.roi.height() != h {
        return Err(FeatureError::DimensionMismatch);
    }
    let images = texture_images(aligned)?;
    let frames: Vec<_> = images.iter().map(|(_, f)| *f).collect();
    let quantizer = Quantizer::fit(&frames, &case.roi).map_err(|e| e.tagged(Family::RoiTextural))?;
    let roi_block =
        textural_block(Family::RoiTextural, &images, &case.roi, &quantizer).map_err(|e| e.tagged(Family::RoiTextural))?;

    let mut out = Vec::with_capacity(case.annotations.len());
    for ann in &case.annotations {
        let wrap = |e: FeatureError| FeatureError::Nodule { nodule_id: ann.nodule_id.clone(), source: Box::new(e) };
        let nodule = locate_nodule(ann, &case.precool_warp, w, h).map_err(wrap)?;
        let series = extract_region_series(aligned, &case.roi, nodule.point).map_err(|e| wrap(e.tagged(Family::Temporal)))?;
        let temporal = temporal_features(&series).map_err(|e| wrap(e.tagged(Family::Temporal)))?;
        let nod_block = textural_block(Family::NoduleTextural, &images, &nodule.region, &quantizer)
            .map_err(|e| wrap(e.tagged(Family::NoduleTextural)))?;
        let relative = relative_textural(&roi_block, &nod_block).map_err(|e| wrap(e.tagged(Family::RelativeTextural)))?;
        let first = first_order(aligned, &case.roi, &nodule.region).map_err(|e| wrap(e.tagged(Family::FirstOrder)))?;
        out.push(NoduleFeatures {
            case_id: case.case_id.clone(),
            nodule_id: ann.nodule_id.clone(),
            blocks: vec![temporal, roi_block.clone(), nod_block, relative, first],
        });
    }
    Ok(out)
}

/// One row of a feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub case_id: String,
    pub nodule_id: String,
    pub values: Vec<f64>,
}

/// Wide feature table keyed by `(case_id, nodule_id)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    pub names: Vec<String>,
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    /// All families (`None`) or one family of every record.
    pub fn from_records(records: &[NoduleFeatures], family: Option<Family>) -> Result<Self, FeatureError> {
        let pick = |r: &NoduleFeatures| -> Result<(Vec<String>, Vec<f64>), FeatureError> {
            match family {
                None => Ok((r.names().map(String::from).collect(), r.values().collect())),
                Some(f) => {
                    let b = r.block(f).ok_or_else(|| FeatureError::Table(format!("record lacks {f}")))?;
                    Ok((b.names.clone(), b.values.clone()))
                }
            }
        };
        let mut table = FeatureTable::default();
        for r in records {
            let (names, values) = pick(r)?;
            if table.rows.is_empty() {
                table.names = names;
            } else if table.names != names {
                return Err(FeatureError::Table("records disagree on feature names".into()));
            }
            table.rows.push(FeatureRow { case_id: r.case_id.clone(), nodule_id: r.nodule_id.clone(), values });
        }
        Ok(table)
    }

    /// Appends the rows of `other`, which must have identical columns.
    pub fn extend(&mut self, other: FeatureTable) -> Result<(), FeatureError> {
        if self.rows.is_empty() && self.names.is_empty() {
            *self = other;
            return Ok(());
        }
        if self.names != other.names {
            return Err(FeatureError::Table("column sets differ".into()));
        }
        self.rows.extend(other.rows);
        Ok(())
    }

    /// Columns belonging to `family`, which are contiguous.
    pub fn family_range(&self, family: Family) -> Option<Range<usize>> {
        let prefix = format!("{}.", family.name());
        let start = self.names.iter().position(|n| n.starts_with(&prefix))?;
        let len = self.names[start..].iter().take_while(|n| n.starts_with(&prefix)).count();
        Some(start..start + len)
    }

    pub fn find(&self, case_id: &str, nodule_id: &str) -> Option<&FeatureRow> {
        self.rows.iter().find(|r| r.case_id == case_id && r.nodule_id == nodule_id)
    }

    /// Values are written with the shortest representation that parses back exactly.
    pub fn write_csv(&self, path: &Path) -> Result<(), FeatureError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["case_id", "nodule_id"];
        header.extend(self.names.iter().map(String::as_str));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.case_id.clone(), r.nodule_id.clone()];
            rec.extend(r.values.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, FeatureError> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.len() < 2 || &header[0] != "case_id" || &header[1] != "nodule_id" {
            return Err(FeatureError::Table("header must start with case_id,nodule_id".into()));
        }
        let names: Vec<String> = header.iter().skip(2).map(String::from).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let values = rec
                .iter()
                .skip(2)
                .map(|s| s.parse::<f64>().map_err(|e| FeatureError::Table(format!("bad value {s:?}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            if values.len() != names.len() {
                return Err(FeatureError::Table("ragged row".into()));
            }
            rows.push(FeatureRow { case_id: rec[0].to_string(), nodule_id: rec[1].to_string(), values });
        }
        Ok(Self { names, rows })
    }
}

/// Writes the wide table to `wide` and one `<family>.csv` per family into `family_dir`.
pub fn write_feature_csvs(records: &[NoduleFeatures], wide: &Path, family_dir: &Path) -> Result<(), FeatureError> {
    std::fs::create_dir_all(family_dir)?;
    FeatureTable::from_records(records, None)?.write_csv(wide)?;
    for f in Family::ALL {
        FeatureTable::from_records(records, Some(f))?.write_csv(&family_dir.join(format!("{}.csv", f.name())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
