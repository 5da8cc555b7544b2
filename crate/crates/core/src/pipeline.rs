//! Stage orchestration over case directories.
//!
//! Each stage reads the artifacts of the stages before it from the case
//! directory and writes its own next to them:
//!
//! ```text
//! case.json, frames.bin    input (thermal_io format)
//! warps.jsonl, align.json  align
//! roi.pgm                  segment
//! features.csv, features/  features (wide table plus one CSV per family)
//! prediction.json          predict
//! ```
//!
//! Rewriting an upstream artifact deletes everything downstream of it, so a
//! stale prediction can never outlive the data it came from.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{self, AlignedCase, FeatureError, FeatureTable, NoduleFeatures};
use crate::io::{self, rasterize_polygon, CaseError, CaseRecord, Label, RoiMask, ThermalSequence};
use crate::learning::bundle::{load_bundle, save_bundle, BundleManifest, SplitIds};
use crate::learning::{train_ensemble, ClassificationOutcome, EnsembleConfig, EnsembleModel, LearningError};
use crate::metrics::{build_report, plan_split, MetricsError, StudyReport};
use crate::phantom::{StudyManifest, STUDY_FILE};
use crate::registration::{stabilize_sequence, AlignedSequence, RegistrationError, StabilizeConfig, Stabilization, WarpKind};
use crate::segmentation::net::{infer_mask, SegmenterNet};
use crate::segmentation::{segment_cold_region, SegmentationError, MIN_ROI_PIXELS};

pub const WARPS_FILE: &str = "warps.jsonl";
pub const ALIGN_FILE: &str = "align.json";
pub const ROI_FILE: &str = "roi.pgm";
/// Frame-0 polygon read by the manual segmenter.
pub const ROI_POLYGON_FILE: &str = "roi_polygon.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const FEATURES_DIR: &str = "features";
pub const PREDICTION_FILE: &str = "prediction.json";
/// Validation report stored inside a trained bundle.
pub const VALIDATION_REPORT: &str = "validation_report.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("review required: minimum frame rho {min_rho:.4} is below the review threshold")]
    ReviewRequired { min_rho: f64 },
    #[error("{stage} missing: run `{stage}` first ({path})")]
    StageMissing { stage: &'static str, path: String },
    #[error("case {0} not found")]
    UnknownCase(String),
    #[error("case {0} has no label")]
    Unlabeled(String),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Learning(#[from] LearningError),
    #[error("case {case_id}: {source}")]
    InCase { case_id: String, source: Box<PipelineError> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// Process exit code: 1 usage, 2 review required, 3 data, 4 model.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 1,
            PipelineError::ReviewRequired { .. } => 2,
            PipelineError::Learning(_) => 4,
            PipelineError::InCase { source, .. } => source.exit_code(),
            _ => 3,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Usage(_) => "usage",
            PipelineError::ReviewRequired { .. } => "review_required",
            PipelineError::StageMissing { .. } => "stage_missing",
            PipelineError::UnknownCase(_) => "unknown_case",
            PipelineError::Learning(_) => "model",
            PipelineError::InCase { source, .. } => source.kind(),
            _ => "data",
        }
    }

    fn in_case(self, case_id: &str) -> Self {
        match self {
            e @ PipelineError::InCase { .. } => e,
            e => PipelineError::InCase { case_id: case_id.to_string(), source: Box::new(e) },
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Ordered pipeline stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Align,
    Segment,
    Features,
    Predict,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Align, Stage::Segment, Stage::Features, Stage::Predict];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Align => "align",
            Stage::Segment => "segment",
            Stage::Features => "features",
            Stage::Predict => "predict",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    fn artifacts(self) -> &'static [&'static str] {
        match self {
            Stage::Align => &[WARPS_FILE, ALIGN_FILE],
            Stage::Segment => &[ROI_FILE],
            Stage::Features => &[FEATURES_FILE, FEATURES_DIR],
            Stage::Predict => &[PREDICTION_FILE],
        }
    }

    /// Stages whose artifacts this stage reads.
    pub fn requires(self) -> &'static [Stage] {
        match self {
            Stage::Align | Stage::Segment => &[],
            Stage::Features => &[Stage::Align, Stage::Segment],
            Stage::Predict => &[Stage::Features],
        }
    }

    /// Stages whose artifacts are made stale when this one is rewritten.
    pub fn downstream(self) -> &'static [Stage] {
        match self {
            Stage::Align | Stage::Segment => &[Stage::Features, Stage::Predict],
            Stage::Features => &[Stage::Predict],
            Stage::Predict => &[],
        }
    }
}

fn remove_artifacts(dir: &Path, stage: Stage) -> Result<()> {
    for name in stage.artifacts() {
        let p = dir.join(name);
        if p.is_dir() {
            fs::remove_dir_all(&p)?;
        } else if p.exists() {
            fs::remove_file(&p)?;
        }
    }
    Ok(())
}

/// Deletes the artifacts of every stage downstream of `stage`.
pub fn invalidate_after(dir: &Path, stage: Stage) -> Result<()> {
    for s in stage.downstream() {
        remove_artifacts(dir, *s)?;
    }
    Ok(())
}

/// Deletes features and predictions; annotations feed only those stages.
pub fn invalidate_annotations(dir: &Path) -> Result<()> {
    remove_artifacts(dir, Stage::Features)?;
    remove_artifacts(dir, Stage::Predict)
}

pub fn stage_done(dir: &Path, stage: Stage) -> bool {
    stage.artifacts().iter().take(1).all(|a| dir.join(a).exists())
}

/// Summary written by the align stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignSummary {
    pub frame_kind: WarpKind,
    pub precool_kind: WarpKind,
    pub frames: usize,
    pub min_rho: f64,
    pub review_required: bool,
}

/// What a case directory currently holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStatus {
    pub aligned: bool,
    pub segmented: bool,
    pub featured: bool,
    pub predicted: bool,
    pub review_required: bool,
}

impl CaseStatus {
    /// Furthest stage reached, as one word.
    pub fn label(&self) -> &'static str {
        if self.review_required {
            "review_required"
        } else if self.predicted {
            "predicted"
        } else if self.featured {
            "featured"
        } else if self.segmented {
            "segmented"
        } else if self.aligned {
            "aligned"
        } else {
            "raw"
        }
    }
}

pub fn case_status(dir: &Path) -> CaseStatus {
    let review_required = fs::read(dir.join(ALIGN_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice::<AlignSummary>(&b).ok())
        .is_some_and(|s| s.review_required);
    CaseStatus {
        aligned: stage_done(dir, Stage::Align),
        segmented: stage_done(dir, Stage::Segment),
        featured: stage_done(dir, Stage::Features),
        predicted: stage_done(dir, Stage::Predict),
        review_required,
    }
}

/// Loads a case and its 1 Hz view.
pub fn load_decimated(dir: &Path) -> Result<(CaseRecord, ThermalSequence)> {
    let (record, seq) = io::read_case(dir)?;
    let seq = seq.decimate_1hz()?;
    Ok((record, seq))
}

/// Registers the 1 Hz sequence and writes `warps.jsonl` and `align.json`.
///
/// The artifacts are written even when review is required; the caller
/// decides whether that is fatal.
pub fn align_case(dir: &Path, config: &StabilizeConfig) -> Result<AlignSummary> {
    let (_, seq) = load_decimated(dir)?;
    let stab = stabilize_sequence(&seq, config)?;
    let summary = AlignSummary {
        frame_kind: config.frame_kind,
        precool_kind: config.precool_kind,
        frames: stab.frames.len(),
        min_rho: stab.min_frame_rho(),
        review_required: stab.review_required(),
    };
    invalidate_after(dir, Stage::Align)?;
    fs::write(dir.join(WARPS_FILE), stab.to_jsonl())?;
    fs::write(dir.join(ALIGN_FILE), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

fn missing(stage: &'static str, path: PathBuf) -> PipelineError {
    PipelineError::StageMissing { stage, path: path.display().to_string() }
}

pub fn load_alignment(dir: &Path) -> Result<Stabilization> {
    let path = dir.join(WARPS_FILE);
    if !path.is_file() {
        return Err(missing("alignment", path));
    }
    Ok(Stabilization::from_jsonl(&fs::read_to_string(path)?)?)
}

/// How the region of interest is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum Segmenter {
    /// Otsu threshold on frame 0, the default.
    Otsu,
    /// A trained segmentation net checkpoint.
    Net(PathBuf),
    /// A technician's polygon in `roi_polygon.json`, frame-0 coordinates.
    Manual,
}

impl Segmenter {
    pub fn parse(name: &str, model: Option<PathBuf>) -> Result<Self> {
        match (name, model) {
            ("otsu", _) => Ok(Segmenter::Otsu),
            ("manual", _) => Ok(Segmenter::Manual),
            ("net", Some(m)) => Ok(Segmenter::Net(m)),
            ("net", None) => Err(PipelineError::Usage("--segmenter net needs --model".into())),
            (other, _) => Err(PipelineError::Usage(format!("unknown segmenter {other}"))),
        }
    }
}

/// Segments frame 0 and writes `roi.pgm`. Frame 0 is the registration
/// reference, so the mask applies to every aligned frame as is.
pub fn segment_case(dir: &Path, segmenter: &Segmenter) -> Result<RoiMask> {
    let (_, seq) = load_decimated(dir)?;
    let frame0 = &seq.frames()[0];
    let (w, h) = (seq.width(), seq.height());
    let mask = match segmenter {
        Segmenter::Otsu => segment_cold_region(frame0)?,
        Segmenter::Net(path) => {
            let net = SegmenterNet::load(path)?;
            let m = infer_mask(&net, frame0);
            if m.count() < MIN_ROI_PIXELS {
                return Err(SegmentationError::NoColdRegion(m.count()).into());
            }
            m
        }
        Segmenter::Manual => {
            let path = dir.join(ROI_POLYGON_FILE);
            if !path.is_file() {
                return Err(missing("roi polygon", path));
            }
            let poly: Vec<[f64; 2]> = serde_json::from_slice(&fs::read(path)?)?;
            rasterize_polygon(&poly, w, h)?
        }
    };
    invalidate_after(dir, Stage::Segment)?;
    mask.save_pgm(&dir.join(ROI_FILE))?;
    Ok(mask)
}

pub fn load_roi(dir: &Path) -> Result<RoiMask> {
    let path = dir.join(ROI_FILE);
    if !path.is_file() {
        return Err(missing("segmentation", path));
    }
    Ok(RoiMask::load_pgm(&path)?)
}

/// Rebuilds the registered sequence from the stored artifacts.
pub fn aligned_case(dir: &Path) -> Result<AlignedCase> {
    let (record, seq) = load_decimated(dir)?;
    let stab = load_alignment(dir)?;
    let roi = load_roi(dir)?;
    if stab.frames.len() != seq.frames().len() {
        return Err(missing("alignment", dir.join(WARPS_FILE)));
    }
    Ok(AlignedCase {
        case_id: record.case_id,
        annotations: record.annotations,
        aligned: AlignedSequence::new(&seq, &stab),
        precool_warp: stab.precool,
        roi,
    })
}

/// Extracts all families and writes `features.csv` plus `features/<family>.csv`.
pub fn features_case(dir: &Path) -> Result<Vec<NoduleFeatures>> {
    let case = aligned_case(dir)?;
    let records = features::extract_all(&case)?;
    invalidate_after(dir, Stage::Features)?;
    features::write_feature_csvs(&records, &dir.join(FEATURES_FILE), &dir.join(FEATURES_DIR))?;
    Ok(records)
}

pub fn load_features(dir: &Path) -> Result<FeatureTable> {
    let path = dir.join(FEATURES_FILE);
    if !path.is_file() {
        return Err(missing("features", path));
    }
    Ok(FeatureTable::read_csv(&path)?)
}

/// One nodule's outcome in `prediction.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodulePrediction {
    pub nodule_id: String,
    #[serde(flatten)]
    pub outcome: ClassificationOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePrediction {
    pub case_id: String,
    pub nodules: Vec<NodulePrediction>,
}

/// Classifies every nodule of a case and writes `prediction.json`.
///
/// Extracts features first when they are missing, but never aligns or
/// segments on its own.
pub fn predict_case(dir: &Path, model: &EnsembleModel) -> Result<CasePrediction> {
    let record = io::read_record(dir)?;
    if !stage_done(dir, Stage::Features) {
        features_case(dir)?;
    }
    let table = load_features(dir)?;
    let nodules = table
        .rows
        .iter()
        .map(|row| {
            let outcome = model.predict(&table.names, &row.values)?;
            Ok(NodulePrediction { nodule_id: row.nodule_id.clone(), outcome })
        })
        .collect::<Result<Vec<_>>>()?;
    let pred = CasePrediction { case_id: record.case_id, nodules };
    fs::write(dir.join(PREDICTION_FILE), serde_json::to_vec_pretty(&pred)?)?;
    Ok(pred)
}

pub fn load_prediction(dir: &Path) -> Result<CasePrediction> {
    let path = dir.join(PREDICTION_FILE);
    if !path.is_file() {
        return Err(missing("prediction", path));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// One case of a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetCase {
    pub case_id: String,
    pub participant_id: String,
    pub dir: PathBuf,
    pub label: Label,
}

/// Cases under `root`: from `dataset.json` when present, otherwise every
/// subdirectory holding a `case.json`, sorted by directory name.
pub fn list_dataset(root: &Path) -> Result<Vec<DatasetCase>> {
    if root.join(STUDY_FILE).is_file() {
        let m = StudyManifest::load(root)?;
        return Ok(m
            .cases
            .iter()
            .map(|e| DatasetCase {
                case_id: e.case_id.clone(),
                participant_id: e.participant_id.clone(),
                dir: m.case_dir(root, e),
                label: e.label,
            })
            .collect());
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(io::MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.into_iter()
        .map(|dir| {
            let r = io::read_record(&dir)?;
            Ok(DatasetCase { case_id: r.case_id, participant_id: r.participant_id, dir, label: r.label })
        })
        .collect()
}

pub fn find_case<'a>(cases: &'a [DatasetCase], case_id: &str) -> Result<&'a DatasetCase> {
    cases.iter().find(|c| c.case_id == case_id).ok_or_else(|| PipelineError::UnknownCase(case_id.to_string()))
}

/// Settings shared by the batch commands.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub stabilize: StabilizeConfig,
    pub segmenter: Segmenter,
    pub ensemble: EnsembleConfig,
    /// Percent of the training pool used for threshold calibration.
    pub validation_percent: u32,
    /// Cases held out of training entirely and recorded in the bundle.
    pub holdout: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stabilize: StabilizeConfig::default(),
            segmenter: Segmenter::Otsu,
            ensemble: EnsembleConfig::default(),
            validation_percent: 20,
            holdout: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.ensemble;
        if !(1..=5).contains(&e.vote_threshold) {
            return Err(PipelineError::Usage(format!("vote threshold {} outside 1..5", e.vote_threshold)));
        }
        for (name, v) in [("specificity", e.specificity_target), ("sensitivity", e.sensitivity_target)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(PipelineError::Usage(format!("{name} target {v} outside (0, 1)")));
            }
        }
        if !(1..100).contains(&self.validation_percent) {
            return Err(PipelineError::Usage(format!("validation share {}% outside 1..99", self.validation_percent)));
        }
        Ok(())
    }
}

/// Runs whichever of align, segment and features a case is missing.
pub fn prepare_case(case: &DatasetCase, config: &RunConfig) -> Result<()> {
    let dir = &case.dir;
    let run = || -> Result<()> {
        if !stage_done(dir, Stage::Align) {
            let s = align_case(dir, &config.stabilize)?;
            if s.review_required {
                log::warn!("{}: review required (min rho {:.4})", case.case_id, s.min_rho);
            }
        }
        if !stage_done(dir, Stage::Segment) {
            segment_case(dir, &config.segmenter)?;
        }
        if !stage_done(dir, Stage::Features) {
            features_case(dir)?;
        }
        Ok(())
    };
    run().map_err(|e| e.in_case(&case.case_id))
}

fn prepare_all(cases: &[&DatasetCase], config: &RunConfig) -> Result<()> {
    cases.par_iter().map(|c| prepare_case(c, config)).collect::<Result<Vec<()>>>()?;
    Ok(())
}

/// Feature rows of `cases`, with one case label per nodule row.
fn collect_rows(cases: &[&DatasetCase]) -> Result<(FeatureTable, Vec<bool>, Vec<String>)> {
    let mut table: Option<FeatureTable> = None;
    let (mut labels, mut groups) = (Vec::new(), Vec::new());
    for c in cases {
        let positive = c.label.as_positive().ok_or_else(|| PipelineError::Unlabeled(c.case_id.clone()))?;
        let t = load_features(&c.dir).map_err(|e| e.in_case(&c.case_id))?;
        labels.extend(std::iter::repeat_n(positive, t.rows.len()));
        groups.extend(std::iter::repeat_n(c.participant_id.clone(), t.rows.len()));
        match &mut table {
            None => table = Some(t),
            Some(acc) => acc.extend(t)?,
        }
    }
    let table = table.ok_or_else(|| PipelineError::Usage("no cases".into()))?;
    Ok((table, labels, groups))
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EnsembleModel,
    pub split: SplitIds,
    pub validation: StudyReport,
}

/// Trains and saves a bundle from every labeled case under `data`.
///
/// The split is stratified at the case level and grouped by participant;
/// `holdout` cases are set aside first and only their ids are stored.
pub fn train(data: &Path, out: &Path, config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let cases = list_dataset(data)?;
    let labeled: Vec<&DatasetCase> = cases.iter().filter(|c| c.label != Label::Unknown).collect();
    let labels: Vec<bool> = labeled.iter().map(|c| c.label == Label::Viable).collect();
    let groups: Vec<String> = labeled.iter().map(|c| c.participant_id.clone()).collect();
    let plan = plan_split(&labels, Some(&groups), config.holdout, config.validation_percent, config.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&k| labeled[k]).collect::<Vec<_>>();
    let (train_cases, val_cases, test_cases) = (pick(&plan.train), pick(&plan.validation), pick(&plan.test));

    let pool: Vec<&DatasetCase> = train_cases.iter().chain(&val_cases).copied().collect();
    prepare_all(&pool, config)?;
    let (table, row_labels, _) = collect_rows(&pool)?;
    let n_train_rows: usize = train_cases.iter().map(|c| table.rows.iter().filter(|r| r.case_id == c.case_id).count()).sum();
    let train_idx: Vec<usize> = (0..n_train_rows).collect();
    let val_idx: Vec<usize> = (n_train_rows..table.rows.len()).collect();

    let mut ensemble = config.ensemble;
    ensemble.seed = config.seed;
    let model = train_ensemble(&table, &row_labels, &train_idx, &val_idx, &ensemble)?;
    let ids = |cs: &[&DatasetCase]| cs.iter().map(|c| c.case_id.clone()).collect::<Vec<_>>();
    let split = SplitIds { train: ids(&train_cases), validation: ids(&val_cases), test: ids(&test_cases) };

    let outcomes = val_idx
        .iter()
        .map(|&k| model.predict(&table.names, &table.rows[k].values))
        .collect::<Result<Vec<_>, _>>()?;
    let val_labels: Vec<bool> = val_idx.iter().map(|&k| row_labels[k]).collect();
    let validation = build_report(&val_labels, &outcomes, model.vote_threshold);

    save_bundle(&model, &ensemble, &split, out)?;
    fs::write(out.join(VALIDATION_REPORT), validation.to_json())?;
    Ok(TrainOutcome { model, split, validation })
}

/// Loads a bundle written by [`train`].
pub fn load_model(path: &Path) -> Result<(EnsembleModel, BundleManifest)> {
    Ok(load_bundle(path)?)
}

/// Scores labeled cases with a trained bundle and writes the report as
/// JSON at `report` and as a Markdown table next to it.
///
/// The bundle's held-out ids are used when it has any; otherwise every
/// labeled case under `data` is evaluated.
pub fn evaluate(data: &Path, model_dir: &Path, report: Option<&Path>, config: &RunConfig) -> Result<StudyReport> {
    let (model, manifest) = load_model(model_dir)?;
    let cases = list_dataset(data)?;
    let chosen: Vec<&DatasetCase> = if manifest.split.test.is_empty() {
        cases.iter().filter(|c| c.label != Label::Unknown).collect()
    } else {
        manifest.split.test.iter().map(|id| find_case(&cases, id)).collect::<Result<_>>()?
    };
    prepare_all(&chosen, config)?;
    let (table, labels, _) = collect_rows(&chosen)?;
    let outcomes = table
        .rows
        .iter()
        .map(|r| model.predict(&table.names, &r.values))
        .collect::<Result<Vec<_>, _>>()?;
    let study = build_report(&labels, &outcomes, model.vote_threshold);
    if let Some(path) = report {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, study.to_json())?;
        fs::write(path.with_extension("md"), study.to_markdown())?;
    }
    Ok(study)
}
