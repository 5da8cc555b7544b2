//! Per-family PCA + random forest voters and the voting ensemble.
//!
//! Each of the five feature families gets its own standardized PCA and a
//! 40-tree forest. On a validation split every forest receives a decision
//! threshold τ (see [`calibrate_threshold`]); at prediction time family `i`
//! votes `C_i = [p_i ≥ τ_i]` and a nodule is called viable when
//! `F = Σ C_i ≥ V`.

pub mod bundle;
pub mod forest;
pub mod pca;

use serde::{Deserialize, Serialize};

use crate::features::{Family, FeatureTable};
use crate::io::Label;

pub use bundle::{load_bundle, save_bundle, BundleManifest, SplitIds};
pub use forest::{fit_forest, ForestConfig, ForestModel};
pub use pca::{fit_pca, PcaModel};

pub const DEFAULT_VOTE_THRESHOLD: usize = 2;
pub const SPECIFICITY_TARGET: f64 = 0.95;
pub const SENSITIVITY_TARGET: f64 = 0.60;

#[derive(Debug, thiserror::Error)]
pub enum LearningError {
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("only one class present")]
    SingleClass,
    #[error("too few samples ({0})")]
    TooFewSamples(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("family {0} missing")]
    MissingFamily(Family),
    #[error("{family}: {source}")]
    Family { family: Family, source: Box<LearningError> },
    #[error("model bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A threshold with its validation performance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Whether the specificity/sensitivity targets were met.
    pub meets_targets: bool,
    /// Fallback point no better than chance (Youden J ≤ 0).
    pub low_quality: bool,
}

fn rates(p: &[f64], y: &[bool], tau: f64) -> (f64, f64) {
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (&pi, &yi) in p.iter().zip(y) {
        match (yi, pi >= tau) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    (tp as f64 / (tp + fn_) as f64, tn as f64 / (tn + fp) as f64)
}

/// Candidate thresholds: the smallest score (everything positive) and the
/// midpoints between consecutive distinct scores.
pub fn candidate_thresholds(p: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = p.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let mut out = vec![u[0]];
    out.extend(u.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    out
}

/// Picks τ on validation scores.
///
/// Among thresholds reaching `specificity > spec_target` and
/// `sensitivity > sens_target`, the most sensitive wins (ties: higher
/// specificity, then larger τ). Without such a point, the most specific
/// threshold that still has `sensitivity > 0` is taken (ties: sensitivity,
/// then larger τ).
pub fn calibrate_threshold(
    p: &[f64],
    y: &[bool],
    spec_target: f64,
    sens_target: f64,
) -> Result<OperatingPoint, LearningError> {
    if p.len() != y.len() {
        return Err(LearningError::DimensionMismatch { expected: y.len(), got: p.len() });
    }
    if !y.iter().any(|v| *v) || y.iter().all(|v| *v) {
        return Err(LearningError::SingleClass);
    }
    let scored: Vec<(f64, f64, f64)> = candidate_thresholds(p)
        .into_iter()
        .map(|t| {
            let (sens, spec) = rates(p, y, t);
            (t, sens, spec)
        })
        .collect();
    let better = |a: (f64, f64, f64), b: (f64, f64, f64)| a > b;
    let mut primary: Option<((f64, f64, f64), f64)> = None;
    let mut fallback: Option<((f64, f64, f64), f64)> = None;
    for &(t, sens, spec) in &scored {
        if spec > spec_target && sens > sens_target {
            let key = (sens, spec, t);
            if primary.is_none_or(|(k, _)| better(key, k)) {
                primary = Some((key, t));
            }
        }
        if sens > 0.0 {
            let key = (spec, sens, t);
            if fallback.is_none_or(|(k, _)| better(key, k)) {
                fallback = Some((key, t));
            }
        }
    }
    let (meets, t) = match (primary, fallback) {
        (Some((_, t)), _) => (true, t),
        (None, Some((_, t))) => (false, t),
        // the lowest candidate classifies everything positive, so sensitivity is 1 there
        (None, None) => unreachable!("lowest threshold has sensitivity 1"),
    };
    let (sens, spec) = rates(p, y, t);
    Ok(OperatingPoint {
        threshold: t,
        sensitivity: sens,
        specificity: spec,
        meets_targets: meets,
        low_quality: !meets && sens + spec - 1.0 <= 0.0,
    })
}

/// `F = Σ votes` and the label `F ≥ V`.
pub fn tally(votes: &[bool], vote_threshold: usize) -> (usize, Label) {
    let f = votes.iter().filter(|v| **v).count();
    (f, if f >= vote_threshold { Label::Viable } else { Label::Nonviable })
}

/// One family's fitted voter.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyModel {
    pub family: Family,
    pub pca: PcaModel,
    pub forest: ForestModel,
    /// SHA-256 of the newline-joined column names the model was fitted on.
    pub columns_sha256: String,
    pub validation: Option<OperatingPoint>,
}

impl FamilyModel {
    pub fn probability(&self, x: &[f64]) -> f64 {
        self.forest.predict_proba(&self.pca.transform(x))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub members: Vec<FamilyModel>,
    pub vote_threshold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationOutcome {
    pub families: Vec<Family>,
    #[serde(rename = "p")]
    pub probabilities: Vec<f64>,
    pub votes: Vec<u8>,
    #[serde(rename = "F")]
    pub f: usize,
    pub label: Label,
}

pub fn columns_digest(names: &[String]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(names.join("\n").as_bytes()))
}

impl EnsembleModel {
    pub fn new(members: Vec<FamilyModel>, vote_threshold: usize) -> Result<Self, LearningError> {
        if members.len() != Family::ALL.len() {
            return Err(LearningError::InvalidConfig(format!("{} members", members.len())));
        }
        if !(1..=members.len()).contains(&vote_threshold) {
            return Err(LearningError::InvalidConfig(format!("vote threshold {vote_threshold}")));
        }
        Ok(Self { members, vote_threshold })
    }

    /// Classifies one nodule from a row of a wide feature table with columns `names`.
    pub fn predict(&self, names: &[String], row: &[f64]) -> Result<ClassificationOutcome, LearningError> {
        let table = FeatureTable { names: names.to_vec(), rows: Vec::new() };
        let (mut probabilities, mut votes) = (Vec::new(), Vec::new());
        for m in &self.members {
            let range = table.family_range(m.family).ok_or(LearningError::MissingFamily(m.family))?;
            if columns_digest(&names[range.clone()]) != m.columns_sha256 {
                return Err(LearningError::Family {
                    family: m.family,
                    source: Box::new(LearningError::Bundle("feature columns differ from training".into())),
                });
            }
            let p = m.probability(&row[range]);
            probabilities.push(p);
            votes.push(p >= m.forest.threshold);
        }
        let (f, label) = tally(&votes, self.vote_threshold);
        Ok(ClassificationOutcome {
            families: self.members.iter().map(|m| m.family).collect(),
            probabilities,
            votes: votes.into_iter().map(u8::from).collect(),
            f,
            label,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub seed: u64,
    pub vote_threshold: usize,
    pub variance_target: f64,
    pub specificity_target: f64,
    pub sensitivity_target: f64,
    pub n_trees: usize,
    pub max_depth: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vote_threshold: DEFAULT_VOTE_THRESHOLD,
            variance_target: pca::DEFAULT_VARIANCE_TARGET,
            specificity_target: SPECIFICITY_TARGET,
            sensitivity_target: SENSITIVITY_TARGET,
            n_trees: 40,
            max_depth: 3,
        }
    }
}

impl EnsembleConfig {
    /// Forest seed of the `i`-th family.
    pub fn family_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1)
    }
}

/// Fits all five voters on `train` rows and calibrates their thresholds on `validation` rows.
pub fn train_ensemble(
    table: &FeatureTable,
    labels: &[bool],
    train: &[usize],
    validation: &[usize],
    config: &EnsembleConfig,
) -> Result<EnsembleModel, LearningError> {
    if labels.len() != table.rows.len() {
        return Err(LearningError::DimensionMismatch { expected: table.rows.len(), got: labels.len() });
    }
    let mut members = Vec::with_capacity(5);
    for (i, family) in Family::ALL.into_iter().enumerate() {
        let tag = |e: LearningError| LearningError::Family { family, source: Box::new(e) };
        let range = table.family_range(family).ok_or(LearningError::MissingFamily(family))?;
        let rows = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&k| table.rows[k].values[range.clone()].to_vec()).collect() };
        let xs = rows(train);
        let ys: Vec<bool> = train.iter().map(|&k| labels[k]).collect();
        let pca = fit_pca(&xs, config.variance_target).map_err(tag)?;
        let zs: Vec<Vec<f64>> = xs.iter().map(|r| pca.transform(r)).collect();
        let forest_cfg = ForestConfig { n_trees: config.n_trees, max_depth: config.max_depth, seed: config.family_seed(i) };
        let mut forest = fit_forest(&zs, &ys, &forest_cfg).map_err(tag)?;
        let pv: Vec<f64> = rows(validation).iter().map(|r| forest.predict_proba(&pca.transform(r))).collect();
        let yv: Vec<bool> = validation.iter().map(|&k| labels[k]).collect();
        let op = calibrate_threshold(&pv, &yv, config.specificity_target, config.sensitivity_target).map_err(tag)?;
        forest.threshold = op.threshold;
        members.push(FamilyModel {
            family,
            pca,
            forest,
            columns_sha256: columns_digest(&table.names[range]),
            validation: Some(op),
        });
    }
    EnsembleModel::new(members, config.vote_threshold)
}
