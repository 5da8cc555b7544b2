//! Confusion counts, rank AUC, stratified splits and the study report.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::Family;
use crate::io::Label;
use crate::learning::ClassificationOutcome;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("no {0} samples")]
    EmptyClass(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("too few cases: {0}")]
    TooFewCases(String),
}

/// Nodule-level counts, positive = viable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl ConfusionCounts {
    pub fn sensitivity(&self) -> Result<f64, MetricsError> {
        match self.tp + self.fn_ {
            0 => Err(MetricsError::EmptyClass("positive")),
            p => Ok(self.tp as f64 / p as f64),
        }
    }

    pub fn specificity(&self) -> Result<f64, MetricsError> {
        match self.tn + self.fp {
            0 => Err(MetricsError::EmptyClass("negative")),
            n => Ok(self.tn as f64 / n as f64),
        }
    }
}

pub fn confusion(labels: &[bool], predictions: &[bool]) -> Result<ConfusionCounts, MetricsError> {
    if labels.len() != predictions.len() {
        return Err(MetricsError::LengthMismatch(labels.len(), predictions.len()));
    }
    let mut c = ConfusionCounts::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y, p) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fp += 1,
        }
    }
    Ok(c)
}

/// A rate as a percentage with two decimals, e.g. `68.18`.
pub fn percent(rate: f64) -> String {
    format!("{:.2}", rate * 100.0)
}

/// Area under the ROC curve via the Mann-Whitney U statistic with midranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    let p = labels.iter().filter(|l| **l).count();
    let n = labels.len() - p;
    if p == 0 {
        return Err(MetricsError::EmptyClass("positive"));
    }
    if n == 0 {
        return Err(MetricsError::EmptyClass("negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // ranks doubled so midranks stay integral
    let mut rank_sum2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        rank_sum2 += mid2 * order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        i = j + 1;
    }
    let u2 = rank_sum2 - (p * (p + 1)) as u64;
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Index partition produced by [`plan_split`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub validation_percent: u32,
    pub seed: u64,
    pub stratified: bool,
    pub grouped: bool,
}

/// Stratified shuffle split of `indices` into `(kept, held)` with about
/// `fraction` of each class held out.
///
/// With `groups`, whole groups move together; the held side is filled class
/// by class until each class target would be exceeded.
pub fn stratified_split(
    labels: &[bool],
    indices: &[usize],
    groups: Option<&[String]>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), MetricsError> {
    let pos: Vec<usize> = indices.iter().copied().filter(|&k| labels[k]).collect();
    let neg: Vec<usize> = indices.iter().copied().filter(|&k| !labels[k]).collect();
    if pos.len() < 2 || neg.len() < 2 {
        return Err(MetricsError::TooFewCases(format!("{} positive, {} negative; need 2 of each", pos.len(), neg.len())));
    }
    let target = |n: usize| ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let (tp, tn) = (target(pos.len()), target(neg.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = Vec::new();
    match groups {
        None => {
            for (mut class, t) in [(pos, tp), (neg, tn)] {
                class.shuffle(&mut rng);
                held.extend_from_slice(&class[..t]);
            }
        }
        Some(groups) => {
            let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for &k in indices {
                by_group.entry(groups[k].as_str()).or_default().push(k);
            }
            let mut keys: Vec<&str> = by_group.keys().copied().collect();
            keys.shuffle(&mut rng);
            let (mut hp, mut hn) = (0, 0);
            for key in keys {
                let members = &by_group[key];
                let gp = members.iter().filter(|&&k| labels[k]).count();
                let gn = members.len() - gp;
                if hp + gp <= tp && hn + gn <= tn && (gp + gn) > 0 {
                    hp += gp;
                    hn += gn;
                    held.extend_from_slice(members);
                }
            }
            if hp == 0 || hn == 0 {
                return Err(MetricsError::TooFewCases("groups too large for a stratified grouped split".into()));
            }
        }
    }
    held.sort_unstable();
    let kept: Vec<usize> = indices.iter().copied().filter(|k| held.binary_search(k).is_err()).collect();
    Ok((kept, held))
}

/// Optional held-out test set of `test_count` samples, then a train/validation split of the rest.
pub fn plan_split(
    labels: &[bool],
    groups: Option<&[String]>,
    test_count: usize,
    validation_percent: u32,
    seed: u64,
) -> Result<SplitPlan, MetricsError> {
    let all: Vec<usize> = (0..labels.len()).collect();
    let (pool, test) = if test_count > 0 {
        stratified_split(labels, &all, groups, test_count as f64 / labels.len() as f64, seed ^ 0x7E57)?
    } else {
        (all, Vec::new())
    };
    let (train, validation) = stratified_split(labels, &pool, groups, validation_percent as f64 / 100.0, seed)?;
    Ok(SplitPlan {
        train,
        validation,
        test,
        validation_percent,
        seed,
        stratified: true,
        grouped: groups.is_some(),
    })
}

pub const REPORT_SCHEMA: &str = "thermoviab.study_report/1";

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub approach: String,
    pub present: bool,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
    pub confusion: Option<ConfusionCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub schema: String,
    pub n_nodules: usize,
    pub n_viable: usize,
    pub n_nonviable: usize,
    pub vote_threshold: usize,
    /// Five family rows, then the ensemble.
    pub rows: Vec<ReportRow>,
    /// Ensemble AUC over the mean family probability (diagnostic).
    pub ensemble_auc_mean_p: Option<f64>,
}

fn row(approach: &str, labels: &[bool], preds: &[bool], scores: &[f64]) -> ReportRow {
    let c = confusion(labels, preds).ok();
    ReportRow {
        approach: approach.to_string(),
        present: true,
        sensitivity: c.and_then(|c| c.sensitivity().ok()),
        specificity: c.and_then(|c| c.specificity().ok()),
        auc: auc(scores, labels).ok(),
        confusion: c,
    }
}

/// Table of per-family and ensemble performance on evaluated nodules.
///
/// Family rows use the votes `C_i` for sensitivity/specificity and `p_i` for
/// AUC; the ensemble row uses the label and the vote count `F`.
pub fn build_report(labels: &[bool], outcomes: &[ClassificationOutcome], vote_threshold: usize) -> StudyReport {
    assert_eq!(labels.len(), outcomes.len(), "one outcome per label");
    let mut rows = Vec::new();
    for family in Family::ALL {
        let slot: Option<Vec<usize>> = outcomes.iter().map(|o| o.families.iter().position(|f| *f == family)).collect();
        match slot {
            Some(slot) if !outcomes.is_empty() => {
                let preds: Vec<bool> = outcomes.iter().zip(&slot).map(|(o, &i)| o.votes[i] == 1).collect();
                let scores: Vec<f64> = outcomes.iter().zip(&slot).map(|(o, &i)| o.probabilities[i]).collect();
                rows.push(row(family.name(), labels, &preds, &scores));
            }
            _ => rows.push(ReportRow {
                approach: family.name().to_string(),
                present: false,
                sensitivity: None,
                specificity: None,
                auc: None,
                confusion: None,
            }),
        }
    }
    let preds: Vec<bool> = outcomes.iter().map(|o| o.label == Label::Viable).collect();
    let f: Vec<f64> = outcomes.iter().map(|o| o.f as f64).collect();
    rows.push(row("ensemble", labels, &preds, &f));
    let mean_p: Vec<f64> =
        outcomes.iter().map(|o| o.probabilities.iter().sum::<f64>() / o.probabilities.len().max(1) as f64).collect();
    let n_viable = labels.iter().filter(|l| **l).count();
    StudyReport {
        schema: REPORT_SCHEMA.into(),
        n_nodules: labels.len(),
        n_viable,
        n_nonviable: labels.len() - n_viable,
        vote_threshold,
        rows,
        ensemble_auc_mean_p: auc(&mean_p, labels).ok(),
    }
}

impl StudyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let cell = |v: Option<f64>, pct: bool| match v {
            Some(v) if pct => percent(v),
            Some(v) => format!("{v:.4}"),
            None => "n/a".into(),
        };
        let mut s = String::from("| Approach | Sensitivity (%) | Specificity (%) | AUC |\n|---|---|---|---|\n");
        for r in &self.rows {
            if r.present {
                s += &format!("| {} | {} | {} | {} |\n", r.approach, cell(r.sensitivity, true), cell(r.specificity, true), cell(r.auc, false));
            } else {
                s += &format!("| {} | absent | absent | absent |\n", r.approach);
            }
        }
        s += &format!(
            "\n{} nodules ({} viable, {} nonviable), vote threshold V = {}.\n",
            self.n_nodules, self.n_viable, self.n_nonviable, self.vote_threshold
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut wins, mut ties, mut pairs) = (0.0, 0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        ties += 1.0;
                    }
                }
            }
        }
        (wins + 0.5 * ties) / pairs
    }

    #[test]
    fn table_fixture() {
        let mut labels = vec![true; 22];
        labels.extend(vec![false; 26]);
        let mut preds = vec![true; 15];
        preds.extend(vec![false; 7 + 25]);
        preds.push(true);
        let c = confusion(&labels, &preds).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 15, fn_: 7, tn: 25, fp: 1 });
        assert_eq!(percent(c.sensitivity().unwrap()), "68.18");
        assert_eq!(percent(c.specificity().unwrap()), "96.15");
        let all = confusion(&labels, &labels).unwrap();
        assert_eq!((all.sensitivity().unwrap(), all.specificity().unwrap()), (1.0, 1.0));
        let pos_only = confusion(&[true, true], &[true, false]).unwrap();
        assert_eq!(pos_only.specificity(), Err(MetricsError::EmptyClass("negative")));
    }

    #[test]
    fn auc_edge_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[3.0; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(auc(&[1.0, 2.0], &[true, true]).is_err());
    }

    proptest! {
        #[test]
        fn auc_equals_pair_counting(
            raw in proptest::collection::vec((0u8..6, any::<bool>()), 20),
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 * 0.25).collect();
            let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
            let a = auc(&scores, &labels).unwrap();
            prop_assert_eq!(a, pair_count_auc(&scores, &labels));
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((a + auc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
            let mono: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
            prop_assert_eq!(a, auc(&mono, &labels).unwrap());
        }

        #[test]
        fn swapping_classes_swaps_rates(raw in proptest::collection::vec((any::<bool>(), any::<bool>()), 2..40)) {
            let y: Vec<bool> = raw.iter().map(|r| r.0).collect();
            let p: Vec<bool> = raw.iter().map(|r| r.1).collect();
            let c = confusion(&y, &p).unwrap();
            let ny: Vec<bool> = y.iter().map(|v| !v).collect();
            let np: Vec<bool> = p.iter().map(|v| !v).collect();
            let s = confusion(&ny, &np).unwrap();
            prop_assert_eq!(c.sensitivity().ok(), s.specificity().ok());
            prop_assert_eq!(c.specificity().ok(), s.sensitivity().ok());
        }

        #[test]
        fn splits_keep_proportions(seed in any::<u64>(), n_pos in 10usize..60, n_neg in 10usize..60) {
            let labels: Vec<bool> = (0..n_pos + n_neg).map(|k| k < n_pos).collect();
            let plan = plan_split(&labels, None, 0, 20, seed).unwrap();
            let pool = n_pos as f64 / labels.len() as f64;
            for side in [&plan.train, &plan.validation] {
                let frac = side.iter().filter(|&&k| labels[k]).count() as f64 / side.len() as f64;
                prop_assert!((frac - pool).abs() <= 0.05 + 0.5 / side.len() as f64);
            }
            prop_assert_eq!(plan.clone(), plan_split(&labels, None, 0, 20, seed).unwrap());
        }
    }

    #[test]
    fn paper_sized_split() {
        let labels: Vec<bool> = (0..144).map(|k| k < 79).collect();
        let plan = plan_split(&labels, None, 0, 20, 3).unwrap();
        assert_eq!((plan.train.len(), plan.validation.len()), (115, 29));
        let mut all: Vec<usize> = plan.train.iter().chain(&plan.validation).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..144).collect::<Vec<_>>());
        let small: Vec<bool> = (0..10).map(|k| k < 5).collect();
        let p = plan_split(&small, None, 0, 20, 1).unwrap();
        assert_eq!((p.train.len(), p.validation.len()), (8, 2));
        assert!(p.validation.iter().any(|&k| small[k]) && p.validation.iter().any(|&k| !small[k]));
        assert!(matches!(plan_split(&[true, false, false], None, 0, 20, 0), Err(MetricsError::TooFewCases(_))));
    }

    #[test]
    fn grouped_split_keeps_participants_together() {
        let labels: Vec<bool> = (0..20).map(|k| k % 2 == 0).collect();
        let mut groups: Vec<String> = (0..20).map(|k| format!("p{k}")).collect();
        for k in [3, 4, 5] {
            groups[k] = "shared".into();
        }
        for seed in 0..20 {
            let plan = plan_split(&labels, Some(&groups), 0, 20, seed).unwrap();
            let in_val = [3, 4, 5].map(|k| plan.validation.contains(&k));
            assert!(in_val.iter().all(|v| *v) || in_val.iter().all(|v| !*v));
        }
    }

    fn outcome(p: [f64; 5], votes: [u8; 5]) -> ClassificationOutcome {
        let f = votes.iter().map(|&v| v as usize).sum();
        ClassificationOutcome {
            families: Family::ALL.to_vec(),
            probabilities: p.to_vec(),
            votes: votes.to_vec(),
            f,
            label: if f >= 2 { Label::Viable } else { Label::Nonviable },
        }
    }

    #[test]
    fn report_shape() {
        let labels = [true, false, true, false];
        let outs = [
            outcome([0.9, 0.8, 0.2, 0.7, 0.6], [1, 1, 0, 1, 1]),
            outcome([0.1, 0.2, 0.3, 0.1, 0.2], [0, 0, 0, 0, 0]),
            outcome([0.7, 0.3, 0.6, 0.2, 0.9], [1, 0, 1, 0, 1]),
            outcome([0.6, 0.1, 0.1, 0.1, 0.1], [1, 0, 0, 0, 0]),
        ];
        let r = build_report(&labels, &outs, 2);
        assert_eq!(r.rows.len(), 6);
        assert_eq!(r.rows[5].approach, "ensemble");
        assert_eq!(r.rows[5].auc, Some(1.0));
        assert_eq!(r.to_json(), build_report(&labels, &outs, 2).to_json());
        assert!(r.to_markdown().starts_with("| Approach | Sensitivity (%) | Specificity (%) | AUC |"));
        let mut partial = outs.to_vec();
        for o in &mut partial {
            o.families.pop();
            o.probabilities.pop();
            o.votes.pop();
        }
        let r = build_report(&labels, &partial, 2);
        assert_eq!(r.rows.len(), 6);
        assert!(!r.rows[4].present);
        assert!(r.to_markdown().contains("| first_order | absent | absent | absent |"));
    }
}
