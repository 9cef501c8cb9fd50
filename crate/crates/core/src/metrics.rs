//! Multi-label macro-F1, micro-F1 and unweighted accuracy, and the two-level
//! (seeds within annotator, then annotators) report aggregation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::LabelSet;

/// Per-class confusion counts over a sample set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2TP / (2TP + FP + FN)`, or 0 when the denominator vanishes.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    fn merge(self, other: Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub ma_f1: f64,
    pub mi_f1: f64,
    pub ua: f64,
}

impl Scores {
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Scores>) -> Option<Scores> {
        let mut n = 0usize;
        let mut acc = (0.0, 0.0, 0.0);
        for s in items {
            acc.0 += s.ma_f1;
            acc.1 += s.mi_f1;
            acc.2 += s.ua;
            n += 1;
        }
        (n > 0).then(|| Scores {
            ma_f1: acc.0 / n as f64,
            mi_f1: acc.1 / n as f64,
            ua: acc.2 / n as f64,
        })
    }
}

impl fmt::Display for Scores {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "maF1 {:.1}  miF1 {:.1}  UA {:.1}",
            100.0 * self.ma_f1,
            100.0 * self.mi_f1,
            100.0 * self.ua
        )
    }
}

pub fn confusion(preds: &[LabelSet], gold: &[LabelSet]) -> Result<Vec<ConfusionCounts>> {
    if preds.len() != gold.len() {
        return contract(format!("{} predictions for {} gold label sets", preds.len(), gold.len()));
    }
    let Some(classes) = gold.first().map(LabelSet::classes) else {
        return contract("cannot score an empty sample set");
    };
    if preds.iter().chain(gold).any(|s| s.classes() != classes) {
        return contract("label sets disagree on class count");
    }
    let mut counts = vec![ConfusionCounts::default(); classes];
    for (p, g) in preds.iter().zip(gold) {
        for (c, (&pf, &gf)) in p.flags().iter().zip(g.flags()).enumerate() {
            let cell = &mut counts[c];
            match (pf, gf) {
                (true, true) => cell.tp += 1,
                (true, false) => cell.fp += 1,
                (false, true) => cell.fn_ += 1,
                (false, false) => cell.tn += 1,
            }
        }
    }
    Ok(counts)
}

/// Scores multi-label predictions.
///
/// maF1 averages per-class F1 over classes that occur in the gold labels or
/// the predictions; classes absent from both are skipped. UA is the mean of
/// per-class binary accuracy over all classes.
pub fn score(preds: &[LabelSet], gold: &[LabelSet]) -> Result<Scores> {
    let counts = confusion(preds, gold)?;
    let active: Vec<f64> = counts
        .iter()
        .filter(|c| c.tp + c.fp + c.fn_ > 0)
        .map(ConfusionCounts::f1)
        .collect();
    let ma_f1 = if active.is_empty() {
        0.0
    } else {
        active.iter().sum::<f64>() / active.len() as f64
    };
    let pooled = counts.iter().copied().fold(ConfusionCounts::default(), ConfusionCounts::merge);
    let ua = counts.iter().map(ConfusionCounts::accuracy).sum::<f64>() / counts.len() as f64;
    Ok(Scores {
        ma_f1,
        mi_f1: pooled.f1(),
        ua,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Seen,
    Unseen,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Seen => "seen",
            Scenario::Unseen => "unseen",
        })
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "seen" => Ok(Scenario::Seen),
            "unseen" => Ok(Scenario::Unseen),
            other => Err(format!("unknown scenario `{other}` (expected seen or unseen)")),
        }
    }
}

/// Metrics for one adaptation-then-evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub method: String,
    pub scenario: Scenario,
    pub upstream: String,
    pub annotator: String,
    pub seed: u64,
    pub shots: usize,
    #[serde(rename = "maF1")]
    pub ma_f1: f64,
    #[serde(rename = "miF1")]
    pub mi_f1: f64,
    #[serde(rename = "UA")]
    pub ua: f64,
    pub config_digest: String,
}

impl EpisodeReport {
    pub fn scores(&self) -> Scores {
        Scores {
            ma_f1: self.ma_f1,
            mi_f1: self.mi_f1,
            ua: self.ua,
        }
    }
}

/// One row of a summary table: a method at a shot count, averaged first over
/// seeds within each annotator and then over annotators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub scenario: Scenario,
    pub shots: usize,
    pub annotators: usize,
    pub episodes: usize,
    pub per_annotator: BTreeMap<String, Scores>,
    pub mean: Scores,
}

/// Two-level mean over a homogeneous group of reports.
pub fn aggregate(reports: &[EpisodeReport]) -> Result<SummaryRow> {
    let Some(first) = reports.first() else {
        return contract("cannot aggregate an empty report list");
    };
    if reports.iter().any(|r| r.scenario != first.scenario) {
        return contract("reports mix seen and unseen scenarios");
    }
    if reports.iter().any(|r| r.method != first.method || r.shots != first.shots) {
        return contract("reports mix methods or shot counts; group them first");
    }
    let mut by_annotator: BTreeMap<String, Vec<Scores>> = BTreeMap::new();
    for r in reports {
        by_annotator.entry(r.annotator.clone()).or_default().push(r.scores());
    }
    let per_annotator: BTreeMap<String, Scores> = by_annotator
        .into_iter()
        .map(|(k, v)| (k, Scores::mean(&v).expect("non-empty group")))
        .collect();
    let mean = Scores::mean(per_annotator.values()).expect("non-empty");
    Ok(SummaryRow {
        method: first.method.clone(),
        scenario: first.scenario,
        shots: first.shots,
        annotators: per_annotator.len(),
        episodes: reports.len(),
        per_annotator,
        mean,
    })
}

/// Groups reports by (method, shots), preserving first-appearance order of
/// methods, and aggregates each group.
pub fn summarize(reports: &[EpisodeReport]) -> Result<Vec<SummaryRow>> {
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut groups: BTreeMap<(String, usize), Vec<EpisodeReport>> = BTreeMap::new();
    for r in reports {
        let key = (r.method.clone(), r.shots);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r.clone());
    }
    order.iter().map(|k| aggregate(&groups[k])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls(c: usize, idx: &[usize]) -> LabelSet {
        LabelSet::from_indices(c, idx).unwrap()
    }

    fn report(annotator: &str, seed: u64, mi: f64) -> EpisodeReport {
        EpisodeReport {
            method: "m".into(),
            scenario: Scenario::Seen,
            upstream: "synthetic".into(),
            annotator: annotator.into(),
            seed,
            shots: 32,
            ma_f1: mi,
            mi_f1: mi,
            ua: mi,
            config_digest: "d".into(),
        }
    }

    #[test]
    fn hand_counted_two_class_example() {
        let gold = [ls(2, &[0]), ls(2, &[0]), ls(2, &[1]), ls(2, &[0, 1])];
        let preds = [ls(2, &[0]), ls(2, &[1]), ls(2, &[1]), ls(2, &[0])];
        let s = score(&preds, &gold).unwrap();
        assert!((s.ma_f1 - 0.65).abs() < 1e-15);
        assert!((s.mi_f1 - 6.0 / 9.0).abs() < 1e-15);
        assert!((s.ua - 0.625).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gold = [ls(3, &[0]), ls(3, &[1, 2]), ls(3, &[2])];
        let s = score(&gold, &gold).unwrap();
        assert_eq!((s.ma_f1, s.mi_f1, s.ua), (1.0, 1.0, 1.0));
    }

    #[test]
    fn single_label_micro_f1_is_accuracy() {
        let gold = [ls(3, &[0]), ls(3, &[1]), ls(3, &[2]), ls(3, &[2])];
        let preds = [ls(3, &[0]), ls(3, &[2]), ls(3, &[2]), ls(3, &[1])];
        let s = score(&preds, &gold).unwrap();
        assert!((s.mi_f1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(score(&[ls(2, &[0])], &[]).is_err());
    }

    #[test]
    fn aggregation_is_unweighted_over_annotators() {
        let mut reports = vec![report("a", 0, 0.4)];
        reports.extend((0..5).map(|s| report("b", s, 0.6)));
        let row = aggregate(&reports).unwrap();
        assert!((row.mean.mi_f1 - 0.5).abs() < 1e-15);
        assert_eq!(row.annotators, 2);
        assert_eq!(row.episodes, 6);
    }

    #[test]
    fn single_report_aggregates_to_itself() {
        let r = report("a", 0, 0.37);
        assert_eq!(aggregate(std::slice::from_ref(&r)).unwrap().mean, r.scores());
    }

    #[test]
    fn mixed_scenarios_are_rejected() {
        let mut other = report("a", 1, 0.5);
        other.scenario = Scenario::Unseen;
        assert!(aggregate(&[report("a", 0, 0.5), other]).is_err());
    }
}
