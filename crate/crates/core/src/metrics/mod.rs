//! Binary segmentation metrics, significance tests and reports.
//!
//! All ratios are smoothed with `ε = 1e-8` in numerator and denominator, so
//! an image whose prediction and ground truth are both empty scores 1 on
//! IoU, Dice, recall, precision and F2.

pub mod report;
pub mod stats;

pub use report::{evaluate, ImageRow, MetricsReport, PValueRow};
pub use stats::{paired_pvalue, paired_t_test, wilcoxon_signed_rank, SignificanceTest};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SMOOTH: f64 = 1e-8;

/// Per-image pixel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &[bool], gt: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::shape("confusion", &[pred.len()], &[gt.len()]));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `v >= threshold` per element.
pub fn binarize(v: &[f64], threshold: f64) -> Vec<bool> {
    v.iter().map(|&x| x >= threshold).collect()
}

/// The six per-image scores.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub miou: f64,
    pub mdsc: f64,
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub f2: f64,
}

impl Scores {
    pub const NAMES: [&'static str; 6] = ["miou", "mdsc", "recall", "precision", "accuracy", "f2"];

    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let e = SMOOTH;
        let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
        let recall = (tp + e) / (tp + fn_ + e);
        let precision = (tp + e) / (tp + fp + e);
        let total = c.total();
        Scores {
            miou: (tp + e) / (tp + fp + fn_ + e),
            mdsc: (2.0 * tp + e) / (2.0 * tp + fp + fn_ + e),
            recall,
            precision,
            accuracy: if total == 0 { 1.0 } else { (tp + tn) / total as f64 },
            f2: (5.0 * precision * recall + e) / (4.0 * precision + recall + e),
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [self.miou, self.mdsc, self.recall, self.precision, self.accuracy, self.f2]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        Scores {
            miou: v[0],
            mdsc: v[1],
            recall: v[2],
            precision: v[3],
            accuracy: v[4],
            f2: v[5],
        }
    }

    /// Arithmetic mean of each field; all zeros for an empty slice.
    pub fn mean(rows: &[Scores]) -> Scores {
        if rows.is_empty() {
            return Scores::default();
        }
        let mut acc = [0.0; 6];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Scores::from_values(acc.map(|a| a / rows.len() as f64))
    }
}

/// Scores of a probability map against a binary mask.
pub fn score_prediction(prob: &[f64], mask: &[f64], threshold: f64) -> Result<Scores> {
    let pred = binarize(prob, threshold);
    let gt = binarize(mask, 0.5);
    Ok(Scores::from_counts(&confusion(&pred, &gt)?))
}
