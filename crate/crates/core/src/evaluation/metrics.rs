use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::core_ops::{Disease, NUM_CLASSES};
use crate::{Error, Result};

/// Area under the ROC curve via the rank-sum (Mann-Whitney) statistic with
/// mid-ranks for ties. `None` unless both classes are present.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "auroc: one label per score");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let p = n_pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n_neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores at or above this value count as positive.
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// ROC points from the strictest threshold (`+inf`, nothing positive) down
/// to the lowest score (everything positive), one per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Option<Vec<RocPoint>> {
    assert_eq!(scores.len(), labels.len(), "roc_curve: one label per score");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![RocPoint { threshold: f64::INFINITY, sensitivity: 0.0, specificity: 1.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push(RocPoint {
            threshold: t,
            sensitivity: tp as f64 / n_pos as f64,
            specificity: 1.0 - fp as f64 / n_neg as f64,
        });
    }
    Some(pts)
}

/// Trapezoidal area under the curve in (1 − specificity, sensitivity) space.
pub fn trapezoid_area(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| {
            let dx = (1.0 - w[1].specificity) - (1.0 - w[0].specificity);
            dx * (w[0].sensitivity + w[1].sensitivity) / 2.0
        })
        .sum()
}

/// Threshold maximising Youden's J; ties go to the higher specificity.
pub fn select_threshold(curve: &[RocPoint]) -> f64 {
    let j = |p: &RocPoint| p.sensitivity + p.specificity - 1.0;
    curve
        .iter()
        .fold(None::<&RocPoint>, |best, p| match best {
            Some(b) if j(b) > j(p) || (j(b) == j(p) && b.specificity >= p.specificity) => Some(b),
            _ => Some(p),
        })
        .map(|p| p.threshold)
        .unwrap_or(0.5)
}

/// Per-disease AUROC with operating thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: [Option<f64>; NUM_CLASSES],
    pub thresholds: [f64; NUM_CLASSES],
}

impl MetricReport {
    /// `scores[i][k]` is the probability of class `k` for sample `i`.
    pub fn compute(scores: &[[f64; NUM_CLASSES]], labels: &[[bool; NUM_CLASSES]]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::contract(format!("{} score rows vs {} label rows", scores.len(), labels.len())));
        }
        let mut auc = [None; NUM_CLASSES];
        let mut thresholds = [0.5; NUM_CLASSES];
        for k in 0..NUM_CLASSES {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let l: Vec<bool> = labels.iter().map(|r| r[k]).collect();
            auc[k] = auroc(&s, &l);
            if let Some(curve) = roc_curve(&s, &l) {
                thresholds[k] = select_threshold(&curve);
            }
        }
        Ok(Self { auroc: auc, thresholds })
    }

    /// Mean over defined entries.
    pub fn mean(&self) -> Option<f64> {
        let defined: Vec<f64> = self.auroc.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn undefined(&self) -> usize {
        self.auroc.iter().filter(|a| a.is_none()).count()
    }

    /// Tab-separated table: one row per disease, a mean row, and a footer
    /// counting undefined entries.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("disease\tauroc\tthreshold\n");
        for d in Disease::ALL {
            let a = self.auroc[d.index()].map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into());
            let _ = writeln!(s, "{}\t{a}\t{}", d.name(), fmt_threshold(self.thresholds[d.index()]));
        }
        let mean = self.mean().map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into());
        let _ = writeln!(s, "Mean\t{mean}\t");
        let _ = writeln!(s, "# undefined classes excluded from mean: {}", self.undefined());
        s
    }
}

fn fmt_threshold(t: f64) -> String {
    if t.is_infinite() {
        "inf".into()
    } else {
        format!("{t:.6}")
    }
}

/// Tab-separated ROC points of one disease.
pub fn roc_table(curve: &[RocPoint]) -> String {
    let mut s = String::from("threshold\tsensitivity\tspecificity\n");
    for p in curve {
        let _ = writeln!(s, "{}\t{:.6}\t{:.6}", fmt_threshold(p.threshold), p.sensitivity, p.specificity);
    }
    s
}
