//! Detection metrics over a pair of score sets.
//!
//! In-distribution scores are the positives and every score is oriented so
//! that higher means more in-distribution. All metrics are percentages.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detector::calibrate_threshold;
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScorePair {
    id: Vec<f64>,
    ood: Vec<f64>,
}

impl ScorePair {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Result<Self> {
        ensure!(
            !id_scores.is_empty() && !ood_scores.is_empty(),
            Error::InvalidArgument("score sets must be non-empty".into())
        );
        ensure!(
            id_scores.iter().chain(&ood_scores).all(|s| s.is_finite()),
            Error::NonFinite("detection scores".into())
        );
        Ok(Self {
            id: id_scores,
            ood: ood_scores,
        })
    }

    pub fn id_scores(&self) -> &[f64] {
        &self.id
    }

    pub fn ood_scores(&self) -> &[f64] {
        &self.ood
    }

    /// The pair with the roles of the two sets exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            id: self.ood.clone(),
            ood: self.id.clone(),
        }
    }
}

/// Threshold and rates at a calibrated operating point.
///
/// A sample is accepted as in-distribution when its score is at least the
/// threshold, the same rule under which the threshold was calibrated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

pub fn operating_point(p: &ScorePair, tpr_target: f64) -> Result<OperatingPoint> {
    let threshold = calibrate_threshold(&p.id, tpr_target)?;
    let accepted = |s: &[f64]| s.iter().filter(|&&v| v >= threshold).count() as f64 / s.len() as f64;
    Ok(OperatingPoint {
        threshold,
        tpr: accepted(&p.id),
        fpr: accepted(&p.ood),
    })
}

/// False-positive rate (percent) at the threshold reaching `tpr_target`.
pub fn fpr_at_tpr(p: &ScorePair, tpr_target: f64) -> Result<f64> {
    Ok(100.0 * operating_point(p, tpr_target)?.fpr)
}

/// `100 · (0.5·(1 − tpr) + 0.5·fpr)`.
pub fn detection_error(tpr: f64, fpr: f64) -> Result<f64> {
    ensure!(
        (0.0..=1.0).contains(&tpr) && (0.0..=1.0).contains(&fpr),
        Error::InvalidArgument(format!("rates must lie in [0, 1], got tpr={tpr} fpr={fpr}"))
    );
    // in percent first so that e.g. (0.95, 0.05) gives exactly 5
    let (tpr, fpr) = (100.0 * tpr, 100.0 * fpr);
    Ok(0.5 * (100.0 - tpr) + 0.5 * fpr)
}

/// Detection error (percent) at the calibrated operating point.
pub fn detection_error_at(p: &ScorePair, tpr_target: f64) -> Result<f64> {
    let op = operating_point(p, tpr_target)?;
    detection_error(op.tpr, op.fpr)
}

fn cmp_f64(a: &f64, b: &f64) -> Ordering {
    a.partial_cmp(b).expect("scores are finite")
}

/// Mann–Whitney estimate of P(id > ood) + ½·P(id = ood), in percent.
pub fn auroc(p: &ScorePair) -> f64 {
    let mut all: Vec<(f64, bool)> = p
        .id
        .iter()
        .map(|&s| (s, true))
        .chain(p.ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| cmp_f64(&a.0, &b.0));

    // sum of (1-based, tie-averaged) ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let positives = all[i..j].iter().filter(|e| e.1).count();
        rank_sum += avg_rank * positives as f64;
        i = j;
    }
    let (n_pos, n_neg) = (p.id.len() as f64, p.ood.len() as f64);
    let u = rank_sum - n_pos * (n_pos + 1.0) / 2.0;
    100.0 * u / (n_pos * n_neg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positive {
    /// In-distribution samples are the positives, ranked by descending score.
    In,
    /// OOD samples are the positives, ranked by ascending score.
    Out,
}

/// Average precision Σₖ (Rₖ − Rₖ₋₁)·Pₖ over distinct thresholds, in percent.
pub fn aupr(p: &ScorePair, positive: Positive) -> f64 {
    let (pos, neg, sign) = match positive {
        Positive::In => (&p.id, &p.ood, 1.0),
        Positive::Out => (&p.ood, &p.id, -1.0),
    };
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (sign * s, true))
        .chain(neg.iter().map(|&s| (sign * s, false)))
        .collect();
    all.sort_by(|a, b| cmp_f64(&b.0, &a.0));

    let n_pos = pos.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    100.0 * ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fpr_at_tpr: f64,
    pub detection_error: f64,
    pub auroc: f64,
    pub aupr_out: f64,
    pub aupr_in: f64,
    pub tpr_target: f64,
}

pub fn report(p: &ScorePair, tpr_target: f64) -> Result<MetricsReport> {
    let op = operating_point(p, tpr_target)?;
    Ok(MetricsReport {
        fpr_at_tpr: 100.0 * op.fpr,
        detection_error: detection_error(op.tpr, op.fpr)?,
        auroc: auroc(p),
        aupr_out: aupr(p, Positive::Out),
        aupr_in: aupr(p, Positive::In),
        tpr_target,
    })
}

pub const TABLE_LABEL_WIDTH: usize = 28;

impl MetricsReport {
    pub fn table_header(tpr_target: f64) -> String {
        let fpr = format!("FPR@{:.0}%TPR", 100.0 * tpr_target);
        format!(
            "{:<w$} {:>12} {:>10} {:>8} {:>9} {:>8}",
            "method / OOD",
            fpr,
            "DetErr",
            "AUROC",
            "AUPR-Out",
            "AUPR-In",
            w = TABLE_LABEL_WIDTH
        )
    }

    /// One fixed-width row, two decimals per metric.
    pub fn table_row(&self, label: &str) -> String {
        let mut s = String::new();
        write!(
            s,
            "{:<w$} {:>12.2} {:>10.2} {:>8.2} {:>9.2} {:>8.2}",
            label,
            self.fpr_at_tpr,
            self.detection_error,
            self.auroc,
            self.aupr_out,
            self.aupr_in,
            w = TABLE_LABEL_WIDTH
        )
        .unwrap();
        s
    }
}
