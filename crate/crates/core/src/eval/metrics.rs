use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pr_auc: f64,
    pub roc_auc: f64,
}

impl MetricsReport {
    /// CSV with one row per named report.
    pub fn write_table<W: Write>(rows: &[(String, MetricsReport)], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["ranking", "precision", "recall", "f1", "pr_auc", "roc_auc"])?;
        for (name, m) in rows {
            w.write_record([
                name.clone(),
                m.precision.to_string(),
                m.recall.to_string(),
                m.f1.to_string(),
                m.pr_auc.to_string(),
                m.roc_auc.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
        Ok(())
    }
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidConfig("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    Ok((pos, neg))
}

/// Cumulative (true positive, false positive) counts after each group of
/// tied scores, highest scores first.
fn operating_points(scores: &[f64], labels: &[bool]) -> Vec<(u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp, fp));
    }
    points
}

/// Trapezoidal area under the ROC curve. Accumulated as an exact integer
/// (twice the area in count units), so it equals the pairwise concordance
/// probability with ties counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut twice_area: u128 = 0;
    let (mut tp_prev, mut fp_prev) = (0u64, 0u64);
    for (tp, fp) in operating_points(scores, labels) {
        twice_area += u128::from(fp - fp_prev) * u128::from(tp + tp_prev);
        tp_prev = tp;
        fp_prev = fp;
    }
    Ok(twice_area as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Trapezoidal area under the precision–recall curve, starting at (0, 1).
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    let mut area = 0.0;
    let (mut r_prev, mut p_prev) = (0.0, 1.0);
    for (tp, fp) in operating_points(scores, labels) {
        let r = tp as f64 / pos as f64;
        let p = tp as f64 / (tp + fp) as f64;
        area += (r - r_prev) * (p + p_prev) / 2.0;
        r_prev = r;
        p_prev = p;
    }
    Ok(area)
}

/// Point metrics predict positive where `score >= threshold`; precision is
/// 0 when nothing is predicted positive.
pub fn metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricsReport> {
    let (pos, _) = check(scores, labels)?;
    let (mut tp, mut predicted) = (0usize, 0usize);
    for (s, l) in scores.iter().zip(labels) {
        if *s >= threshold {
            predicted += 1;
            if *l {
                tp += 1;
            }
        }
    }
    let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
    let recall = tp as f64 / pos as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricsReport {
        precision,
        recall,
        f1,
        pr_auc: pr_auc(scores, labels)?,
        roc_auc: roc_auc(scores, labels)?,
    })
}
