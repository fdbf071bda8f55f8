//! Threshold-free OOD detection metrics.
//!
//! In-distribution inputs are the positive class and a higher score means
//! "more in-distribution". Thresholds are inclusive (`score >= t`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::kernels::fsum;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("metric needs at least one in-distribution and one OOD score (got {n_id} and {n_ood})")]
    Empty { n_id: usize, n_ood: usize },
    #[error("non-finite score {0}")]
    NonFinite(f64),
    #[error("tpr level {0} outside (0, 1]")]
    Level(f64),
}

/// All four metrics plus the heatmap summary score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub auprc: f64,
    pub fpr80: f64,
    pub fpr95: f64,
    pub normalized_mean: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

/// `mean(auroc, auprc, 1 - fpr80, 1 - fpr95)`.
pub fn normalized_mean(auroc: f64, auprc: f64, fpr80: f64, fpr95: f64) -> f64 {
    (auroc + auprc + (1.0 - fpr80) + (1.0 - fpr95)) / 4.0
}

fn check(id: &[f64], ood: &[f64]) -> Result<(), MetricsError> {
    if id.is_empty() || ood.is_empty() {
        return Err(MetricsError::Empty { n_id: id.len(), n_ood: ood.len() });
    }
    if let Some(&bad) = id.iter().chain(ood).find(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite(bad));
    }
    Ok(())
}

/// Scores grouped into tie blocks in descending order: `(id_count, ood_count)`.
fn descending_blocks(id: &[f64], ood: &[f64]) -> Vec<(usize, usize)> {
    let mut all: Vec<(f64, bool)> = id.iter().map(|&s| (s, true)).chain(ood.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    let mut prev: Option<f64> = None;
    for (s, is_id) in all {
        if prev != Some(s) {
            blocks.push((0, 0));
            prev = Some(s);
        }
        let last = blocks.last_mut().expect("block pushed");
        if is_id {
            last.0 += 1;
        } else {
            last.1 += 1;
        }
    }
    blocks
}

/// `[#(id > ood) + 0.5 #(id == ood)] / (n_id n_ood)`, via one sort.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64, MetricsError> {
    check(id, ood)?;
    // Walk blocks from the top; each ID item beats every OOD item in lower
    // blocks and ties half of its own block's OOD items.
    let blocks = descending_blocks(id, ood);
    let mut ood_below = ood.len();
    let mut doubled = 0u128;
    for (a, c) in blocks {
        ood_below -= c;
        doubled += (a as u128) * (2 * ood_below as u128 + c as u128);
    }
    Ok(doubled as f64 / 2.0 / (id.len() as f64 * ood.len() as f64))
}

/// Average precision with tie blocks scored at their block-end precision.
pub fn auprc(id: &[f64], ood: &[f64]) -> Result<f64, MetricsError> {
    check(id, ood)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut hits = Vec::with_capacity(id.len());
    for (a, c) in descending_blocks(id, ood) {
        tp += a;
        fp += c;
        let precision = tp as f64 / (tp + fp) as f64;
        hits.extend(std::iter::repeat_n(precision, a));
    }
    Ok(fsum(hits) / id.len() as f64)
}

/// Fraction of OOD scores `>= t`, where `t` is the largest score keeping at
/// least `level` of the ID scores at or above it.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], level: f64) -> Result<f64, MetricsError> {
    check(id, ood)?;
    if !(level > 0.0 && level <= 1.0) {
        return Err(MetricsError::Level(level));
    }
    let mut sorted = id.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len() as f64;
    let mut threshold = sorted[sorted.len() - 1];
    let mut i = 0;
    while i < sorted.len() {
        // extend over the tie block so the count includes every equal score
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        if (j + 1) as f64 / n >= level {
            threshold = sorted[i];
            break;
        }
        i = j + 1;
    }
    let hits = ood.iter().filter(|&&s| s >= threshold).count();
    Ok(hits as f64 / ood.len() as f64)
}

/// AUROC, AUPRC, FPR at 80% and 95% TPR, and their normalized mean.
pub fn summary(id: &[f64], ood: &[f64]) -> Result<MetricReport, MetricsError> {
    let auroc = auroc(id, ood)?;
    let auprc = auprc(id, ood)?;
    let fpr80 = fpr_at_tpr(id, ood, 0.80)?;
    let fpr95 = fpr_at_tpr(id, ood, 0.95)?;
    Ok(MetricReport {
        auroc,
        auprc,
        fpr80,
        fpr95,
        normalized_mean: normalized_mean(auroc, auprc, fpr80, fpr95),
        n_id: id.len(),
        n_ood: ood.len(),
    })
}
