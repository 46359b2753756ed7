//! Segmentation metrics and evaluation protocols: Dice, per-image Max-Dice
//! (threshold sweep), global Max-Dice over a pooled corpus, and the
//! rank-statistic AUROC probe for the mask head.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::phantom::SizeClass;

/// Dice overlap of two binary masks; both empty counts as a perfect 1.0.
pub fn dice(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch { expected: vec![truth.len()], got: vec![pred.len()] });
    }
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut t = 0usize;
    for (&a, &b) in pred.iter().zip(truth) {
        let a = usize::from(a > 0);
        let b = usize::from(b > 0);
        inter += a & b;
        p += a;
        t += b;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Evenly spaced threshold grid over `[0, 1]` inclusive.
pub fn threshold_grid(n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0];
    }
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Maximum Dice over the threshold grid (`scores > theta`, strict), with ties
/// resolved toward the smallest threshold. Returns `(dice, best_threshold)`.
///
/// Thresholded counts are computed from sorted score arrays rather than by
/// re-binarizing per threshold; tests cross-check against the brute force.
pub fn max_dice(scores: &[f64], truth: &[u8], thresholds: &[f64]) -> Result<(f64, f64)> {
    if scores.len() != truth.len() {
        return Err(Error::ShapeMismatch { expected: vec![truth.len()], got: vec![scores.len()] });
    }
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("threshold grid must be non-empty"));
    }
    let mut all: Vec<f64> = scores.to_vec();
    let mut pos: Vec<f64> = scores
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t > 0)
        .map(|(&s, _)| s)
        .collect();
    all.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let truth_count = pos.len();
    pos.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite scores"));

    // index of the first element strictly greater than theta
    let count_above = |sorted: &[f64], theta: f64| -> usize {
        let mut lo = 0usize;
        let mut hi = sorted.len();
        while lo < hi {
            let mid = (lo + hi) / 2;
            if sorted[mid] > theta {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        sorted.len() - lo
    };

    let mut best = f64::MIN;
    let mut best_theta = thresholds[0];
    for &theta in thresholds {
        let p = count_above(&all, theta);
        let tp = count_above(&pos, theta);
        let d = if p + truth_count == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (p + truth_count) as f64
        };
        if d > best {
            best = d;
            best_theta = theta;
        }
    }
    Ok((best, best_theta))
}

/// Max-Dice over the whole corpus pooled into one flat prediction/truth pair.
pub fn global_max_dice(
    scores: &[&[f64]],
    truths: &[&[u8]],
    thresholds: &[f64],
) -> Result<f64> {
    if scores.len() != truths.len() {
        return Err(Error::ShapeMismatch { expected: vec![truths.len()], got: vec![scores.len()] });
    }
    if scores.is_empty() {
        return Err(Error::Degenerate("empty corpus"));
    }
    let mut pooled_scores = Vec::new();
    let mut pooled_truth = Vec::new();
    for (s, t) in scores.iter().zip(truths) {
        if s.len() != t.len() {
            return Err(Error::ShapeMismatch { expected: vec![t.len()], got: vec![s.len()] });
        }
        pooled_scores.extend_from_slice(s);
        pooled_truth.extend_from_slice(t);
    }
    Ok(max_dice(&pooled_scores, &pooled_truth, thresholds)?.0)
}

/// Area under the ROC curve by the rank statistic with average ranks for
/// ties. Returns `None` when only one class is present (undefined, not 0.5).
pub fn mask_auroc(probs: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if probs.len() != labels.len() {
        return Err(Error::ShapeMismatch { expected: vec![labels.len()], got: vec![probs.len()] });
    }
    let n_pos = labels.iter().filter(|&&l| l > 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_unstable_by(|&a, &b| probs[a].partial_cmp(&probs[b]).expect("finite probs"));
    // average ranks over tie groups, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && probs[order[j + 1]] == probs[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] > 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos as f64 * n_neg as f64)))
}

/// One evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct PerImageEval {
    pub id: String,
    pub size_class: SizeClass,
    pub max_dice: f64,
    pub best_threshold: f64,
}

/// Aggregated evaluation results for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_image: Vec<PerImageEval>,
    pub global_max_dice: f64,
    /// `(class, mean per-image Max-Dice, count)` per represented size class.
    pub per_size_class: Vec<(SizeClass, f64, usize)>,
    pub mask_auroc: Option<f64>,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn mean_max_dice(&self) -> f64 {
        if self.per_image.is_empty() {
            return 0.0;
        }
        self.per_image.iter().map(|p| p.max_dice).sum::<f64>() / self.per_image.len() as f64
    }
}

/// Builds a report from per-image scores and truths.
pub fn evaluate_corpus(
    ids: &[String],
    size_classes: &[SizeClass],
    scores: &[&[f64]],
    truths: &[&[u8]],
    thresholds: &[f64],
    mask_auroc_value: Option<f64>,
    config_fingerprint: String,
) -> Result<EvalReport> {
    if ids.len() != scores.len() || ids.len() != truths.len() || ids.len() != size_classes.len() {
        return Err(Error::InvalidArgument("evaluation inputs must have matching lengths"));
    }
    let mut per_image = Vec::with_capacity(ids.len());
    for i in 0..ids.len() {
        let (d, theta) = max_dice(scores[i], truths[i], thresholds)?;
        per_image.push(PerImageEval {
            id: ids[i].clone(),
            size_class: size_classes[i],
            max_dice: d,
            best_threshold: theta,
        });
    }
    let global = global_max_dice(scores, truths, thresholds)?;
    let mut per_size_class = Vec::new();
    for class in [SizeClass::None, SizeClass::Small, SizeClass::Medium, SizeClass::Large] {
        let vals: Vec<f64> = per_image
            .iter()
            .filter(|p| p.size_class == class)
            .map(|p| p.max_dice)
            .collect();
        if !vals.is_empty() {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            per_size_class.push((class, mean, vals.len()));
        }
    }
    Ok(EvalReport {
        per_image,
        global_max_dice: global,
        per_size_class,
        mask_auroc: mask_auroc_value,
        config_fingerprint,
    })
}
