//! Recall, precision, F1, average precision and IoU sweeps.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{iou, score_order, BBox, Detection};

/// Outcome of matching one image's predictions against its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(prediction index, gt index, iou)`.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// Visit predictions by descending score (ties by index); each takes the
/// unmatched ground truth of highest IoU (ties by lower index) provided
/// that IoU reaches `iou_thr`.
pub fn match_detections(preds: &[Detection], gts: &[BBox], iou_thr: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for i in score_order(preds.iter().map(|d| d.score)) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = iou(&preds[i].bbox, g);
            if v >= iou_thr && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            taken[j] = true;
            pairs.push((i, j, v));
        }
    }
    MatchResult {
        tp: pairs.len(),
        fp: preds.len() - pairs.len(),
        fn_: gts.len() - pairs.len(),
        pairs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Prf {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Recall, precision and F1 from raw counts. With no ground truth, recall
/// is 1 for an empty prediction set and 0 otherwise; with nothing
/// predicted, precision is 1 for an empty ground truth and 0 otherwise.
pub fn prf1_counts(tp: usize, fp: usize, fn_: usize) -> Prf {
    let recall = if tp + fn_ == 0 {
        if fp == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let precision = if tp + fp == 0 {
        if fn_ == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf {
        recall,
        precision,
        f1,
    }
}

pub fn prf1(m: &MatchResult) -> Prf {
    prf1_counts(m.tp, m.fp, m.fn_)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Aggregation {
    /// Pool counts over all images.
    #[default]
    Micro,
    /// Average per-image scores.
    Macro,
}

/// Dataset-level recall/precision/F1.
pub fn prf1_dataset(preds: &[Vec<Detection>], gts: &[Vec<BBox>], iou_thr: f64, agg: Aggregation) -> Prf {
    let ms: Vec<MatchResult> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| match_detections(p, g, iou_thr))
        .collect();
    match agg {
        Aggregation::Micro => {
            let (tp, fp, fn_) = ms
                .iter()
                .fold((0, 0, 0), |(a, b, c), m| (a + m.tp, b + m.fp, c + m.fn_));
            prf1_counts(tp, fp, fn_)
        }
        Aggregation::Macro => {
            let n = ms.len().max(1) as f64;
            let mut acc = Prf::default();
            for m in &ms {
                let p = prf1(m);
                acc.recall += p.recall / n;
                acc.precision += p.precision / n;
                acc.f1 += p.f1 / n;
            }
            acc
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ApMode {
    /// Area under the monotone precision envelope at every recall step.
    #[default]
    AllPoints,
    /// Mean envelope precision at recall 0, 0.1, …, 1.
    ElevenPoint,
}

/// Cumulative `(tp, rank)` after each prediction of the global
/// descending-score sweep, plus the ground-truth count.
fn sweep(preds: &[Vec<Detection>], gts: &[Vec<BBox>], iou_thr: f64) -> (Vec<usize>, usize) {
    let mut flat: Vec<(f64, bool)> = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        let m = match_detections(p, g, iou_thr);
        let mut hit = vec![false; p.len()];
        for &(i, _, _) in &m.pairs {
            hit[i] = true;
        }
        flat.extend(p.iter().zip(hit).map(|(d, h)| (d.score, h)));
    }
    let order = score_order(flat.iter().map(|f| f.0));
    let mut tp = 0;
    let cum = order
        .iter()
        .map(|&i| {
            tp += flat[i].1 as usize;
            tp
        })
        .collect();
    (cum, gts.iter().map(Vec::len).sum())
}

pub fn average_precision(preds: &[Vec<Detection>], gts: &[Vec<BBox>], iou_thr: f64) -> f64 {
    average_precision_with(preds, gts, iou_thr, ApMode::AllPoints)
}

pub fn average_precision_with(preds: &[Vec<Detection>], gts: &[Vec<BBox>], iou_thr: f64, mode: ApMode) -> f64 {
    let (cum, n_gt) = sweep(preds, gts, iou_thr);
    if n_gt == 0 {
        return if cum.is_empty() { 1.0 } else { 0.0 };
    }
    let recall: Vec<f64> = cum.iter().map(|&t| t as f64 / n_gt as f64).collect();
    let precision: Vec<f64> = cum
        .iter()
        .enumerate()
        .map(|(k, &t)| t as f64 / (k + 1) as f64)
        .collect();
    let mut env = precision;
    for k in (0..env.len().saturating_sub(1)).rev() {
        env[k] = env[k].max(env[k + 1]);
    }
    match mode {
        ApMode::AllPoints => {
            // recall rises by exactly 1/n_gt at every hit
            let mut area = 0.0;
            let mut prev = 0;
            for (&t, p) in cum.iter().zip(&env) {
                if t > prev {
                    area += p;
                    prev = t;
                }
            }
            area / n_gt as f64
        }
        ApMode::ElevenPoint => {
            let mut ap = 0.0;
            for i in 0..=10 {
                let r = i as f64 / 10.0;
                let p = recall
                    .iter()
                    .position(|&x| x >= r)
                    .map_or(0.0, |k| env[k]);
                ap += p;
            }
            ap / 11.0
        }
    }
}

/// `lo, lo + step, …, hi` (inclusive), rounded to 1e-9 so decimal steps land
/// on their nominal values.
pub fn thresholds(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) || hi < lo {
        return vec![lo];
    }
    let n = libm::round((hi - lo) / step) as usize;
    (0..=n)
        .map(|i| libm::round((lo + i as f64 * step) * 1e9) / 1e9)
        .collect()
}

pub fn map_over_range(preds: &[Vec<Detection>], gts: &[Vec<BBox>], lo: f64, hi: f64, step: f64) -> f64 {
    let ts = thresholds(lo, hi, step);
    ts.iter().map(|&t| average_precision(preds, gts, t)).sum::<f64>() / ts.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricRow {
    pub iou_thr: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub dataset: String,
    pub model: String,
    pub rows: Vec<MetricRow>,
}

pub fn iou_sweep(preds: &[Vec<Detection>], gts: &[Vec<BBox>], thresholds: &[f64], agg: Aggregation) -> Vec<MetricRow> {
    thresholds
        .iter()
        .map(|&t| {
            let p = prf1_dataset(preds, gts, t, agg);
            MetricRow {
                iou_thr: t,
                recall: p.recall,
                precision: p.precision,
                f1: p.f1,
                ap: average_precision(preds, gts, t),
            }
        })
        .collect()
}
