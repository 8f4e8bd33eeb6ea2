//! Precision, recall, average precision and mAP over IoU thresholds.
//!
//! AP is the area under the precision-recall curve after the monotone
//! envelope has been applied (precision at recall r is the best precision
//! at any recall ≥ r), integrated exactly over every recall step. mAP is
//! the mean over classes that have ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{MasfError, Result};
use crate::postproc::{iou, BBox, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Exact area under the enveloped curve.
    #[default]
    AllPoints,
    /// Mean enveloped precision at recall 0, 0.1, …, 1.
    ElevenPoint,
}

/// Flags each detection of one image as a true positive. Detections are
/// visited by descending score (ties by position); each one takes the
/// unmatched ground truth of its class with the highest IoU (ties by lower
/// index) and is a hit when that IoU reaches `iou_threshold`. Flags are
/// returned in input order.
pub fn match_predictions(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            if v >= iou_threshold {
                used[j] = true;
                flags[i] = true;
            }
        }
    }
    flags
}

/// (P, R) with 0/0 taken as 0.
pub fn precision_recall(flags: &[bool], n_gt: usize) -> (f64, f64) {
    let tp = flags.iter().filter(|&&f| f).count() as f64;
    let p = if flags.is_empty() { 0.0 } else { tp / flags.len() as f64 };
    let r = if n_gt == 0 { 0.0 } else { tp / n_gt as f64 };
    (p, r)
}

/// Cumulative precision-recall points of a ranked list.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// (recall, precision), recall non-decreasing.
    pub points: Vec<(f64, f64)>,
    pub n_gt: usize,
}

impl PrCurve {
    pub fn new(flags_by_score: &[bool], n_gt: usize) -> Self {
        let mut tp = 0usize;
        let points = flags_by_score
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                tp += f as usize;
                let r = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
                (r, tp as f64 / (i + 1) as f64)
            })
            .collect();
        Self { points, n_gt }
    }

    /// Precision replaced by the running maximum from the right.
    pub fn envelope(&self) -> Vec<(f64, f64)> {
        let mut out = self.points.clone();
        for i in (0..out.len().saturating_sub(1)).rev() {
            out[i].1 = out[i].1.max(out[i + 1].1);
        }
        out
    }

    pub fn area(&self, interp: Interpolation) -> f64 {
        if self.n_gt == 0 {
            return 0.0;
        }
        let env = self.envelope();
        match interp {
            Interpolation::AllPoints => {
                let mut prev_r = 0.0;
                let mut ap = 0.0;
                for &(r, p) in &env {
                    ap += (r - prev_r) * p;
                    prev_r = r;
                }
                ap
            }
            Interpolation::ElevenPoint => {
                (0..=10)
                    .map(|i| {
                        let t = i as f64 / 10.0;
                        env.iter().find(|(r, _)| *r >= t - 1e-12).map_or(0.0, |&(_, p)| p)
                    })
                    .sum::<f64>()
                    / 11.0
            }
        }
    }
}

/// Area under the enveloped precision-recall curve; flags must be ordered
/// by descending score.
pub fn average_precision(flags_by_score: &[bool], n_gt: usize) -> f64 {
    PrCurve::new(flags_by_score, n_gt).area(Interpolation::AllPoints)
}

pub fn average_precision_with(flags_by_score: &[bool], n_gt: usize, interp: Interpolation) -> f64 {
    PrCurve::new(flags_by_score, n_gt).area(interp)
}

/// Mean over the given per-class APs.
pub fn mean_ap(per_class_ap: &BTreeMap<usize, f64>) -> Result<f64> {
    if per_class_ap.is_empty() {
        return Err(MasfError::NoEvaluableClasses);
    }
    Ok(per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64)
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

/// Per-class results at one IoU threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdResult {
    pub iou_threshold: f64,
    /// AP for classes with ground truth.
    pub per_class_ap: BTreeMap<usize, f64>,
    /// (P, R) for classes with ground truth.
    pub per_class_pr: BTreeMap<usize, (f64, f64)>,
    /// Classes without ground truth that still received detections.
    pub flagged: BTreeSet<usize>,
}

/// Matches every image at `iou_threshold` and pools the ranked flags per
/// class across the dataset. Ranking is by score, ties by image order and
/// then detection order, so the result does not depend on anything else.
pub fn evaluate_at(images: &[ImageEval], iou_threshold: f64, interp: Interpolation) -> ThresholdResult {
    let mut ranked: BTreeMap<usize, Vec<(f64, usize, usize, bool)>> = BTreeMap::new();
    let mut n_gt: BTreeMap<usize, usize> = BTreeMap::new();
    for (ii, im) in images.iter().enumerate() {
        for g in &im.ground_truth {
            *n_gt.entry(g.class_id).or_default() += 1;
        }
        let flags = match_predictions(&im.detections, &im.ground_truth, iou_threshold);
        for (di, (d, f)) in im.detections.iter().zip(flags).enumerate() {
            ranked.entry(d.class_id).or_default().push((d.score, ii, di, f));
        }
    }
    let mut res = ThresholdResult {
        iou_threshold,
        per_class_ap: BTreeMap::new(),
        per_class_pr: BTreeMap::new(),
        flagged: BTreeSet::new(),
    };
    for (&class, &n) in &n_gt {
        let mut list = ranked.remove(&class).unwrap_or_default();
        list.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let flags: Vec<bool> = list.iter().map(|e| e.3).collect();
        res.per_class_ap.insert(class, average_precision_with(&flags, n, interp));
        res.per_class_pr.insert(class, precision_recall(&flags, n));
    }
    res.flagged.extend(ranked.keys());
    res
}

/// (mAP@0.5, mAP@0.5:0.95).
pub fn map_over_thresholds(images: &[ImageEval]) -> Result<(f64, f64)> {
    let r = evaluate(images, Interpolation::AllPoints)?;
    Ok((r.map50, r.map5095))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP at IoU 0.5 per class with ground truth.
    pub per_class_ap: BTreeMap<usize, f64>,
    /// AP averaged over the ten thresholds, per class.
    pub per_class_ap5095: BTreeMap<usize, f64>,
    pub map50: f64,
    pub map5095: f64,
    /// Mean over classes of precision at IoU 0.5.
    pub precision: f64,
    /// Mean over classes of recall at IoU 0.5.
    pub recall: f64,
    pub params_m: Option<f64>,
    pub gflops: Option<f64>,
    /// Classes with detections but no ground truth (AP taken as 0 and
    /// excluded from the mean).
    pub flagged_classes: Vec<usize>,
    pub interpolation: Interpolation,
    pub images: usize,
}

pub fn evaluate(images: &[ImageEval], interp: Interpolation) -> Result<EvalReport> {
    let results: Vec<ThresholdResult> = iou_thresholds().iter().map(|&t| evaluate_at(images, t, interp)).collect();
    let r50 = &results[0];
    let map50 = mean_ap(&r50.per_class_ap)?;
    let mut maps = Vec::with_capacity(results.len());
    for r in &results {
        maps.push(mean_ap(&r.per_class_ap)?);
    }
    let map5095 = maps.iter().sum::<f64>() / maps.len() as f64;
    let per_class_ap5095 = r50
        .per_class_ap
        .keys()
        .map(|&c| (c, results.iter().map(|r| r.per_class_ap[&c]).sum::<f64>() / results.len() as f64))
        .collect();
    let k = r50.per_class_pr.len() as f64;
    Ok(EvalReport {
        per_class_ap: r50.per_class_ap.clone(),
        per_class_ap5095,
        map50,
        map5095,
        precision: r50.per_class_pr.values().map(|p| p.0).sum::<f64>() / k,
        recall: r50.per_class_pr.values().map(|p| p.1).sum::<f64>() / k,
        params_m: None,
        gflops: None,
        flagged_classes: r50.flagged.iter().copied().collect(),
        interpolation: interp,
        images: images.len(),
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table: P, R, mAP50 (%), mAP50:95 (%), Params (M),
    /// GFLOPs, followed by per-class AP.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>7} {:>7} {:>10} {:>13} {:>11} {:>8}",
            "P", "R", "mAP50 (%)", "mAP50:95 (%)", "Params (M)", "GFLOPs"
        );
        let _ = writeln!(
            s,
            "{:>7.3} {:>7.3} {:>10.1} {:>13.1} {:>11} {:>8}",
            self.precision,
            self.recall,
            100.0 * self.map50,
            100.0 * self.map5095,
            opt(self.params_m, 3),
            opt(self.gflops, 3)
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>7} {:>10} {:>13}", "class", "AP50 (%)", "AP50:95 (%)");
        for (c, ap) in &self.per_class_ap {
            let _ = writeln!(s, "{:>7} {:>10.1} {:>13.1}", c, 100.0 * ap, 100.0 * self.per_class_ap5095[c]);
        }
        for c in &self.flagged_classes {
            let _ = writeln!(s, "{c:>7} {:>10} {:>13}  (detections without ground truth)", "-", "-");
        }
        s
    }
}
