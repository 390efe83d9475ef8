//! Single-class detection metrics: average precision and FROC.
//!
//! A detection is a true positive when it overlaps a not-yet-matched ground
//! truth with IoU at or above the threshold. Detections are matched greedily
//! in descending score order; ties keep input order.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Detection;
use crate::geometry::BoundingBox;

pub const DEFAULT_IOU: f64 = 0.2;
pub const DEFAULT_TARGET_FPPI: f64 = 0.5;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageEval {
    pub ground_truth: Vec<BoundingBox>,
    pub detections: Vec<Detection>,
}

/// Ground truth and detections for every image, keyed by image id.
///
/// Images without lesions must still be registered so that they count toward
/// the false-positives-per-image denominator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalSet {
    images: BTreeMap<String, ImageEval>,
}

impl EvalSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_image(&mut self, image_id: impl Into<String>) {
        self.images.entry(image_id.into()).or_default();
    }

    pub fn add_ground_truth(&mut self, image_id: impl Into<String>, bbox: BoundingBox) {
        self.images
            .entry(image_id.into())
            .or_default()
            .ground_truth
            .push(bbox);
    }

    /// Fails when `image_id` was never registered.
    pub fn add_detection(&mut self, image_id: &str, det: Detection) -> Result<()> {
        let image = self
            .images
            .get_mut(image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))?;
        image.detections.push(det);
        Ok(())
    }

    pub fn images(&self) -> impl Iterator<Item = (&str, &ImageEval)> {
        self.images.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn ground_truth_count(&self) -> usize {
        self.images.values().map(|i| i.ground_truth.len()).sum()
    }

    /// Detections of every image, flagged TP/FP, in descending score order.
    fn pooled(&self, iou_thresh: f64) -> Vec<(f64, bool)> {
        let mut pooled: Vec<(f64, bool)> = self
            .images
            .values()
            .flat_map(|img| {
                let flags = match_detections(&img.ground_truth, &img.detections, iou_thresh);
                img.detections
                    .iter()
                    .zip(flags)
                    .map(|(d, tp)| (d.score, tp))
                    .collect::<Vec<_>>()
            })
            .collect();
        pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
        pooled
    }
}

fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// TP/FP flag per detection, aligned with the input order.
///
/// Each detection, visited by descending score, claims the unmatched ground
/// truth it overlaps most (lowest index on ties) if that IoU reaches
/// `iou_thresh`.
pub fn match_detections(gts: &[BoundingBox], dets: &[Detection], iou_thresh: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for i in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = dets[i].bbox.iou(gt);
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            flags[i] = true;
        }
    }
    flags
}

/// Precision/recall after each pooled detection, with its score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

pub fn precision_recall(eval: &EvalSet, iou_thresh: f64) -> Result<Vec<PrPoint>> {
    let total_gt = eval.ground_truth_count();
    if total_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    Ok(eval
        .pooled(iou_thresh)
        .into_iter()
        .map(|(score, is_tp)| {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint {
                score,
                recall: tp as f64 / total_gt as f64,
                precision: tp as f64 / (tp + fp) as f64,
            }
        })
        .collect())
}

/// Average precision over detections pooled from all images.
///
/// All-points interpolation: each recall step is weighted by the best
/// precision reached at that recall or beyond.
pub fn mean_average_precision(eval: &EvalSet, iou_thresh: f64) -> Result<f64> {
    let curve = precision_recall(eval, iou_thresh)?;
    let mut envelope = vec![0.0; curve.len()];
    let mut running = 0.0f64;
    for (i, p) in curve.iter().enumerate().rev() {
        running = running.max(p.precision);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    Ok(ap)
}

/// Operating points `(fppi, recall)`, both non-decreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrocCurve {
    points: Vec<(f64, f64)>,
}

impl FrocCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        for w in points.windows(2) {
            if w[1].0 < w[0].0 || w[1].1 < w[0].1 {
                return Err(Error::OutOfRange {
                    name: "froc point",
                    value: w[1].0,
                    range: "non-decreasing (fppi, recall)",
                });
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }
}

/// Sweeps the score threshold over every distinct detection score.
///
/// Detections scoring exactly at the threshold are included. Of several
/// points sharing one fppi only the highest recall is kept.
pub fn froc(eval: &EvalSet, iou_thresh: f64) -> Result<FrocCurve> {
    let total_gt = eval.ground_truth_count();
    if total_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let n_images = eval.image_count() as f64;
    let pooled = eval.pooled(iou_thresh);
    if pooled.is_empty() {
        return FrocCurve::new(vec![(0.0, 0.0)]);
    }
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, is_tp)) in pooled.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_at_threshold = pooled.get(i + 1).is_none_or(|next| next.0 != score);
        if !last_at_threshold {
            continue;
        }
        let point = (fp as f64 / n_images, tp as f64 / total_gt as f64);
        match points.last_mut() {
            Some(last) if last.0 == point.0 => *last = point,
            _ => points.push(point),
        }
    }
    FrocCurve::new(points)
}

/// Recall of the operating point with the largest fppi not exceeding
/// `target_fppi`; 0 when every point is over budget.
pub fn recall_at_fppi(curve: &FrocCurve, target_fppi: f64) -> Result<f64> {
    if !(target_fppi >= 0.0) {
        return Err(Error::OutOfRange {
            name: "target_fppi",
            value: target_fppi,
            range: "[0, inf)",
        });
    }
    Ok(curve
        .points
        .iter()
        .take_while(|p| p.0 <= target_fppi)
        .last()
        .map_or(0.0, |p| p.1))
}
