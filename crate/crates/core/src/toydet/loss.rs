//! Four-term detection loss with analytic gradients.
//!
//! Two (classification, regression) pairs are evaluated on the same cell
//! outputs. The proposal-like pair marks a cell positive when its anchor
//! overlaps a target by at least the match IoU, and additionally gives every
//! target its best-overlapping cell. The region-like pair uses the IoU rule
//! alone. Classification is binary cross-entropy summed over cells;
//! regression is smooth-L1 summed over the offsets of positive cells.

use serde::{Deserialize, Serialize};

use super::detector::{sigmoid, GridDetector, BOX_DIMS};
use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::fusion::Detection;
use crate::geometry::BoundingBox;

pub const DEFAULT_MATCH_IOU: f64 = 0.2;
pub const DEFAULT_LAMBDA: f64 = 0.25;
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls_rpn: f64,
    pub reg_rpn: f64,
    pub cls_roi: f64,
    pub reg_roi: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(cls_rpn: f64, reg_rpn: f64, cls_roi: f64, reg_roi: f64) -> Self {
        Self {
            cls_rpn,
            reg_rpn,
            cls_roi,
            reg_roi,
            total: cls_rpn + reg_rpn + cls_roi + reg_roi,
        }
    }

    pub fn add(&self, other: &LossBreakdown) -> LossBreakdown {
        LossBreakdown::new(
            self.cls_rpn + other.cls_rpn,
            self.reg_rpn + other.reg_rpn,
            self.cls_roi + other.cls_roi,
            self.reg_roi + other.reg_roi,
        )
    }

    pub fn scale(&self, by: f64) -> LossBreakdown {
        LossBreakdown::new(
            self.cls_rpn * by,
            self.reg_rpn * by,
            self.cls_roi * by,
            self.reg_roi * by,
        )
    }
}

/// `-[y log p + (1 - y) log(1 - p)]` with `p = sigmoid(z)`, stable in `z`.
pub(crate) fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub(crate) fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < SMOOTH_L1_BETA {
        0.5 * a * a / SMOOTH_L1_BETA
    } else {
        a - 0.5 * SMOOTH_L1_BETA
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < SMOOTH_L1_BETA {
        x / SMOOTH_L1_BETA
    } else {
        x.signum()
    }
}

/// Matched target index per cell, or `None` for background.
pub fn assign_targets(
    det: &GridDetector,
    targets: &[BoundingBox],
    match_iou: f64,
    best_cell_per_target: bool,
) -> Vec<Option<usize>> {
    let cells = det.cells();
    let mut assignment = vec![None; cells];
    if targets.is_empty() {
        return assignment;
    }
    let ious: Vec<Vec<f64>> = (0..cells)
        .map(|c| {
            let a = det.anchor(c);
            targets.iter().map(|t| a.iou(t)).collect()
        })
        .collect();
    for (c, row) in ious.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (t, &iou) in row.iter().enumerate() {
            if iou >= match_iou && best.is_none_or(|(_, b)| iou > b) {
                best = Some((t, iou));
            }
        }
        assignment[c] = best.map(|(t, _)| t);
    }
    if best_cell_per_target {
        for t in 0..targets.len() {
            let mut best: Option<(usize, f64)> = None;
            for (c, row) in ious.iter().enumerate() {
                if row[t] > 0.0 && best.is_none_or(|(_, b)| row[t] > b) {
                    best = Some((c, row[t]));
                }
            }
            if let Some((c, _)) = best {
                assignment[c].get_or_insert(t);
            }
        }
    }
    assignment
}

struct SlotTargets {
    labels: Vec<f64>,
    offsets: Vec<Option<[f64; BOX_DIMS]>>,
}

fn slot_targets(
    det: &GridDetector,
    targets: &[BoundingBox],
    match_iou: f64,
    best_cell_per_target: bool,
) -> SlotTargets {
    let assignment = assign_targets(det, targets, match_iou, best_cell_per_target);
    SlotTargets {
        labels: assignment
            .iter()
            .map(|a| if a.is_some() { 1.0 } else { 0.0 })
            .collect(),
        offsets: assignment
            .iter()
            .enumerate()
            .map(|(c, a)| a.map(|t| det.encode(c, &targets[t])))
            .collect(),
    }
}

/// Loss of one image against `targets`, optionally accumulating
/// `scale * d(total)/d(theta)` into `grad`.
pub(crate) fn image_loss(
    det: &GridDetector,
    image: &FeatureGrid,
    targets: &[Detection],
    match_iou: f64,
    mut grad: Option<(&mut [f64], f64)>,
) -> Result<LossBreakdown> {
    det.check_input(image)?;
    let boxes: Vec<BoundingBox> = targets.iter().map(|d| d.bbox).collect();
    let slots = [
        slot_targets(det, &boxes, match_iou, true),
        slot_targets(det, &boxes, match_iou, false),
    ];
    let f = det.feature_dim();
    let mut parts = [[0.0f64; 2]; 2];

    for cell in 0..det.cells() {
        let out = det.cell_output(image, cell);
        let p = sigmoid(out.logit);
        let mut d_logit = 0.0;
        let mut d_offsets = [0.0; BOX_DIMS];
        for (s, slot) in slots.iter().enumerate() {
            parts[s][0] += bce_with_logit(out.logit, slot.labels[cell]);
            d_logit += p - slot.labels[cell];
            if let Some(t) = slot.offsets[cell] {
                for k in 0..BOX_DIMS {
                    let diff = out.offsets[k] - t[k];
                    parts[s][1] += smooth_l1(diff);
                    d_offsets[k] += smooth_l1_grad(diff);
                }
            }
        }
        if let Some((g, scale)) = grad.as_mut() {
            let base = det.block(cell);
            for (i, x) in out.inputs.iter().enumerate() {
                g[base + i] += *scale * d_logit * x;
                for k in 0..BOX_DIMS {
                    g[base + (k + 1) * f + i] += *scale * d_offsets[k] * x;
                }
            }
        }
    }
    Ok(LossBreakdown::new(
        parts[0][0],
        parts[0][1],
        parts[1][0],
        parts[1][1],
    ))
}

/// Loss against ground-truth boxes.
pub fn supervised_loss(
    det: &GridDetector,
    image: &FeatureGrid,
    labels: &[Detection],
    match_iou: f64,
) -> Result<LossBreakdown> {
    image_loss(det, image, labels, match_iou, None)
}

/// Loss against pseudo-labels; the same computation as [`supervised_loss`].
pub fn weak_loss(
    det: &GridDetector,
    image: &FeatureGrid,
    pseudo: &[Detection],
    match_iou: f64,
) -> Result<LossBreakdown> {
    image_loss(det, image, pseudo, match_iou, None)
}

/// An image and the boxes it is trained toward.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub features: &'a FeatureGrid,
    pub targets: &'a [Detection],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub supervised: LossBreakdown,
    pub weak: LossBreakdown,
    /// `supervised.total + lambda * weak.total`
    pub total: f64,
    pub gradient: Vec<f64>,
}

/// Student objective `l_sup(batch_s) + lambda * l_wek(batch_w)` and its
/// gradient with respect to theta.
pub fn student_objective(
    student: &GridDetector,
    batch_s: &[Example<'_>],
    batch_w: &[Example<'_>],
    lambda: f64,
    match_iou: f64,
) -> Result<Objective> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::OutOfRange {
            name: "lambda",
            value: lambda,
            range: "[0, inf)",
        });
    }
    let mut gradient = vec![0.0; student.params.theta.len()];
    let mut supervised = LossBreakdown::default();
    for ex in batch_s {
        let l = image_loss(student, ex.features, ex.targets, match_iou, Some((&mut gradient, 1.0)))?;
        supervised = supervised.add(&l);
    }
    let mut weak = LossBreakdown::default();
    let mut weak_grad = vec![0.0; gradient.len()];
    for ex in batch_w {
        let l = image_loss(student, ex.features, ex.targets, match_iou, Some((&mut weak_grad, 1.0)))?;
        weak = weak.add(&l);
    }
    for (g, w) in gradient.iter_mut().zip(&weak_grad) {
        *g += lambda * w;
    }
    Ok(Objective {
        supervised,
        weak,
        total: supervised.total + lambda * weak.total,
        gradient,
    })
}

/// One gradient-descent step on the student objective.
pub fn student_step(
    student: &GridDetector,
    batch_s: &[Example<'_>],
    batch_w: &[Example<'_>],
    lambda: f64,
    lr: f64,
    match_iou: f64,
) -> Result<(GridDetector, Objective)> {
    let objective = student_objective(student, batch_s, batch_w, lambda, match_iou)?;
    if !objective.total.is_finite() {
        return Err(Error::NonFiniteLoss(objective.total));
    }
    let mut next = student.clone();
    for (t, g) in next.params.theta.iter_mut().zip(&objective.gradient) {
        *t -= lr * g;
    }
    Ok((next, objective))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Source;

    fn detector(grid: usize) -> GridDetector {
        GridDetector::new(grid, grid, 8.0, 8.0, vec![0.0], vec![1.0]).unwrap()
    }

    fn image(grid: usize) -> FeatureGrid {
        FeatureGrid::new(grid, grid, 1, vec![0.0; grid * grid]).unwrap()
    }

    fn gt(b: BoundingBox) -> Detection {
        Detection::new(1.0, b, Source::GroundTruth).unwrap()
    }

    /// Sets each cell's bias so its score is ~1 on positives and ~0 elsewhere.
    fn set_logits(det: &mut GridDetector, positive: &[usize]) {
        for c in 0..det.cells() {
            let b = det.block(c);
            det.params.theta[b] = if positive.contains(&c) { 60.0 } else { -60.0 };
        }
    }

    #[test]
    fn bce_matches_closed_form() {
        for z in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let p = sigmoid(z);
            assert!((bce_with_logit(z, 1.0) + p.ln()).abs() < 1e-12);
            assert!((bce_with_logit(z, 0.0) + (1.0 - p).ln()).abs() < 1e-12);
        }
        assert!(bce_with_logit(800.0, 1.0).is_finite());
        assert!(bce_with_logit(-800.0, 1.0).is_finite());
    }

    #[test]
    fn smooth_l1_pieces() {
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(-2.0), 1.5);
        assert_eq!(smooth_l1(1.0), 0.5);
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let mut d = detector(3);
        // Label exactly on cell 4; offsets already zero.
        let label = gt(d.anchor(4));
        set_logits(&mut d, &[4]);
        let l = supervised_loss(&d, &image(3), &[label], DEFAULT_MATCH_IOU).unwrap();
        assert!(l.total < 1e-20, "{l:?}");
    }

    #[test]
    fn empty_labels_all_negative_zero_loss() {
        let mut d = detector(3);
        set_logits(&mut d, &[]);
        let l = supervised_loss(&d, &image(3), &[], DEFAULT_MATCH_IOU).unwrap();
        assert!(l.total < 1e-20);
        assert_eq!(l.reg_rpn, 0.0);
        assert_eq!(l.reg_roi, 0.0);
    }

    #[test]
    fn half_score_on_one_wrong_cell() {
        let mut d = detector(3);
        let label = gt(d.anchor(4));
        set_logits(&mut d, &[4]);
        // Cell 0 is a negative but scores 0.5.
        let b = d.block(0);
        d.params.theta[b] = 0.0;
        let l = supervised_loss(&d, &image(3), &[label], DEFAULT_MATCH_IOU).unwrap();
        assert!((l.cls_rpn - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l.cls_roi - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(l.reg_rpn < 1e-20 && l.reg_roi < 1e-20);
    }

    #[test]
    fn total_is_sum_of_terms() {
        let d = detector(4);
        let label = gt(BoundingBox::new(3.0, 5.0, 17.0, 13.0).unwrap());
        let l = supervised_loss(&d, &image(4), &[label], DEFAULT_MATCH_IOU).unwrap();
        assert_eq!(l.total, l.cls_rpn + l.reg_rpn + l.cls_roi + l.reg_roi);
        assert!(l.reg_rpn > 0.0);
    }

    #[test]
    fn weak_and_supervised_agree() {
        let d = detector(4);
        let labels = [gt(BoundingBox::new(3.0, 5.0, 17.0, 13.0).unwrap())];
        let img = image(4);
        assert_eq!(
            weak_loss(&d, &img, &labels, 0.2).unwrap(),
            supervised_loss(&d, &img, &labels, 0.2).unwrap()
        );
        assert_eq!(weak_loss(&d, &img, &[], 0.2).unwrap().reg_rpn, 0.0);
    }

    #[test]
    fn small_target_gets_its_best_cell_in_proposal_slot_only() {
        let d = detector(4);
        // Straddles four cells, IoU with each well below 0.2.
        let small = BoundingBox::new(6.0, 6.0, 10.0, 10.0).unwrap();
        let rpn = assign_targets(&d, &[small], 0.2, true);
        let roi = assign_targets(&d, &[small], 0.2, false);
        assert_eq!(rpn.iter().filter(|a| a.is_some()).count(), 1);
        assert_eq!(rpn[0], Some(0));
        assert!(roi.iter().all(|a| a.is_none()));
    }

    #[test]
    fn step_rejects_non_finite_loss() {
        let mut d = detector(2);
        d.params.theta[1] = 1e308;
        let img = FeatureGrid::new(2, 2, 1, vec![1e3; 4]).unwrap();
        let ex = [Example {
            features: &img,
            targets: &[],
        }];
        assert!(matches!(
            student_step(&d, &ex, &[], 0.25, 0.1, 0.2),
            Err(Error::NonFiniteLoss(_))
        ));
    }

    #[test]
    fn zero_lambda_ignores_weak_branch() {
        let d = detector(3);
        let img = image(3);
        let labels = [gt(d.anchor(2))];
        let pseudo = [gt(d.anchor(6))];
        let s = [Example {
            features: &img,
            targets: &labels,
        }];
        let w = [Example {
            features: &img,
            targets: &pseudo,
        }];
        let (a, _) = student_step(&d, &s, &w, 0.0, 0.05, 0.2).unwrap();
        let (b, _) = student_step(&d, &s, &[], 0.0, 0.05, 0.2).unwrap();
        assert_eq!(a.params.theta, b.params.theta);
    }
}
