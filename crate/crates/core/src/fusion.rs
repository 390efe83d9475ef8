//! Non-maximum suppression and the teacher + CAM pseudo-label fusion rule.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{check_closed_unit, Error, Result};
use crate::geometry::BoundingBox;

pub const DEFAULT_TAU_NMS: f64 = 0.2;
pub const DEFAULT_CAM_EPOCHS: usize = 2;

/// Where a box came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Teacher,
    Cam,
    GroundTruth,
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Source::Teacher => "teacher",
            Source::Cam => "cam",
            Source::GroundTruth => "ground-truth",
        })
    }
}

/// A scored box with its provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub source: Source,
}

impl Detection {
    pub fn new(score: f64, bbox: BoundingBox, source: Source) -> Result<Self> {
        check_closed_unit("score", score)?;
        Ok(Self {
            score,
            bbox,
            source,
        })
    }
}

/// One line of a detection JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image_id: String,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub source: Source,
}

impl DetectionRecord {
    pub fn new(image_id: impl Into<String>, det: &Detection) -> Self {
        Self {
            image_id: image_id.into(),
            score: det.score,
            bbox: det.bbox,
            source: det.source,
        }
    }

    pub fn detection(&self) -> Result<Detection> {
        Detection::new(self.score, self.bbox, self.source)
    }
}

/// Descending score, lower index first on ties.
fn by_score_desc(dets: &[Detection]) -> Vec<usize> {
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

/// Greedy NMS: keep the best remaining box, drop every remaining box whose
/// IoU with it is `>= tau_nms`, repeat. Output is in descending score order.
pub fn nms(dets: &[Detection], tau_nms: f64) -> Vec<Detection> {
    let order = by_score_desc(dets);
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i]);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && dets[i].bbox.iou(&dets[j].bbox) >= tau_nms {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// The highest-scoring detection; the earliest one wins a tie.
pub fn top_detection(dets: &[Detection]) -> Result<Detection> {
    let mut best: Option<&Detection> = None;
    for d in dets {
        if best.is_none_or(|b| d.score > b.score) {
            best = Some(d);
        }
    }
    best.copied().ok_or(Error::EmptyTeacher)
}

/// Pseudo-labels for one weakly annotated image.
///
/// While `epoch < cam_epochs` the teacher's single most confident box is
/// merged with the CAM boxes and the union is suppressed with [`nms`]. An
/// empty teacher set falls back to NMS over the CAM boxes alone. From
/// `cam_epochs` on the teacher's detections are returned unchanged.
pub fn fuse_pseudo_labels(
    teacher: &[Detection],
    cam: &[Detection],
    tau_nms: f64,
    epoch: usize,
    cam_epochs: usize,
) -> Vec<Detection> {
    if epoch >= cam_epochs {
        return teacher.to_vec();
    }
    let mut pool = cam.to_vec();
    if let Ok(top) = top_detection(teacher) {
        pool.push(top);
    }
    nms(&pool, tau_nms)
}
