use serde::{Deserialize, Serialize};

use crate::ema::ParameterState;
use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::fusion::{nms, Detection, Source, DEFAULT_TAU_NMS};
use crate::geometry::BoundingBox;

/// Added to the running variance before taking the square root.
pub const NORM_EPS: f64 = 1e-5;
/// Largest log-scale offset accepted when decoding a box.
pub const MAX_LOG_SCALE: f64 = 4.0;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;

/// Offsets per cell: dx, dy, log dw, log dh.
pub const BOX_DIMS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    pub score_threshold: f64,
    pub tau_nms: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            tau_nms: DEFAULT_TAU_NMS,
        }
    }
}

/// Per-cell linear classifier and box regressor over normalized features.
///
/// Each cell sees `[1, (x - mean) / sqrt(var + eps)]` where `x` are the
/// cell's raw feature channels and `(mean, var)` are the running
/// normalization statistics stored in [`ParameterState`]. The cell's
/// parameter block is `[cls (F) | dx (F) | dy (F) | dw (F) | dh (F)]` with
/// `F = channels + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDetector {
    grid_w: usize,
    grid_h: usize,
    cell_w: f64,
    cell_h: f64,
    channels: usize,
    pub params: ParameterState,
}

pub(crate) struct CellOutput {
    pub inputs: Vec<f64>,
    pub logit: f64,
    pub offsets: [f64; BOX_DIMS],
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl GridDetector {
    /// Zero weights with the given normalization statistics.
    pub fn new(
        grid_w: usize,
        grid_h: usize,
        cell_w: f64,
        cell_h: f64,
        norm_mean: Vec<f64>,
        norm_var: Vec<f64>,
    ) -> Result<Self> {
        let channels = norm_mean.len();
        let theta = vec![0.0; grid_w * grid_h * (1 + BOX_DIMS) * (channels + 1)];
        Self::with_params(
            grid_w,
            grid_h,
            cell_w,
            cell_h,
            ParameterState::new(theta, norm_mean, norm_var)?,
        )
    }

    pub fn with_params(
        grid_w: usize,
        grid_h: usize,
        cell_w: f64,
        cell_h: f64,
        params: ParameterState,
    ) -> Result<Self> {
        let mut problems = Vec::new();
        if grid_w == 0 || grid_h == 0 {
            problems.push(format!("grid must be non-empty, got {grid_w}x{grid_h}"));
        }
        if !(cell_w > 0.0 && cell_h > 0.0) {
            problems.push(format!("cell size must be positive, got {cell_w}x{cell_h}"));
        }
        if !problems.is_empty() {
            return Err(Error::InvalidConfig(problems));
        }
        params.validate()?;
        let channels = params.norm_mean.len();
        let expected = grid_w * grid_h * (1 + BOX_DIMS) * (channels + 1);
        if params.theta.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "theta",
                expected,
                actual: params.theta.len(),
            });
        }
        Ok(Self {
            grid_w,
            grid_h,
            cell_w,
            cell_h,
            channels,
            params,
        })
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Input width per cell, including the constant bias input.
    pub fn feature_dim(&self) -> usize {
        self.channels + 1
    }

    pub fn image_size(&self) -> (f64, f64) {
        (self.grid_w as f64 * self.cell_w, self.grid_h as f64 * self.cell_h)
    }

    pub(crate) fn block(&self, cell: usize) -> usize {
        cell * (1 + BOX_DIMS) * self.feature_dim()
    }

    pub fn anchor(&self, cell: usize) -> BoundingBox {
        let (gx, gy) = ((cell % self.grid_w) as f64, (cell / self.grid_w) as f64);
        BoundingBox::new(
            gx * self.cell_w,
            gy * self.cell_h,
            (gx + 1.0) * self.cell_w,
            (gy + 1.0) * self.cell_h,
        )
        .expect("cell extent is a valid box")
    }

    pub fn check_input(&self, image: &FeatureGrid) -> Result<()> {
        if image.grid_w() != self.grid_w || image.grid_h() != self.grid_h {
            return Err(Error::DimensionMismatch {
                what: "feature grid cells",
                expected: self.cells(),
                actual: image.cells(),
            });
        }
        if image.channels() != self.channels {
            return Err(Error::DimensionMismatch {
                what: "feature channels",
                expected: self.channels,
                actual: image.channels(),
            });
        }
        Ok(())
    }

    pub(crate) fn cell_output(&self, image: &FeatureGrid, cell: usize) -> CellOutput {
        let f = self.feature_dim();
        let mut inputs = Vec::with_capacity(f);
        inputs.push(1.0);
        for (k, &x) in image.cell(cell).iter().enumerate() {
            let mean = self.params.norm_mean[k];
            let var = self.params.norm_var[k];
            inputs.push((f64::from(x) - mean) / (var + NORM_EPS).sqrt());
        }
        let theta = &self.params.theta[self.block(cell)..self.block(cell + 1)];
        let dot = |row: usize| -> f64 {
            theta[row * f..(row + 1) * f]
                .iter()
                .zip(&inputs)
                .map(|(w, x)| w * x)
                .sum()
        };
        let logit = dot(0);
        let offsets = [dot(1), dot(2), dot(3), dot(4)];
        CellOutput {
            inputs,
            logit,
            offsets,
        }
    }

    /// Object probability per cell.
    pub fn scores(&self, image: &FeatureGrid) -> Result<Vec<f64>> {
        self.check_input(image)?;
        Ok((0..self.cells())
            .map(|c| sigmoid(self.cell_output(image, c).logit))
            .collect())
    }

    /// Applies regression offsets to a cell's anchor, clipped to the image.
    pub fn decode(&self, cell: usize, offsets: &[f64; BOX_DIMS]) -> Option<BoundingBox> {
        let anchor = self.anchor(cell);
        let (acx, acy) = anchor.center();
        let (aw, ah) = (anchor.width(), anchor.height());
        let cx = acx + offsets[0] * aw;
        let cy = acy + offsets[1] * ah;
        let w = aw * offsets[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
        let h = ah * offsets[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
        if !(cx.is_finite() && cy.is_finite()) {
            return None;
        }
        let (iw, ih) = self.image_size();
        BoundingBox::new(
            (cx - w / 2.0).max(0.0),
            (cy - h / 2.0).max(0.0),
            (cx + w / 2.0).min(iw),
            (cy + h / 2.0).min(ih),
        )
        .ok()
    }

    /// Regression target that decodes `target` exactly from this cell.
    pub fn encode(&self, cell: usize, target: &BoundingBox) -> [f64; BOX_DIMS] {
        let anchor = self.anchor(cell);
        let (acx, acy) = anchor.center();
        let (gcx, gcy) = target.center();
        [
            (gcx - acx) / anchor.width(),
            (gcy - acy) / anchor.height(),
            (target.width() / anchor.width()).ln(),
            (target.height() / anchor.height()).ln(),
        ]
    }

    /// Cells scoring strictly above the threshold, decoded and suppressed
    /// with NMS. Detections are tagged [`Source::Teacher`].
    pub fn predict(&self, image: &FeatureGrid, config: &PredictConfig) -> Result<Vec<Detection>> {
        self.check_input(image)?;
        let mut dets = Vec::new();
        for cell in 0..self.cells() {
            let out = self.cell_output(image, cell);
            let score = sigmoid(out.logit);
            if score <= config.score_threshold {
                continue;
            }
            if let Some(bbox) = self.decode(cell, &out.offsets) {
                dets.push(Detection::new(score, bbox, Source::Teacher)?);
            }
        }
        Ok(nms(&dets, config.tau_nms))
    }
}
