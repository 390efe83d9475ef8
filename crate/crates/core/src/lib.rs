//! Pseudo-label generation, teacher-student updates and FROC evaluation for
//! semi-supervised lesion detection.

pub mod cli;
pub mod dataset;
pub mod ema;
pub mod error;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod heatmap;
pub mod io;
pub mod metrics;
pub mod toydet;

pub use error::{Error, Result};
pub use fusion::{fuse_pseudo_labels, nms, Detection, Source};
pub use geometry::{iou, BoundingBox};
pub use heatmap::{cam_to_boxes, CamBoxConfig, Connectivity, Heatmap};
