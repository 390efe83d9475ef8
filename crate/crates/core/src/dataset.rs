//! Annotation records, a seeded synthetic-lesion generator and the
//! partial-annotation splitter.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::geometry::BoundingBox;
use crate::heatmap::Heatmap;

/// Box-level or image-level annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Annotation {
    Full { boxes: Vec<BoundingBox> },
    Weak { class: u8 },
}

impl Annotation {
    /// 1 when the image contains at least one lesion.
    pub fn class(&self) -> u8 {
        match self {
            Annotation::Full { boxes } => u8::from(!boxes.is_empty()),
            Annotation::Weak { class } => *class,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub annotation: Annotation,
    pub features: FeatureGrid,
    pub heatmap: Option<Heatmap>,
    /// Image-level classifier confidence paired with the CAM boxes.
    pub classifier_score: Option<f64>,
    pub auxiliary_image_id: Option<String>,
}

impl AnnotationRecord {
    pub fn boxes(&self) -> &[BoundingBox] {
        match &self.annotation {
            Annotation::Full { boxes } => boxes,
            Annotation::Weak { .. } => &[],
        }
    }

    pub fn is_fully_annotated(&self) -> bool {
        matches!(self.annotation, Annotation::Full { .. })
    }

    /// Same record with boxes replaced by the image-level class.
    pub fn to_weak(&self) -> AnnotationRecord {
        AnnotationRecord {
            annotation: Annotation::Weak {
                class: self.annotation.class(),
            },
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    Partial { ratio: f64 },
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub fully: Vec<AnnotationRecord>,
    pub weakly: Vec<AnnotationRecord>,
    pub protocol: Protocol,
}

/// Keeps boxes on a uniformly sampled `floor(ratio * N)` records and demotes
/// the rest to image-level labels. Both lists keep the input order.
pub fn split_partial(records: &[AnnotationRecord], ratio: f64, seed: u64) -> Result<SplitDataset> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::OutOfRange {
            name: "ratio",
            value: ratio,
            range: "(0, 1]",
        });
    }
    if let Some(r) = records.iter().find(|r| !r.is_fully_annotated()) {
        return Err(Error::NotFullyAnnotated(r.image_id.clone()));
    }

    // Tolerate representation error such as 0.3 * 10 = 2.9999999999999996.
    let keep = ((ratio * records.len() as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut selected = vec![false; records.len()];
    for &i in &order[..keep] {
        selected[i] = true;
    }

    let (mut fully, mut weakly) = (Vec::new(), Vec::new());
    for (r, keep) in records.iter().zip(selected) {
        if keep {
            fully.push(r.clone());
        } else {
            weakly.push(r.to_weak());
        }
    }
    let protocol = if weakly.is_empty() {
        Protocol::Full
    } else {
        Protocol::Partial { ratio }
    };
    Ok(SplitDataset {
        fully,
        weakly,
        protocol,
    })
}

/// Knobs of the synthetic lesion generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub cell_size: usize,
    pub max_blobs: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    /// Std of additive pixel noise before feature extraction.
    pub pixel_noise: f64,
    /// Std of the blob displacement in the auxiliary view.
    pub aux_shift: f64,
    /// Gaussian blur applied to the lesion indicator to form the CAM.
    pub cam_blur: f64,
    /// Std of additive CAM noise.
    pub cam_noise: f64,
    /// Std of the CAM's localisation error, in pixels.
    pub cam_shift: f64,
    /// Probability that the CAM misses a lesion.
    pub cam_miss_rate: f64,
    /// Range of the image-level classifier score on lesion images.
    pub classifier_score_min: f64,
    pub classifier_score_max: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            cell_size: 8,
            max_blobs: 3,
            sigma_min: 2.0,
            sigma_max: 3.5,
            amplitude_min: 0.6,
            amplitude_max: 1.0,
            pixel_noise: 0.1,
            aux_shift: 1.0,
            cam_blur: 1.5,
            cam_noise: 0.05,
            cam_shift: 1.0,
            cam_miss_rate: 0.1,
            classifier_score_min: 0.6,
            classifier_score_max: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn low_noise() -> Self {
        Self {
            pixel_noise: 0.02,
            cam_noise: 0.01,
            cam_shift: 0.0,
            cam_miss_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.cell_size
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.cell_size
    }

    /// Channels per view: mean, max, centroid dx, centroid dy.
    pub const VIEW_CHANNELS: usize = 4;

    pub fn channels(&self) -> usize {
        2 * Self::VIEW_CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.cell_size == 0 {
            problems.push("cell_size must be positive".to_string());
        } else if self.width % self.cell_size != 0 || self.height % self.cell_size != 0 {
            problems.push(format!(
                "width and height ({}x{}) must be multiples of cell_size {}",
                self.width, self.height, self.cell_size
            ));
        }
        if self.width == 0 || self.height == 0 {
            problems.push("width and height must be positive".to_string());
        }
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max) {
            problems.push("need 0 < sigma_min <= sigma_max".to_string());
        }
        if !(self.amplitude_min > 0.0 && self.amplitude_min <= self.amplitude_max) {
            problems.push("need 0 < amplitude_min <= amplitude_max".to_string());
        }
        for (name, v) in [
            ("pixel_noise", self.pixel_noise),
            ("aux_shift", self.aux_shift),
            ("cam_blur", self.cam_blur),
            ("cam_noise", self.cam_noise),
            ("cam_shift", self.cam_shift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be a finite non-negative number"));
            }
        }
        if !(0.0..=1.0).contains(&self.cam_miss_rate) {
            problems.push("cam_miss_rate must lie in [0, 1]".to_string());
        }
        if !(0.0 <= self.classifier_score_min
            && self.classifier_score_min <= self.classifier_score_max
            && self.classifier_score_max <= 1.0)
        {
            problems.push("need 0 <= classifier_score_min <= classifier_score_max <= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// Half-maximum radius of an isotropic Gaussian with std `sigma`.
pub fn half_max_radius(sigma: f64) -> f64 {
    sigma * (2.0 * std::f64::consts::LN_2).sqrt()
}

/// Ground-truth box of a blob: the half-maximum disc's bounds, clipped.
pub fn blob_box(cx: f64, cy: f64, sigma: f64, width: usize, height: usize) -> Option<BoundingBox> {
    let r = half_max_radius(sigma);
    BoundingBox::new(
        (cx - r).max(0.0),
        (cy - r).max(0.0),
        (cx + r).min(width as f64),
        (cy + r).min(height as f64),
    )
    .ok()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

fn render(blobs: &[Blob], width: usize, height: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut img = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = 0.0;
            for b in blobs {
                let d2 = (px - b.cx).powi(2) + (py - b.cy).powi(2);
                v += b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
            }
            if noise > 0.0 {
                v += normal.sample(rng);
            }
            img[y * width + x] = v;
        }
    }
    img
}

fn cell_features(img: &[f64], width: usize, cell: usize, gx: usize, gy: usize) -> [f32; 4] {
    let (mut sum, mut max, mut wsum, mut wx, mut wy) = (0.0, f64::MIN, 0.0, 0.0, 0.0);
    let half = cell as f64 / 2.0;
    for y in gy * cell..(gy + 1) * cell {
        for x in gx * cell..(gx + 1) * cell {
            let v = img[y * width + x];
            sum += v;
            max = max.max(v);
            let w = v.max(0.0);
            wsum += w;
            wx += w * ((x - gx * cell) as f64 + 0.5 - half);
            wy += w * ((y - gy * cell) as f64 + 0.5 - half);
        }
    }
    let n = (cell * cell) as f64;
    let (dx, dy) = if wsum > 0.0 {
        (wx / wsum / cell as f64, wy / wsum / cell as f64)
    } else {
        (0.0, 0.0)
    };
    [(sum / n) as f32, max as f32, dx as f32, dy as f32]
}

fn view_features(img: &[f64], config: &SyntheticConfig) -> Vec<f32> {
    let mut out = Vec::with_capacity(config.grid_w() * config.grid_h() * 4);
    for gy in 0..config.grid_h() {
        for gx in 0..config.grid_w() {
            out.extend_from_slice(&cell_features(img, config.width, config.cell_size, gx, gy));
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

fn blur(img: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| {
        let mut dst = vec![0.0; src.len()];
        for y in 0..height as isize {
            for x in 0..width as isize {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let off = i as isize - r;
                    let (sx, sy) = if horizontal { (x + off, y) } else { (x, y + off) };
                    if sx >= 0 && sy >= 0 && sx < width as isize && sy < height as isize {
                        acc += kv * src[sy as usize * width + sx as usize];
                    }
                }
                dst[y as usize * width + x as usize] = acc;
            }
        }
        dst
    };
    pass(&pass(img, true), false)
}

fn synthetic_cam(blobs: &[Blob], config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<Heatmap> {
    let (w, h) = (config.width, config.height);
    let shift = Normal::new(0.0, config.cam_shift.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut indicator = vec![0.0; w * h];
    for b in blobs {
        if rng.random::<f64>() < config.cam_miss_rate {
            continue;
        }
        let (cx, cy) = if config.cam_shift > 0.0 {
            (b.cx + shift.sample(rng), b.cy + shift.sample(rng))
        } else {
            (b.cx, b.cy)
        };
        let r = half_max_radius(b.sigma);
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                if d2 <= r * r {
                    indicator[y * w + x] = 1.0;
                }
            }
        }
    }
    let mut cam = blur(&indicator, w, h, config.cam_blur);
    if config.cam_noise > 0.0 {
        let noise = Normal::new(0.0, config.cam_noise).expect("valid std");
        for v in cam.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    let peak = cam.iter().cloned().fold(0.0f64, f64::max);
    let scale = if indicator.iter().any(|&v| v > 0.0) {
        1.0 / peak
    } else {
        1.0
    };
    let values = cam.iter().map(|v| (v * scale).clamp(0.0, 1.0) as f32).collect();
    Heatmap::new(w, h, values)
}

fn plant_blobs(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let n = rng.random_range(0..=config.max_blobs);
    let margin = 2.0;
    let mut blobs: Vec<Blob> = Vec::with_capacity(n);
    let mut attempts = 0;
    while blobs.len() < n && attempts < 100 {
        attempts += 1;
        let sigma = rng.random_range(config.sigma_min..=config.sigma_max);
        let amplitude = rng.random_range(config.amplitude_min..=config.amplitude_max);
        let cx = rng.random_range(margin..config.width as f64 - margin);
        let cy = rng.random_range(margin..config.height as f64 - margin);
        let r = half_max_radius(sigma);
        let clear = blobs.iter().all(|b| {
            let d = ((b.cx - cx).powi(2) + (b.cy - cy).powi(2)).sqrt();
            d > r + half_max_radius(b.sigma) + 3.0
        });
        if clear {
            blobs.push(Blob {
                cx,
                cy,
                sigma,
                amplitude,
            });
        }
    }
    blobs
}

/// Synthesises one image from its own random stream.
pub fn synthesize(index: usize, seed: u64, config: &SyntheticConfig) -> Result<AnnotationRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);

    let blobs = plant_blobs(config, &mut rng);
    let main = render(&blobs, config.width, config.height, config.pixel_noise, &mut rng);
    let aux_jitter = Normal::new(0.0, config.aux_shift.max(f64::MIN_POSITIVE)).expect("valid std");
    let aux_blobs: Vec<Blob> = blobs
        .iter()
        .map(|b| {
            if config.aux_shift > 0.0 {
                Blob {
                    cx: b.cx + aux_jitter.sample(&mut rng),
                    cy: b.cy + aux_jitter.sample(&mut rng),
                    ..*b
                }
            } else {
                *b
            }
        })
        .collect();
    let aux = render(&aux_blobs, config.width, config.height, config.pixel_noise, &mut rng);

    let (gw, gh) = (config.grid_w(), config.grid_h());
    let main_view = FeatureGrid::new(gw, gh, SyntheticConfig::VIEW_CHANNELS, view_features(&main, config))?;
    let aux_view = FeatureGrid::new(gw, gh, SyntheticConfig::VIEW_CHANNELS, view_features(&aux, config))?;
    let features = main_view.concat(&aux_view)?;

    let heatmap = synthetic_cam(&blobs, config, &mut rng)?;
    let boxes: Vec<BoundingBox> = blobs
        .iter()
        .filter_map(|b| blob_box(b.cx, b.cy, b.sigma, config.width, config.height))
        .collect();
    let classifier_score = if boxes.is_empty() {
        rng.random_range(0.0..config.classifier_score_min.max(f64::MIN_POSITIVE))
    } else {
        rng.random_range(config.classifier_score_min..=config.classifier_score_max)
    };

    Ok(AnnotationRecord {
        image_id: format!("img-{index:05}"),
        annotation: Annotation::Full { boxes },
        features,
        heatmap: Some(heatmap),
        classifier_score: Some(classifier_score),
        auxiliary_image_id: None,
    })
}

/// `n_images` fully annotated synthetic records, identical for identical
/// `(n_images, seed, config)`.
pub fn generate_synthetic(
    n_images: usize,
    seed: u64,
    config: &SyntheticConfig,
) -> Result<Vec<AnnotationRecord>> {
    if n_images == 0 {
        return Err(Error::EmptyDataset);
    }
    config.validate()?;
    (0..n_images)
        .into_par_iter()
        .map(|i| synthesize(i, seed, config))
        .collect()
}
