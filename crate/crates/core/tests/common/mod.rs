//! Reference implementations written from the definitions, independent of
//! the library code paths they are compared against.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, Normal};

use wsdet_core::features::FeatureGrid;
use wsdet_core::geometry::BoundingBox;
use wsdet_core::toydet::{student_objective, Example, GridDetector};
use wsdet_core::{Detection, Source};

pub fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
    BoundingBox::new(x0, y0, x1, y1).unwrap()
}

pub fn det(score: f64, b: BoundingBox, source: Source) -> Detection {
    Detection::new(score, b, source).unwrap()
}

/// Intersection over union from raw corners.
pub fn iou_ref(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (a, b) = (a.to_array(), b.to_array());
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    inter / (area_a + area_b - inter)
}

/// O(n^2) greedy suppression: repeatedly take the first maximal score,
/// keep it, drop everything overlapping it by at least `tau`.
pub fn nms_ref(dets: &[Detection], tau: f64) -> Vec<Detection> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(dets[b]);
        for i in 0..dets.len() {
            if alive[i] && iou_ref(&dets[b].bbox, &dets[i].bbox) >= tau {
                alive[i] = false;
            }
        }
    }
    kept
}

pub fn random_box<R: Rng>(rng: &mut R, extent: f64, max_side: f64) -> BoundingBox {
    let w = rng.random_range(1.0..max_side);
    let h = rng.random_range(1.0..max_side);
    let x0 = rng.random_range(0.0..extent);
    let y0 = rng.random_range(0.0..extent);
    bx(x0, y0, x0 + w, y0 + h)
}

/// Up to `max_n` detections; half the sets use coarse scores so ties occur.
pub fn random_detections<R: Rng>(rng: &mut R, max_n: usize, source: Source) -> Vec<Detection> {
    let n = rng.random_range(0..=max_n);
    let coarse = rng.random_bool(0.5);
    (0..n)
        .map(|_| {
            let score = if coarse {
                f64::from(rng.random_range(1..=5u8)) / 5.0
            } else {
                rng.random_range(0.0..=1.0)
            };
            det(score, random_box(rng, 40.0, 25.0), source)
        })
        .collect()
}

pub fn neighbours(eight: bool) -> Vec<(isize, isize)> {
    let mut n = vec![(1, 0), (-1, 0), (0, 1), (0, -1)];
    if eight {
        n.extend([(1, 1), (1, -1), (-1, 1), (-1, -1)]);
    }
    n
}

/// Components as sorted pixel lists, found by stack-based flood fill; the
/// outer list is sorted too, so partitions compare with `==`.
pub fn flood_fill_components(on: &[bool], w: usize, h: usize, eight: bool) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; on.len()];
    let mut comps = Vec::new();
    for start in 0..on.len() {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(p) = stack.pop() {
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            comp.push((x as usize, y as usize));
            for (dx, dy) in neighbours(eight) {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if on[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        comp.sort();
        comps.push(comp);
    }
    comps.sort();
    comps
}

/// Per-image ground truth and scored detections.
#[derive(Debug, Clone)]
pub struct RefImage {
    pub gts: Vec<BoundingBox>,
    pub dets: Vec<(f64, BoundingBox)>,
}

/// TP/FP counts among detections scoring at least `t`, matching each image
/// greedily in descending score (input order on ties).
fn counts_at(images: &[RefImage], t: f64, iou: f64) -> (usize, usize) {
    let (mut tp, mut fp) = (0, 0);
    for img in images {
        let mut order: Vec<usize> = (0..img.dets.len()).filter(|&i| img.dets[i].0 >= t).collect();
        order.sort_by(|&a, &b| img.dets[b].0.total_cmp(&img.dets[a].0));
        let mut used = vec![false; img.gts.len()];
        for i in order {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in img.gts.iter().enumerate() {
                let v = iou_ref(&img.dets[i].1, gt);
                if !used[g] && v >= iou && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
        }
    }
    (tp, fp)
}

fn thresholds(images: &[RefImage]) -> Vec<f64> {
    let mut t: Vec<f64> = images.iter().flat_map(|i| i.dets.iter().map(|d| d.0)).collect();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

/// Area under the all-points precision envelope, enumerating every score
/// threshold: `integral_0^1 max{P(t) : R(t) >= r} dr`, piecewise constant.
pub fn ap_oracle(images: &[RefImage], iou: f64) -> f64 {
    let total: usize = images.iter().map(|i| i.gts.len()).sum();
    let points: Vec<(f64, f64)> = thresholds(images)
        .into_iter()
        .map(|t| {
            let (tp, fp) = counts_at(images, t, iou);
            (tp as f64 / total as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect();
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let best = points
            .iter()
            .filter(|p| p.0 >= r)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        area += (r - prev) * best;
        prev = r;
    }
    area
}

/// `(fppi, recall)` at every distinct threshold, highest recall per fppi.
pub fn froc_oracle(images: &[RefImage], iou: f64) -> Vec<(f64, f64)> {
    let total: usize = images.iter().map(|i| i.gts.len()).sum();
    let n = images.len() as f64;
    let mut points: Vec<(f64, f64)> = thresholds(images)
        .into_iter()
        .map(|t| {
            let (tp, fp) = counts_at(images, t, iou);
            (fp as f64 / n, tp as f64 / total as f64)
        })
        .collect();
    if points.is_empty() {
        return vec![(0.0, 0.0)];
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    points.dedup_by(|later, first| later.0 == first.0);
    points
}

/// Random evaluation set with at least one ground truth and at most
/// `max_dets` detections, many of them near a ground truth.
pub fn random_eval_images<R: Rng>(rng: &mut R, max_dets: usize, distinct_scores: bool) -> Vec<RefImage> {
    let n_images = rng.random_range(1..=5);
    let mut images: Vec<RefImage> = (0..n_images)
        .map(|_| RefImage {
            gts: (0..rng.random_range(0..=3)).map(|_| random_box(rng, 60.0, 20.0)).collect(),
            dets: Vec::new(),
        })
        .collect();
    if images.iter().all(|i| i.gts.is_empty()) {
        images[0].gts.push(random_box(rng, 60.0, 20.0));
    }
    let n_dets = rng.random_range(0..=max_dets);
    let jitter = Normal::new(0.0, 3.0).unwrap();
    let mut used_scores = Vec::new();
    for _ in 0..n_dets {
        let i = rng.random_range(0..images.len());
        let b = match images[i].gts.len() {
            0 => random_box(rng, 60.0, 20.0),
            k if rng.random_bool(0.7) => {
                let g = images[i].gts[rng.random_range(0..k)].to_array();
                let mut c: Vec<f64> = g.iter().map(|v| v + jitter.sample(rng)).collect();
                c[0] = c[0].max(0.0);
                c[1] = c[1].max(0.0);
                c[2] = c[2].max(c[0] + 0.5);
                c[3] = c[3].max(c[1] + 0.5);
                bx(c[0], c[1], c[2], c[3])
            }
            _ => random_box(rng, 60.0, 20.0),
        };
        let score = loop {
            let s = if distinct_scores {
                rng.random_range(0.0..=1.0)
            } else {
                f64::from(rng.random_range(0..=4u8)) / 4.0
            };
            if !distinct_scores || !used_scores.contains(&s) {
                break s;
            }
        };
        used_scores.push(score);
        images[i].dets.push((score, b));
    }
    images
}

/// A random detector, batch and loss weighting for gradient checks.
pub struct GradCase {
    pub detector: GridDetector,
    pub images: Vec<FeatureGrid>,
    pub targets: Vec<Vec<Detection>>,
    pub n_supervised: usize,
    pub lambda: f64,
    pub match_iou: f64,
}

impl GradCase {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let (gw, gh) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let channels = rng.random_range(1..=4);
        let cell = 8.0;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mean: Vec<f64> = (0..channels).map(|_| normal.sample(rng)).collect();
        let var: Vec<f64> = (0..channels).map(|_| rng.random_range(0.2..3.0)).collect();
        let mut detector = GridDetector::new(gw, gh, cell, cell, mean, var).unwrap();
        for t in &mut detector.params.theta {
            *t = 0.5 * normal.sample(rng);
        }
        let n_supervised = rng.random_range(0..=3);
        let n_weak = rng.random_range(usize::from(n_supervised == 0)..=3);
        let (iw, ih) = (gw as f64 * cell, gh as f64 * cell);
        let mut images = Vec::new();
        let mut targets = Vec::new();
        for k in 0..n_supervised + n_weak {
            let values = (0..gw * gh * channels).map(|_| normal.sample(rng) as f32).collect();
            images.push(FeatureGrid::new(gw, gh, channels, values).unwrap());
            let source = if k < n_supervised { Source::GroundTruth } else { Source::Teacher };
            let boxes = (0..rng.random_range(0..=3))
                .map(|_| {
                    let w = rng.random_range(2.0..=iw);
                    let h = rng.random_range(2.0..=ih);
                    let x0 = rng.random_range(0.0..=iw - w);
                    let y0 = rng.random_range(0.0..=ih - h);
                    det(rng.random_range(0.0..=1.0), bx(x0, y0, x0 + w, y0 + h), source)
                })
                .collect();
            targets.push(boxes);
        }
        Self {
            detector,
            images,
            targets,
            n_supervised,
            lambda: rng.random_range(0.0..=1.0),
            match_iou: [0.1, 0.2, 0.5][rng.random_range(0..3)],
        }
    }

    fn batches(&self) -> (Vec<Example<'_>>, Vec<Example<'_>>) {
        let mut all: Vec<Example<'_>> = self
            .images
            .iter()
            .zip(&self.targets)
            .map(|(features, t)| Example { features, targets: t })
            .collect();
        let weak = all.split_off(self.n_supervised);
        (all, weak)
    }

    pub fn objective(&self, theta: &[f64]) -> f64 {
        let mut d = self.detector.clone();
        d.params.theta = theta.to_vec();
        let (s, w) = self.batches();
        student_objective(&d, &s, &w, self.lambda, self.match_iou).unwrap().total
    }

    pub fn analytic(&self) -> Vec<f64> {
        let (s, w) = self.batches();
        student_objective(&self.detector, &s, &w, self.lambda, self.match_iou)
            .unwrap()
            .gradient
    }

    /// Central differences with step `h`.
    pub fn numeric(&self, h: f64) -> Vec<f64> {
        let theta = self.detector.params.theta.clone();
        (0..theta.len())
            .map(|i| {
                let mut plus = theta.clone();
                let mut minus = theta.clone();
                plus[i] += h;
                minus[i] -= h;
                (self.objective(&plus) - self.objective(&minus)) / (2.0 * h)
            })
            .collect()
    }
}

/// `|a - n| / max(|a|, |n|)`, taken as 0 when both magnitudes are below
/// `floor`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs());
            if scale < floor {
                0.0
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}
