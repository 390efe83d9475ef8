//! Class-activation heatmaps and their conversion into pseudo-label boxes.
//!
//! The pipeline is threshold -> connected components -> pixel-area gate ->
//! tight box per surviving component, every box paired with the image-level
//! classifier confidence.

use serde::{Deserialize, Serialize};

use crate::error::{check_closed_unit, check_open_unit, Error, Result};
use crate::fusion::{Detection, Source};
use crate::geometry::BoundingBox;

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_MIN_AREA: usize = 32 * 32;
pub const DEFAULT_MAX_AREA: usize = 1024 * 1024;

/// Dense row-major activation grid with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidHeatmap(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::DimensionMismatch {
                what: "heatmap values",
                expected: width * height,
                actual: values.len(),
            });
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidHeatmap(format!(
                "value {v} at index {i} is outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Keeps values strictly above `tau`, zeroes the rest.
    pub fn binarize(&self, tau: f64) -> Result<Heatmap> {
        check_open_unit("tau", tau)?;
        let values = self
            .values
            .iter()
            .map(|&v| if f64::from(v) > tau { v } else { 0.0 })
            .collect();
        Ok(Heatmap {
            width: self.width,
            height: self.height,
            values,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    /// All neighbour offsets `(dx, dy)`.
    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
            Connectivity::Eight => &[
                (1, 0),
                (-1, 0),
                (0, 1),
                (0, -1),
                (1, 1),
                (1, -1),
                (-1, 1),
                (-1, -1),
            ],
        }
    }

    /// Offsets to neighbours already visited in a raster scan.
    fn backward(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1)],
            Connectivity::Eight => &[(-1, 0), (-1, -1), (0, -1), (1, -1)],
        }
    }
}

impl std::str::FromStr for Connectivity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "4" => Ok(Connectivity::Four),
            "8" => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other:?}")),
        }
    }
}

/// One connected component. Pixels are `(x, y)` in raster order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentMask {
    pixels: Vec<(usize, usize)>,
}

impl ComponentMask {
    pub fn pixels(&self) -> &[(usize, usize)] {
        &self.pixels
    }

    pub fn pixel_area(&self) -> usize {
        self.pixels.len()
    }

    /// Tight half-open bounds `(min_x, min_y, max_x + 1, max_y + 1)`.
    pub fn bounding_box(&self) -> BoundingBox {
        let (mut x0, mut y0) = (usize::MAX, usize::MAX);
        let (mut x1, mut y1) = (0, 0);
        for &(x, y) in &self.pixels {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
        BoundingBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
            .expect("non-empty component has a valid box")
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new() -> Self {
        Self { parent: Vec::new() }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let grand = self.parent[self.parent[a as usize] as usize];
            self.parent[a as usize] = grand;
            a = grand;
        }
        a
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Partitions the non-zero pixels into maximal connected components.
///
/// Two-pass union-find labelling. Components are ordered by the top-left
/// corner of their bounding box (`y0`, then `x0`), ties broken by the first
/// pixel met in a raster scan.
pub fn connected_components(h: &Heatmap, connectivity: Connectivity) -> Vec<ComponentMask> {
    const NONE: u32 = u32::MAX;
    let (w, hgt) = (h.width as isize, h.height as isize);
    let mut labels = vec![NONE; h.values.len()];
    let mut sets = DisjointSet::new();

    for y in 0..hgt {
        for x in 0..w {
            let idx = (y * w + x) as usize;
            if h.values[idx] == 0.0 {
                continue;
            }
            let mut label = NONE;
            for &(dx, dy) in connectivity.backward() {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w {
                    continue;
                }
                let n = labels[(ny * w + nx) as usize];
                if n == NONE {
                    continue;
                }
                if label == NONE {
                    label = n;
                } else {
                    sets.union(label, n);
                }
            }
            labels[idx] = if label == NONE { sets.make() } else { label };
        }
    }

    // Second pass: resolve roots; components are created in order of their
    // first raster pixel.
    let mut slot_of_root = vec![NONE; sets.parent.len()];
    let mut components: Vec<Vec<(usize, usize)>> = Vec::new();
    for (idx, &label) in labels.iter().enumerate() {
        if label == NONE {
            continue;
        }
        let root = sets.find(label) as usize;
        if slot_of_root[root] == NONE {
            slot_of_root[root] = components.len() as u32;
            components.push(Vec::new());
        }
        components[slot_of_root[root] as usize].push((idx % h.width, idx / h.width));
    }

    let mut masks: Vec<ComponentMask> = components
        .into_iter()
        .map(|pixels| ComponentMask { pixels })
        .collect();
    // Stable sort keeps raster-first order among equal keys.
    masks.sort_by_key(|m| {
        let min_y = m.pixels[0].1;
        let min_x = m.pixels.iter().map(|p| p.0).min().unwrap_or(0);
        (min_y, min_x)
    });
    masks
}

/// Parameters for turning a heatmap into boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CamBoxConfig {
    pub tau: f64,
    pub min_area: usize,
    pub max_area: usize,
    pub connectivity: Connectivity,
}

impl Default for CamBoxConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            min_area: DEFAULT_MIN_AREA,
            max_area: DEFAULT_MAX_AREA,
            connectivity: Connectivity::Eight,
        }
    }
}

impl CamBoxConfig {
    /// Gates scaled for small synthetic images: at least 4 pixels, at most a
    /// quarter of the image.
    pub fn for_image(width: usize, height: usize) -> Self {
        Self {
            min_area: 4,
            max_area: (width * height / 4).max(5),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_open_unit("tau", self.tau)?;
        if self.min_area >= self.max_area {
            return Err(Error::OutOfRange {
                name: "min_area",
                value: self.min_area as f64,
                range: "[0, max_area)",
            });
        }
        Ok(())
    }
}

/// Boxes around every component whose pixel count lies in
/// `[min_area, max_area]`, each carrying `score` as its confidence.
pub fn cam_to_boxes(h: &Heatmap, config: &CamBoxConfig, score: f64) -> Result<Vec<Detection>> {
    config.validate()?;
    check_closed_unit("score", score)?;
    let binary = h.binarize(config.tau)?;
    connected_components(&binary, config.connectivity)
        .into_iter()
        .filter(|c| !(c.pixel_area() < config.min_area || c.pixel_area() > config.max_area))
        .map(|c| Detection::new(score, c.bounding_box(), Source::Cam))
        .collect()
}
