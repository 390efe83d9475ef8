//! Axis-aligned boxes on the image lattice.
//!
//! Boxes are half-open: `[x0, x1) x [y0, y1)`. A box produced from pixel
//! `(x, y)` alone is `(x, y, x + 1, y + 1)` with area 1. Coordinates are
//! real-valued so that regression outputs can be represented directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle with strictly positive area.
///
/// Serializes as a JSON array `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let invalid = |reason| Error::InvalidBox {
            x0,
            y0,
            x1,
            y1,
            reason,
        };
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(invalid("coordinates must be finite"));
        }
        if x0 < 0.0 || y0 < 0.0 {
            return Err(invalid("coordinates must be non-negative"));
        }
        if x0 >= x1 || y0 >= y1 {
            return Err(invalid("box must have positive width and height"));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Box from center and full size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn y0(&self) -> f64 {
        self.y0
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Area of the overlap, 0 when the boxes only touch or are disjoint.
    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &Self) -> f64 {
        if self == other {
            return 1.0;
        }
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// Intersect with `[0, width) x [0, height)`. `None` when nothing remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<Self> {
        Self::new(
            self.x0.max(0.0),
            self.y0.max(0.0),
            self.x1.min(width),
            self.y1.min(height),
        )
        .ok()
    }

    /// Smallest integer-aligned box containing this one.
    pub fn round_outward(&self) -> Self {
        Self {
            x0: self.x0.floor(),
            y0: self.y0.floor(),
            x1: self.x1.ceil(),
            y1: self.y1.ceil(),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from([x0, y0, x1, y1]: [f64; 4]) -> Result<Self> {
        Self::new(x0, y0, x1, y1)
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

pub fn area(b: &BoundingBox) -> f64 {
    b.area()
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Counts lattice pixels covered by both boxes.
    fn rasterized_intersection(a: &BoundingBox, b: &BoundingBox, side: usize) -> usize {
        let inside = |r: &BoundingBox, x: usize, y: usize| {
            let (px, py) = (x as f64, y as f64);
            px >= r.x0 && px < r.x1 && py >= r.y0 && py < r.y1
        };
        let mut count = 0;
        for y in 0..side {
            for x in 0..side {
                if inside(a, x, y) && inside(b, x, y) {
                    count += 1;
                }
            }
        }
        count
    }

    #[test]
    fn area_examples() {
        assert_eq!(area(&bx(0.0, 0.0, 10.0, 10.0)), 100.0);
        assert_eq!(area(&bx(5.0, 5.0, 6.0, 6.0)), 1.0);
        assert_eq!(area(&bx(0.0, 0.0, 32.0, 32.0)), 1024.0);
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        let half = iou(&a, &bx(5.0, 0.0, 15.0, 10.0));
        assert!((half - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(10.0, 0.0, 20.0, 10.0);
        assert_eq!(a.intersection_area(&b), 0.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn rejects_invalid_boxes() {
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 5.0).is_err());
        assert!(BoundingBox::new(0.0, 3.0, 2.0, 1.0).is_err());
        assert!(BoundingBox::new(-1.0, 0.0, 2.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn json_is_reading_order_array() {
        let b = bx(1.0, 2.0, 3.5, 4.0);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.0,2.0,3.5,4.0]");
        let back: BoundingBox = serde_json::from_str("[1.0,2.0,3.5,4.0]").unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<BoundingBox>("[3,2,1,0]").is_err());
    }

    #[test]
    fn clip_and_round() {
        let b = bx(2.5, 0.2, 12.0, 3.7);
        assert_eq!(b.clip(10.0, 10.0).unwrap(), bx(2.5, 0.2, 10.0, 3.7));
        assert!(b.clip(2.0, 10.0).is_none());
        assert_eq!(b.round_outward(), bx(2.0, 0.0, 12.0, 4.0));
    }

    fn int_box(side: u32) -> impl Strategy<Value = BoundingBox> {
        (0..side, 0..side, 1..=side, 1..=side).prop_filter_map("degenerate", move |(x0, y0, w, h)| {
            let x1 = (x0 + w).min(side);
            let y1 = (y0 + h).min(side);
            BoundingBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).ok()
        })
    }

    fn real_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.01..50.0f64, 0.01..50.0f64)
            .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in real_box(), b in real_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
            prop_assert_eq!(ab == 0.0, a.intersection_area(&b) == 0.0);
        }

        #[test]
        fn intersection_matches_lattice_count(a in int_box(64), b in int_box(64)) {
            let counted = rasterized_intersection(&a, &b, 64);
            prop_assert_eq!(a.intersection_area(&b), counted as f64);
        }
    }
}
