//! Axis-aligned boxes in absolute pixel coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `[x, x + w) x [y, y + h)` with the origin at the top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn x1(&self) -> f64 {
        self.x + self.w
    }

    pub fn y1(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn intersection(&self, other: &Rect) -> f64 {
        let w = self.x1().min(other.x1()) - self.x.max(other.x);
        let h = self.y1().min(other.y1()) - self.y.max(other.y);
        w.max(0.0) * h.max(0.0)
    }

    /// Intersection over union; errors when either box has no area.
    pub fn iou(&self, other: &Rect) -> Result<f64> {
        for r in [self, other] {
            if !(r.w > 0.0 && r.h > 0.0) || !r.x.is_finite() || !r.y.is_finite() {
                return Err(Error::invalid(format!("iou needs a positive-area box, got {r:?}")));
            }
        }
        let inter = self.intersection(other);
        Ok(inter / (self.area() + other.area() - inter))
    }

    /// `iou` that treats degenerate boxes as non-overlapping.
    pub fn iou_or_zero(&self, other: &Rect) -> f64 {
        self.iou(other).unwrap_or(0.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let a = Rect::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = Rect::from_corners(1.0, 1.0, 3.0, 3.0);
        assert!((a.iou(&b).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(a.iou(&a).unwrap(), 1.0);
        assert_eq!(a.iou(&Rect::new(5.0, 5.0, 1.0, 1.0)).unwrap(), 0.0);
        assert!(a.iou(&Rect::new(0.0, 0.0, 0.0, 1.0)).is_err());
    }
}
