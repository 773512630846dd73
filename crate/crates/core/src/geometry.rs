use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in top-left/size form. The unit depends on context:
/// normalized search-crop coordinates inside the network, pixels at the
/// tracker boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
    }

    pub fn from_xyxy(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn xyxy(&self) -> [f64; 4] {
        [self.x, self.y, self.x + self.w, self.y + self.h]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Area from the corners, matching [`Self::intersection`]: a box
    /// intersected with itself gives exactly this value.
    pub fn corner_area(&self) -> f64 {
        let [x1, y1, x2, y2] = self.xyxy();
        (x2 - x1).max(0.0) * (y2 - y1).max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.w, self.h]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn intersection(&self, other: &Self) -> f64 {
        let [a1, b1, a2, b2] = self.xyxy();
        let [c1, d1, c2, d2] = other.xyxy();
        let iw = (a2.min(c2) - a1.max(c1)).max(0.0);
        let ih = (b2.min(d2) - b1.max(d1)).max(0.0);
        iw * ih
    }

    /// Intersection over union; zero when either box is empty.
    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection(other);
        let union = self.corner_area() + other.corner_area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clips the box to `[0, width] x [0, height]`, keeping at least
    /// `min_size` of extent.
    pub fn clip(&self, width: f64, height: f64, min_size: f64) -> Self {
        let [x1, y1, x2, y2] = self.xyxy();
        let x1 = x1.clamp(0.0, width - min_size);
        let y1 = y1.clamp(0.0, height - min_size);
        let x2 = x2.clamp(x1 + min_size, width);
        let y2 = y2.clamp(y1 + min_size, height);
        Self::from_xyxy(x1, y1, x2, y2)
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.x * sx, self.y * sy, self.w * sx, self.h * sy)
    }

    /// Checks the normalized-box invariants: non-negative origin, positive
    /// size, and extent inside the unit square up to `eps`.
    pub fn validate_normalized(&self, eps: f64) -> Result<()> {
        let ok = self.is_finite()
            && self.x >= -eps
            && self.y >= -eps
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= 1.0 + eps
            && self.y + self.h <= 1.0 + eps;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid normalized box {self:?}"
            )))
        }
    }
}
