//! Axis-aligned boxes in center-size form on the unit square.

use serde::{Deserialize, Serialize};

/// `[cx, cy, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([cx, cy, w, h]: [f64; 4]) -> Self {
        Self { cx, cy, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    /// Whether the box lies inside `[0, 1]²`.
    pub fn in_unit_square(&self) -> bool {
        self.x0() >= 0.0 && self.y0() >= 0.0 && self.x1() <= 1.0 && self.y1() <= 1.0
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let ih = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Applies `(dx, dy, dw, dh)` refinement deltas:
    /// `cx + dx·w`, `cy + dy·h`, `w·e^dw`, `h·e^dh`.
    pub fn refine(&self, d: [f64; 4]) -> BBox {
        BBox {
            cx: self.cx + d[0] * self.w,
            cy: self.cy + d[1] * self.h,
            w: self.w * d[2].exp(),
            h: self.h * d[3].exp(),
        }
    }

    /// Deltas that [`BBox::refine`] maps `self` onto `target` with.
    pub fn deltas_to(&self, target: &BBox) -> [f64; 4] {
        [
            (target.cx - self.cx) / self.w,
            (target.cy - self.cy) / self.h,
            (target.w / self.w).ln(),
            (target.h / self.h).ln(),
        ]
    }
}
