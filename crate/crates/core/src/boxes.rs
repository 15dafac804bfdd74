//! Axis-aligned boxes in pixel coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{PgstError, Result};

/// `(x1, y1, x2, y2)` with `x2 > x1` and `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    /// Clips to `[0, width] × [0, height]`, keeping at least a 1e-3 px extent.
    pub fn clipped(&self, width: f64, height: f64) -> Self {
        const MIN_EXTENT: f64 = 1e-3;
        let clamp_axis = |a: f64, b: f64, hi: f64| {
            let a = a.clamp(0.0, hi - MIN_EXTENT);
            let b = b.clamp(a + MIN_EXTENT, hi);
            (a, b)
        };
        let (x1, x2) = clamp_axis(self.x1, self.x2, width);
        let (y1, y2) = clamp_axis(self.y1, self.y2, height);
        Self { x1, y1, x2, y2 }
    }
}

/// Intersection over union without validity checks; degenerate boxes give 0.
pub(crate) fn iou_raw(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(PgstError::InvalidInput(format!("degenerate box {bx:?}")));
        }
    }
    Ok(iou_raw(a, b))
}

/// Regression targets `(dx, dy, dw, dh)` of `target` relative to `anchor`.
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (tx, ty) = target.center();
    [
        (tx - ax) / anchor.width(),
        (ty - ay) / anchor.height(),
        (target.width() / anchor.width()).ln(),
        (target.height() / anchor.height()).ln(),
    ]
}

/// Largest log-scale change accepted when decoding.
pub const MAX_LOG_SCALE: f64 = 4.0;

pub fn decode_deltas(anchor: &BBox, d: [f64; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let cx = ax + d[0] * anchor.width();
    let cy = ay + d[1] * anchor.height();
    let w = anchor.width() * d[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = anchor.height() * d[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_reference_values() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        assert!(iou(&a, &BBox::new(1.0, 1.0, 1.0, 2.0)).is_err());
    }

    #[test]
    fn iou_is_symmetric() {
        let a = BBox::new(0.3, 1.0, 4.0, 2.5);
        let b = BBox::new(-1.0, 0.0, 2.0, 5.0);
        assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
    }

    #[test]
    fn deltas_round_trip() {
        let anchor = BBox::from_center(16.0, 16.0, 32.0, 32.0);
        let target = BBox::new(4.0, 10.0, 30.0, 50.0);
        let back = decode_deltas(&anchor, encode_deltas(&anchor, &target));
        for (a, b) in <[f64; 4]>::from(back).iter().zip(<[f64; 4]>::from(target).iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn clipping_keeps_boxes_valid() {
        let b = BBox::new(-10.0, 100.0, -5.0, 200.0).clipped(64.0, 64.0);
        assert!(b.is_valid());
        assert!(b.within(64.0, 64.0));
    }
}
