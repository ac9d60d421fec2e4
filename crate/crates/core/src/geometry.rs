//! Box algebra shared by the losses, the assigner and evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// IoU threshold used by [`nms`] unless the caller overrides it.
pub const DEFAULT_NMS_IOU: f64 = 0.6;

/// Axis-aligned box in image pixels, corners ordered `x1 <= x2`, `y1 <= y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 <= x2 && y1 <= y2) {
            return Err(Error::InvalidArgument(format!(
                "box corners out of order: ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Strict interior test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Ground-truth object: a box and its class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub bbox: BBox,
    pub class_id: usize,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_xyxy(a.to_array(), b.to_array())
}

/// IoU of two `[x1, y1, x2, y2]` arrays; 0 when the union is empty.
pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    overlap(a, b).iou()
}

pub fn giou(a: &BBox, b: &BBox) -> f64 {
    giou_with_grad(a.to_array(), b.to_array()).0
}

struct Overlap<T> {
    inter: T,
    union: T,
}

impl<T: Scalar> Overlap<T> {
    fn iou(&self) -> T {
        if self.union > T::zero() {
            self.inter / self.union
        } else {
            T::zero()
        }
    }
}

fn overlap<T: Scalar>(a: [T; 4], b: [T; 4]) -> Overlap<T> {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(T::zero());
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(T::zero());
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    Overlap {
        inter,
        union: area_a + area_b - inter,
    }
}

/// GIoU of `pred` against `gt` and its gradient with respect to the four
/// corners of `pred`.
pub fn giou_with_grad<T: Scalar>(pred: [T; 4], gt: [T; 4]) -> (T, [T; 4]) {
    let zero = T::zero();
    let [ax1, ay1, ax2, ay2] = pred;
    let [bx1, by1, bx2, by2] = gt;

    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    let hit = iw > zero && ih > zero;
    let inter = if hit { iw * ih } else { zero };
    let (aw, ah) = (ax2 - ax1, ay2 - ay1);
    let union = aw * ah + (bx2 - bx1) * (by2 - by1) - inter;
    let ew = ax2.max(bx2) - ax1.min(bx1);
    let eh = ay2.max(by2) - ay1.min(by1);
    let enc = ew * eh;

    let iou = if union > zero { inter / union } else { zero };
    let giou = if enc > zero { iou - (enc - union) / enc } else { iou };

    // Partials of the intersection, the predicted area and the enclosing area.
    let d_inter = if hit {
        [
            if ax1 > bx1 { -ih } else { zero },
            if ay1 > by1 { -iw } else { zero },
            if ax2 < bx2 { ih } else { zero },
            if ay2 < by2 { iw } else { zero },
        ]
    } else {
        [zero; 4]
    };
    let d_area = [-ah, -aw, ah, aw];
    let d_enc = [
        if ax1 < bx1 { -eh } else { zero },
        if ay1 < by1 { -ew } else { zero },
        if ax2 > bx2 { eh } else { zero },
        if ay2 > by2 { ew } else { zero },
    ];

    let mut grad = [zero; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        let mut d = zero;
        if union > zero {
            d += (d_inter[k] * union - inter * d_union) / (union * union);
        }
        if enc > zero {
            d += (d_union * enc - union * d_enc[k]) / (enc * enc);
        }
        grad[k] = d;
    }
    (giou, grad)
}

/// Box from an anchor point and non-negative `(left, top, right, bottom)`
/// distances.
pub fn distance_to_bbox(point: (f64, f64), ltrb: [f64; 4]) -> Result<BBox> {
    if ltrb.iter().any(|d| d.is_nan() || *d < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "distances must be non-negative, got {ltrb:?}"
        )));
    }
    let (x, y) = point;
    BBox::new(x - ltrb[0], y - ltrb[1], x + ltrb[2], y + ltrb[3])
}

/// Inverse of [`distance_to_bbox`] for a point inside `b`.
pub fn bbox_to_distance(point: (f64, f64), b: &BBox) -> [f64; 4] {
    let (x, y) = point;
    [x - b.x1, y - b.y1, b.x2 - x, b.y2 - y]
}

/// Class-wise greedy non-maximum suppression.
///
/// Detections are visited by descending score, equal scores in input order.
/// A detection is kept iff its IoU with every kept detection of the same class
/// is below `iou_threshold`. The result is in visiting order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}
