//! Box arithmetic shared by fusion, resampling and validation.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::datamodel::DetBox;

/// Axis-aligned box in absolute pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    /// Finite coordinates and positive area.
    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|c| c.is_finite()) && self.x1 < self.x2 && self.y1 < self.y2
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

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    /// Clips to `[0,width]×[0,height]`; `None` if nothing of positive area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let clipped = BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        };
        clipped.is_valid().then_some(clipped)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        Ok(BBox { x1, y1, x2, y2 })
    }
}

/// Intersection over union. Touching edges give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Distance from the box center to the image center over half the image diagonal.
pub fn center_distance_norm(b: &BBox, width: f64, height: f64) -> f64 {
    let (cx, cy) = b.center();
    let dx = cx - width / 2.0;
    let dy = cy - height / 2.0;
    let half_diag = 0.5 * (width * width + height * height).sqrt();
    ((dx * dx + dy * dy).sqrt() / half_diag).min(1.0)
}

pub fn area_fraction(b: &BBox, width: f64, height: f64) -> f64 {
    b.area() / (width * height)
}

/// Total order used for greedy suppression: higher score first, then smaller
/// x1, smaller y1, detector id, and finally the remaining coordinates.
pub fn suppression_order(a: &DetBox, b: &DetBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then_with(|| a.detector.cmp(&b.detector))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
}

/// Greedy per-category NMS. Boxes of different categories never suppress
/// each other; a box is suppressed when its IoU with a kept box of the same
/// category exceeds `threshold`. Output is sorted by category, then by
/// [`suppression_order`].
pub fn nms_per_category(boxes: &[DetBox], threshold: f64) -> Vec<DetBox> {
    let mut groups: BTreeMap<&str, Vec<&DetBox>> = BTreeMap::new();
    for b in boxes {
        groups.entry(b.category.as_str()).or_default().push(b);
    }

    let mut kept_all = Vec::with_capacity(boxes.len());
    for (_, mut group) in groups {
        group.sort_by(|a, b| suppression_order(a, b));
        let mut kept: Vec<&DetBox> = Vec::new();
        for cand in group {
            if kept.iter().all(|k| iou(&k.bbox, &cand.bbox) <= threshold) {
                kept.push(cand);
            }
        }
        kept_all.extend(kept.into_iter().cloned());
    }
    kept_all
}
