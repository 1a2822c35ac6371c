//! Box geometry, detections, image transforms, IoU, and non-maximum suppression.
//!
//! Everything downstream (sampling, distillation, evaluation) speaks in
//! axis-aligned corner boxes in pixel coordinates, so the conventions here are
//! load-bearing: `x1 < x2`, `y1 < y2`, all coordinates finite. Degenerate
//! boxes are rejected at construction rather than clamped.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Axis-aligned bounding box, corner convention `(x1, y1, x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Build a box, rejecting degenerate or non-finite coordinates.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::data(format!(
                "non-finite box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::data(format!(
                "degenerate box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
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

    /// True when the box lies inside `[0, w] x [0, h]`.
    pub fn inside_image(&self, w: f64, h: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= w && self.y2 <= h
    }

    /// Lexicographic coordinate ordering, used for deterministic tie-breaks.
    pub fn lex_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        let a = [self.x1, self.y1, self.x2, self.y2];
        let b = [other.x1, other.y1, other.x2, other.y2];
        for (x, y) in a.iter().zip(b.iter()) {
            match x.partial_cmp(y).expect("finite coords") {
                std::cmp::Ordering::Equal => continue,
                ord => return ord,
            }
        }
        std::cmp::Ordering::Equal
    }
}

/// Intersection-over-union of two valid boxes. Zero when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix1 = a.x1.max(b.x1);
    let iy1 = a.y1.max(b.y1);
    let ix2 = a.x2.min(b.x2);
    let iy2 = a.y2.min(b.y2);
    let iw = (ix2 - ix1).max(0.0);
    let ih = (iy2 - iy1).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// A scored, classed box emitted by a detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::data(format!("score {score} outside [0, 1]")));
        }
        Ok(Self {
            bbox,
            class_id,
            score,
        })
    }
}

/// Invertible image-space transforms used by the consistency check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageTransform {
    Identity,
    /// Multiply all coordinates by `factor` (> 0).
    Scale { factor: f64 },
    /// Mirror about the vertical axis of an image of the given width.
    HFlip { image_width: f64 },
}

impl ImageTransform {
    pub fn scale(factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::config(format!("scale factor {factor} must be > 0")));
        }
        Ok(ImageTransform::Scale { factor })
    }

    /// Apply the transform to a box.
    pub fn apply(&self, b: &BBox) -> BBox {
        match *self {
            ImageTransform::Identity => *b,
            ImageTransform::Scale { factor } => BBox {
                x1: b.x1 * factor,
                y1: b.y1 * factor,
                x2: b.x2 * factor,
                y2: b.y2 * factor,
            },
            ImageTransform::HFlip { image_width } => BBox {
                x1: image_width - b.x2,
                y1: b.y1,
                x2: image_width - b.x1,
                y2: b.y2,
            },
        }
    }

    /// Apply the inverse transform; `invert(apply(b)) == b` up to 1e-9.
    pub fn invert(&self, b: &BBox) -> BBox {
        match *self {
            ImageTransform::Identity => *b,
            ImageTransform::Scale { factor } => BBox {
                x1: b.x1 / factor,
                y1: b.y1 / factor,
                x2: b.x2 / factor,
                y2: b.y2 / factor,
            },
            // Horizontal flip is an involution.
            ImageTransform::HFlip { .. } => self.apply(b),
        }
    }
}

/// Greedy per-class non-maximum suppression.
///
/// Detections are visited in descending score; ties break by lower class id,
/// then lexicographic box coordinates, so the output is deterministic.
/// Output is sorted by the same ordering.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(0.0 < iou_threshold && iou_threshold < 1.0) {
        return Err(Error::config(format!(
            "nms iou_threshold {iou_threshold} outside (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| det_order(&dets[i], &dets[j]));

    let mut keep: Vec<Detection> = Vec::new();
    for &i in &order {
        let d = &dets[i];
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) >= iou_threshold);
        if !suppressed {
            keep.push(*d);
        }
    }
    Ok(keep)
}

/// Score-descending ordering with deterministic tie-breaks.
pub fn det_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .expect("finite scores")
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.lex_cmp(&b.bbox))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_identity_is_one() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(20.0, 20.0, 30.0, 30.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_analytic_overlap() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(5.0, 5.0, 15.0, 15.0);
        // intersection 25, union 175
        assert!((iou(&a, &b) - 25.0 / 175.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 5.0).is_err());
        assert!(BBox::new(2.0, 0.0, 1.0, 5.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 5.0).is_err());
    }

    #[test]
    fn transform_identity() {
        let b = bx(1.0, 2.0, 3.0, 4.0);
        assert_eq!(ImageTransform::Identity.apply(&b), b);
    }

    #[test]
    fn transform_scale_and_invert() {
        let t = ImageTransform::scale(2.0).unwrap();
        let b = bx(1.0, 2.0, 3.0, 4.0);
        let s = t.apply(&b);
        assert_eq!(s, bx(2.0, 4.0, 6.0, 8.0));
        assert_eq!(t.invert(&s), b);
    }

    #[test]
    fn transform_hflip() {
        let t = ImageTransform::HFlip { image_width: 100.0 };
        let b = bx(10.0, 0.0, 30.0, 10.0);
        assert_eq!(t.apply(&b), bx(70.0, 0.0, 90.0, 10.0));
        assert_eq!(t.invert(&t.apply(&b)), b);
    }

    #[test]
    fn scale_rejects_nonpositive() {
        assert!(ImageTransform::scale(0.0).is_err());
        assert!(ImageTransform::scale(-1.0).is_err());
    }

    #[test]
    fn nms_single_detection_kept() {
        let d = Detection::new(bx(0.0, 0.0, 10.0, 10.0), 1, 0.9).unwrap();
        assert_eq!(nms(&[d], 0.5).unwrap(), vec![d]);
    }

    #[test]
    fn nms_suppresses_identical_box() {
        let hi = Detection::new(bx(0.0, 0.0, 10.0, 10.0), 1, 0.9).unwrap();
        let lo = Detection::new(bx(0.0, 0.0, 10.0, 10.0), 1, 0.8).unwrap();
        assert_eq!(nms(&[lo, hi], 0.5).unwrap(), vec![hi]);
    }

    #[test]
    fn nms_keeps_disjoint_boxes() {
        let a = Detection::new(bx(0.0, 0.0, 10.0, 10.0), 1, 0.9).unwrap();
        let b = Detection::new(bx(50.0, 50.0, 60.0, 60.0), 1, 0.8).unwrap();
        assert_eq!(nms(&[b, a], 0.5).unwrap(), vec![a, b]);
    }

    #[test]
    fn nms_is_per_class() {
        let a = Detection::new(bx(0.0, 0.0, 10.0, 10.0), 1, 0.9).unwrap();
        let b = Detection::new(bx(0.0, 0.0, 10.0, 10.0), 2, 0.8).unwrap();
        assert_eq!(nms(&[a, b], 0.5).unwrap().len(), 2);
    }
}
