//! Anchor grid generation and box delta coding for the RPN.

use crate::geom::BBox;

/// Center-size anchor, possibly extending beyond image bounds.
#[derive(Debug, Clone, Copy)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn to_bbox(&self) -> BBox {
        BBox {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }
}

/// Square anchors of the configured sizes centered on every feature cell.
///
/// Enumeration order matches the RPN head layout: anchor index
/// `a * fh * fw + y * fw + x`.
pub fn anchor_grid(fh: usize, fw: usize, stride: usize, sizes: &[f64]) -> Vec<Anchor> {
    let mut anchors = Vec::with_capacity(sizes.len() * fh * fw);
    for &s in sizes {
        for y in 0..fh {
            for x in 0..fw {
                anchors.push(Anchor {
                    cx: (x as f64 + 0.5) * stride as f64,
                    cy: (y as f64 + 0.5) * stride as f64,
                    w: s,
                    h: s,
                });
            }
        }
    }
    anchors
}

/// Faster R-CNN delta encoding of `target` relative to `reference`.
pub fn encode_deltas(target: &BBox, reference: &Anchor) -> [f64; 4] {
    let (tcx, tcy) = target.center();
    [
        (tcx - reference.cx) / reference.w,
        (tcy - reference.cy) / reference.h,
        (target.width() / reference.w).ln(),
        (target.height() / reference.h).ln(),
    ]
}

/// Inverse of [`encode_deltas`], with the exponent clamped to keep decoded
/// sizes bounded, then clipped so the box lies inside the image.
pub fn decode_deltas(deltas: &[f64; 4], reference: &Anchor, img_w: f64, img_h: f64) -> BBox {
    let cx = reference.cx + deltas[0] * reference.w;
    let cy = reference.cy + deltas[1] * reference.h;
    let w = reference.w * deltas[2].clamp(-4.0, 4.0).exp();
    let h = reference.h * deltas[3].clamp(-4.0, 4.0).exp();
    sanitize_box(cx, cy, w, h, img_w, img_h)
}

/// Clamp a center-size box into a valid `BBox` strictly inside the image,
/// with a minimum side of 2 pixels.
pub fn sanitize_box(cx: f64, cy: f64, w: f64, h: f64, img_w: f64, img_h: f64) -> BBox {
    let w = w.clamp(2.0_f64.min(img_w), img_w);
    let h = h.clamp(2.0_f64.min(img_h), img_h);
    let cx = cx.clamp(w / 2.0, img_w - w / 2.0);
    let cy = cy.clamp(h / 2.0, img_h - h / 2.0);
    BBox {
        x1: cx - w / 2.0,
        y1: cy - h / 2.0,
        x2: cx + w / 2.0,
        y2: cy + h / 2.0,
    }
}

impl From<&BBox> for Anchor {
    fn from(b: &BBox) -> Self {
        let (cx, cy) = b.center();
        Anchor {
            cx,
            cy,
            w: b.width(),
            h: b.height(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_roundtrip() {
        let anchor = Anchor {
            cx: 20.0,
            cy: 24.0,
            w: 16.0,
            h: 16.0,
        };
        let target = BBox::new(10.0, 14.0, 30.0, 38.0).unwrap();
        let d = encode_deltas(&target, &anchor);
        let back = decode_deltas(&d, &anchor, 64.0, 64.0);
        assert!((back.x1 - target.x1).abs() < 1e-9);
        assert!((back.y2 - target.y2).abs() < 1e-9);
    }

    #[test]
    fn grid_has_expected_layout() {
        let g = anchor_grid(2, 3, 8, &[16.0, 32.0]);
        assert_eq!(g.len(), 12);
        // anchor index a*fh*fw + y*fw + x
        assert_eq!(g[0].cx, 4.0);
        assert_eq!(g[1].cx, 12.0);
        assert_eq!(g[6].w, 32.0);
    }

    #[test]
    fn sanitize_keeps_box_inside() {
        let b = sanitize_box(1.0, 1.0, 50.0, 10.0, 32.0, 32.0);
        assert!(b.inside_image(32.0, 32.0));
        assert!(b.width() >= 2.0);
    }
}
