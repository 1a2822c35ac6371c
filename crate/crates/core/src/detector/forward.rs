//! Tape-level forward passes shared by inference and every loss.

use super::{Detector, DetectorConfig};
use crate::geom::BBox;
use crate::image::Image;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Detector parameters bound to a tape as differentiable leaves, in the
/// canonical flat order.
pub struct TapeParams {
    pub vars: Vec<Var>,
}

/// RoI head outputs on the tape.
pub struct RoiHeadVars {
    /// One `[C, P, P]` pooled feature per RoI.
    pub pooled: Vec<Var>,
    /// `[R, K + 1]` raw logits.
    pub cls_logits: Var,
    /// `[R, K + 1]` softmax probabilities.
    pub probs: Var,
    /// `[R, 4K]` per-class deltas.
    pub regs: Var,
}

impl DetectorConfig {
    fn rpn_base_index(&self) -> usize {
        2 * self.backbone_channels.len()
    }
}

impl Detector {
    pub fn bind_params(&self, tape: &Tape) -> TapeParams {
        TapeParams {
            vars: self.params.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Collect the flat gradient w.r.t. the bound parameters, zeros where a
    /// parameter did not participate.
    pub fn flat_gradient(&self, tape: &Tape, tp: &TapeParams, grads: &crate::tape::Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (var, tensor) in tp.vars.iter().zip(self.params.iter()) {
            match grads.get(*var) {
                Some(g) => out.extend_from_slice(&g.data),
                None => out.extend(std::iter::repeat(0.0).take(tensor.numel())),
            }
        }
        let _ = tape;
        out
    }

    /// Backbone: stride-2 conv blocks with SiLU, image → `[C, Hf, Wf]`.
    pub fn backbone_tape(&self, tape: &Tape, tp: &TapeParams, image: &Image) -> Var {
        let mut x = tape.leaf(Tensor::from_vec(
            &[3, image.height, image.width],
            image.data.clone(),
        ));
        for i in 0..self.config.backbone_channels.len() {
            let w = tp.vars[2 * i];
            let b = tp.vars[2 * i + 1];
            let y = tape.conv2d(x, w, b, 2, 1);
            x = tape.silu(y);
        }
        x
    }

    /// RPN heads: objectness logits `[A, Hf, Wf]` and deltas `[4A, Hf, Wf]`.
    pub fn rpn_tape(&self, tape: &Tape, tp: &TapeParams, fm: Var) -> (Var, Var) {
        let base = self.config.rpn_base_index();
        let hidden = tape.conv2d(fm, tp.vars[base], tp.vars[base + 1], 1, 1);
        let hidden = tape.silu(hidden);
        let obj = tape.conv2d(hidden, tp.vars[base + 2], tp.vars[base + 3], 1, 0);
        let reg = tape.conv2d(hidden, tp.vars[base + 4], tp.vars[base + 5], 1, 0);
        (obj, reg)
    }

    /// RoI head: exact-area average pooling, one hidden FC, class and
    /// regression heads.
    pub fn roi_head_tape(
        &self,
        tape: &Tape,
        tp: &TapeParams,
        fm: Var,
        rois: &[BBox],
        stride: usize,
    ) -> RoiHeadVars {
        assert!(!rois.is_empty(), "roi_head_tape on empty roi list");
        let fm_shape = tape.shape(fm);
        let (fh, fw) = (fm_shape[1], fm_shape[2]);
        let p = self.config.roi_pool;
        let pooled: Vec<Var> = rois
            .iter()
            .map(|roi| {
                let weights = roi_pool_weights(roi, stride, fh, fw, p);
                tape.weighted_pool(fm, &weights, p)
            })
            .collect();
        let flat = tape.stack_rows(&pooled); // [R, C*P*P]
        let base = self.config.rpn_base_index() + 6;
        let hidden = tape.linear(flat, tp.vars[base], tp.vars[base + 1]);
        let hidden = tape.silu(hidden);
        let cls_logits = tape.linear(hidden, tp.vars[base + 2], tp.vars[base + 3]);
        let probs = tape.softmax_rows(cls_logits);
        let regs = tape.linear(hidden, tp.vars[base + 4], tp.vars[base + 5]);
        RoiHeadVars {
            pooled,
            cls_logits,
            probs,
            regs,
        }
    }
}

/// Exact-area average pooling weights: the RoI footprint in feature-map
/// coordinates is divided into a `P x P` grid, and each grid cell averages
/// the feature cells it overlaps, weighted by overlap area.
pub fn roi_pool_weights(
    roi: &BBox,
    stride: usize,
    fh: usize,
    fw: usize,
    p: usize,
) -> Vec<Vec<(usize, f64)>> {
    let s = stride as f64;
    let (rx1, ry1, rx2, ry2) = (roi.x1 / s, roi.y1 / s, roi.x2 / s, roi.y2 / s);
    let cell_w = (rx2 - rx1) / p as f64;
    let cell_h = (ry2 - ry1) / p as f64;
    let mut out = Vec::with_capacity(p * p);
    for py in 0..p {
        let sy1 = ry1 + py as f64 * cell_h;
        let sy2 = sy1 + cell_h;
        for px in 0..p {
            let sx1 = rx1 + px as f64 * cell_w;
            let sx2 = sx1 + cell_w;
            let mut weights = Vec::new();
            let iy0 = (sy1.floor().max(0.0)) as usize;
            let iy1 = (sy2.ceil().min(fh as f64)) as usize;
            let ix0 = (sx1.floor().max(0.0)) as usize;
            let ix1 = (sx2.ceil().min(fw as f64)) as usize;
            let area = (cell_w * cell_h).max(1e-12);
            for iy in iy0..iy1 {
                let oy = (sy2.min(iy as f64 + 1.0) - sy1.max(iy as f64)).max(0.0);
                if oy == 0.0 {
                    continue;
                }
                for ix in ix0..ix1 {
                    let ox = (sx2.min(ix as f64 + 1.0) - sx1.max(ix as f64)).max(0.0);
                    if ox == 0.0 {
                        continue;
                    }
                    weights.push((iy * fw + ix, oy * ox / area));
                }
            }
            out.push(weights);
        }
    }
    out
}
