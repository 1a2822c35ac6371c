//! Supervised detector losses (classification + box regression for both the
//! RPN and the RoI head).
//!
//! RoI sampling is anchored on the ground-truth boxes and driven by an
//! explicit seed, never by the current parameters. The loss is therefore a
//! pure function of theta for fixed `(image, gts, seed)`, which is what makes
//! the finite-difference gradient contract checkable.

use super::anchors::{anchor_grid, encode_deltas, sanitize_box, Anchor};
use super::{Detector, TapeParams};
use crate::error::{Error, Result};
use crate::geom::{iou, BBox, Detection};
use crate::image::Image;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RPN_POSITIVE_IOU: f64 = 0.5;
const RPN_NEGATIVE_IOU: f64 = 0.3;
const ROI_JITTERS_PER_GT: usize = 3;
const ROI_NEGATIVES: usize = 12;

/// A sampled RoI with its classification slot (0 = background) and, for
/// positives, the index of the ground truth it regresses to.
#[derive(Debug, Clone)]
pub struct SampledRoi {
    pub bbox: BBox,
    pub slot: usize,
    pub gt_index: Option<usize>,
}

/// Ground-truth-anchored RoI sampling: each gt box plus jittered copies as
/// positives, seeded random boxes clear of all gts as negatives.
pub fn sample_rois(
    img_w: f64,
    img_h: f64,
    gts: &[(BBox, usize)],
    seed: u64,
) -> Vec<SampledRoi> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rois = Vec::new();
    for (g, &(gbox, slot)) in gts.iter().enumerate() {
        rois.push(SampledRoi {
            bbox: gbox,
            slot,
            gt_index: Some(g),
        });
        let (cx, cy) = gbox.center();
        let (w, h) = (gbox.width(), gbox.height());
        for _ in 0..ROI_JITTERS_PER_GT {
            let mut accepted = None;
            for _ in 0..8 {
                let b = sanitize_box(
                    cx + rng.gen_range(-0.25..0.25) * w,
                    cy + rng.gen_range(-0.25..0.25) * h,
                    w * (1.0 + rng.gen_range(-0.25..0.25)),
                    h * (1.0 + rng.gen_range(-0.25..0.25)),
                    img_w,
                    img_h,
                );
                if iou(&b, &gbox) >= 0.4 {
                    accepted = Some(b);
                    break;
                }
            }
            rois.push(SampledRoi {
                bbox: accepted.unwrap_or(gbox),
                slot,
                gt_index: Some(g),
            });
        }
    }
    for _ in 0..ROI_NEGATIVES {
        for _ in 0..30 {
            let side = rng.gen_range(8.0..(img_w.min(img_h) * 0.6).max(9.0));
            let b = sanitize_box(
                rng.gen_range(0.0..img_w),
                rng.gen_range(0.0..img_h),
                side * (1.0 + rng.gen_range(-0.3..0.3)),
                side * (1.0 + rng.gen_range(-0.3..0.3)),
                img_w,
                img_h,
            );
            if gts.iter().all(|(g, _)| iou(&b, g) < RPN_NEGATIVE_IOU) {
                rois.push(SampledRoi {
                    bbox: b,
                    slot: 0,
                    gt_index: None,
                });
                break;
            }
        }
    }
    rois
}

/// Anchor labels for the RPN: positives by IoU threshold plus the best
/// anchor of every gt, negatives below the lower bound, the rest ignored.
/// Returns `(negative anchor indices, (anchor, gt) positive pairs)`.
fn rpn_anchor_labels(
    anchors: &[Anchor],
    gts: &[(BBox, usize)],
) -> (Vec<usize>, Vec<(usize, usize)>) {
    if gts.is_empty() {
        return ((0..anchors.len()).collect(), Vec::new());
    }
    let mut best_anchor_per_gt = vec![(0usize, -1.0f64); gts.len()];
    let mut assigned: Vec<Option<usize>> = vec![None; anchors.len()];
    let mut neg = Vec::new();
    for (i, a) in anchors.iter().enumerate() {
        let ab = a.to_bbox();
        let mut best = -1.0;
        let mut best_g = 0;
        for (g, (gbox, _)) in gts.iter().enumerate() {
            let v = iou(&ab, gbox);
            if v > best {
                best = v;
                best_g = g;
            }
            if v > best_anchor_per_gt[g].1 {
                best_anchor_per_gt[g] = (i, v);
            }
        }
        if best >= RPN_POSITIVE_IOU {
            assigned[i] = Some(best_g);
        } else if best < RPN_NEGATIVE_IOU {
            neg.push(i);
        }
    }
    for (g, &(i, _)) in best_anchor_per_gt.iter().enumerate() {
        assigned[i] = Some(g);
        neg.retain(|&n| n != i);
    }
    let pos: Vec<(usize, usize)> = assigned
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.map(|g| (i, g)))
        .collect();
    (neg, pos)
}

/// Build `(L_RCNN, L_RPN)` on the tape for one image.
pub fn supervised_loss_parts(
    det: &Detector,
    tape: &Tape,
    tp: &TapeParams,
    image: &Image,
    gts: &[Detection],
    roi_seed: u64,
) -> Result<(Var, Var)> {
    let img_w = image.width as f64;
    let img_h = image.height as f64;
    let mut slotted: Vec<(BBox, usize)> = Vec::with_capacity(gts.len());
    for d in gts {
        if !d.bbox.inside_image(img_w, img_h) {
            return Err(Error::data(format!("gt box {:?} outside image", d.bbox)));
        }
        let slot = det
            .config
            .class_ids
            .iter()
            .position(|&c| c == d.class_id)
            .ok_or_else(|| {
                Error::data(format!(
                    "gt class {} not covered by this detector",
                    d.class_id
                ))
            })?;
        slotted.push((d.bbox, slot + 1));
    }

    let fm = det.backbone_tape(tape, tp, image);
    let fm_shape = tape.shape(fm);
    let (fh, fw) = (fm_shape[1], fm_shape[2]);
    let stride = det.config.stride();

    // ---- RPN ----
    let (obj, reg) = det.rpn_tape(tape, tp, fm);
    let anchors = anchor_grid(fh, fw, stride, &det.config.anchor_sizes);
    let (neg, pos) = rpn_anchor_labels(&anchors, &slotted);
    let cells = fh * fw;
    let obj_flat = obj;

    let mut rpn_terms: Vec<Var> = Vec::new();
    if !pos.is_empty() {
        let idxs: Vec<usize> = pos.iter().map(|(i, _)| *i).collect();
        let z = tape.gather(obj_flat, &idxs);
        let bce = tape.bce_logits_mean(z, &vec![1.0; idxs.len()]);
        rpn_terms.push(tape.scale(bce, 0.5));
    }
    if !neg.is_empty() {
        let z = tape.gather(obj_flat, &neg);
        let bce = tape.bce_logits_mean(z, &vec![0.0; neg.len()]);
        let weight = if pos.is_empty() { 1.0 } else { 0.5 };
        rpn_terms.push(tape.scale(bce, weight));
    }
    if !pos.is_empty() {
        let mut idxs = Vec::with_capacity(pos.len() * 4);
        let mut targets = Vec::with_capacity(pos.len() * 4);
        for &(i, g) in &pos {
            let a = i / cells;
            let cell = i % cells;
            for d in 0..4 {
                idxs.push((a * 4 + d) * cells + cell);
            }
            targets.extend_from_slice(&encode_deltas(&slotted[g].0, &anchors[i]));
        }
        let z = tape.gather(reg, &idxs);
        let sl1 = tape.smooth_l1_sum(z, &Tensor::from_vec(&[targets.len()], targets));
        rpn_terms.push(tape.scale(sl1, 1.0 / pos.len() as f64));
    }
    let l_rpn = if rpn_terms.is_empty() {
        tape.leaf(Tensor::scalar(0.0))
    } else {
        tape.add_n(&rpn_terms)
    };

    // ---- RCNN ----
    let rois = sample_rois(img_w, img_h, &slotted, roi_seed);
    let l_rcnn = if rois.is_empty() {
        tape.leaf(Tensor::scalar(0.0))
    } else {
        let boxes: Vec<BBox> = rois.iter().map(|r| r.bbox).collect();
        let head = det.roi_head_tape(tape, tp, fm, &boxes, stride);
        let targets: Vec<usize> = rois.iter().map(|r| r.slot).collect();
        let ce = tape.cross_entropy_mean(head.cls_logits, &targets);

        let k = det.config.num_classes();
        let positives: Vec<&SampledRoi> = rois.iter().filter(|r| r.slot > 0).collect();
        if positives.is_empty() {
            ce
        } else {
            let mut idxs = Vec::with_capacity(positives.len() * 4);
            let mut targets = Vec::with_capacity(positives.len() * 4);
            for (r, roi) in rois.iter().enumerate() {
                if roi.slot == 0 {
                    continue;
                }
                let cls = roi.slot - 1;
                for d in 0..4 {
                    idxs.push(r * 4 * k + cls * 4 + d);
                }
                let g = roi.gt_index.expect("positive roi has gt");
                targets.extend_from_slice(&encode_deltas(&slotted[g].0, &Anchor::from(&roi.bbox)));
            }
            let z = tape.gather(head.regs, &idxs);
            let sl1 = tape.smooth_l1_sum(z, &Tensor::from_vec(&[targets.len()], targets));
            let reg_term = tape.scale(sl1, 1.0 / positives.len() as f64);
            tape.add(ce, reg_term)
        }
    };

    Ok((l_rcnn, l_rpn))
}
