//! A small differentiable two-stage detector: convolutional backbone, region
//! proposal network, and an RoI classification/regression head.
//!
//! One architecture serves every role (base teacher, novel teacher, student);
//! the only difference between roles is the foreground class list. All
//! forward passes run on the autodiff tape so any loss built from detector
//! outputs has exact gradients w.r.t. the parameter vector.

pub mod anchors;
mod forward;
mod loss;

pub use forward::{RoiHeadVars, TapeParams};
pub use loss::supervised_loss_parts;

use crate::error::{Error, Result};
use crate::geom::{det_order, nms, BBox, Detection};
use crate::image::Image;
use crate::tape::Tape;
use crate::tensor::Tensor;
use anchors::{anchor_grid, decode_deltas, Anchor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Backbone output: one single-scale feature map.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// `[C, H, W]` activations.
    pub values: Tensor,
    /// Pixels per feature cell.
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.shape[0]
    }
    pub fn height(&self) -> usize {
        self.values.shape[1]
    }
    pub fn width(&self) -> usize {
        self.values.shape[2]
    }
}

/// A class-agnostic region proposal.
#[derive(Debug, Clone, Copy)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// Per-RoI head output.
#[derive(Debug, Clone)]
pub struct RoIOutput {
    /// `K + 1` probabilities, background at slot 0, simplex.
    pub probs: Vec<f64>,
    /// Per-foreground-class box deltas, `K` rows.
    pub regressions: Vec<[f64; 4]>,
    /// Pooled `[C, P, P]` feature.
    pub roi_feature: Tensor,
}

/// Architecture hyperparameters plus the foreground class list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Global foreground class ids in slot order (probability slot `i + 1`).
    pub class_ids: Vec<usize>,
    /// Output channels of the stride-2 backbone blocks.
    pub backbone_channels: Vec<usize>,
    /// Hidden channels of the RPN conv.
    pub rpn_channels: usize,
    /// Hidden width of the RoI head.
    pub fc_dim: usize,
    /// RoI pooling output size P.
    pub roi_pool: usize,
    /// Square anchor side lengths in pixels.
    pub anchor_sizes: Vec<f64>,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl DetectorConfig {
    /// Compact architecture used by the synthetic desk-scale presets.
    pub fn small(class_ids: Vec<usize>, seed: u64) -> Self {
        Self {
            class_ids,
            backbone_channels: vec![8, 16, 32],
            rpn_channels: 32,
            fc_dim: 64,
            roi_pool: 4,
            anchor_sizes: vec![12.0, 18.0, 26.0, 38.0],
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn stride(&self) -> usize {
        1 << self.backbone_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_ids.is_empty() {
            return Err(Error::config("detector needs at least one class"));
        }
        if self.backbone_channels.is_empty() {
            return Err(Error::config("backbone needs at least one block"));
        }
        if self.anchor_sizes.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("anchor sizes must be positive"));
        }
        if self.roi_pool == 0 || self.fc_dim == 0 || self.rpn_channels == 0 {
            return Err(Error::config("zero-sized layer in config"));
        }
        Ok(())
    }

    /// Shapes of every parameter tensor, in the canonical flat order.
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut c_in = 3;
        for &c_out in &self.backbone_channels {
            shapes.push(vec![c_out, c_in, 3, 3]);
            shapes.push(vec![c_out]);
            c_in = c_out;
        }
        let a = self.anchor_sizes.len();
        shapes.push(vec![self.rpn_channels, c_in, 3, 3]);
        shapes.push(vec![self.rpn_channels]);
        shapes.push(vec![a, self.rpn_channels, 1, 1]);
        shapes.push(vec![a]);
        shapes.push(vec![4 * a, self.rpn_channels, 1, 1]);
        shapes.push(vec![4 * a]);
        let k = self.num_classes();
        let pooled = c_in * self.roi_pool * self.roi_pool;
        shapes.push(vec![self.fc_dim, pooled]);
        shapes.push(vec![self.fc_dim]);
        shapes.push(vec![k + 1, self.fc_dim]);
        shapes.push(vec![k + 1]);
        shapes.push(vec![4 * k, self.fc_dim]);
        shapes.push(vec![4 * k]);
        shapes
    }
}

/// A detector: config plus its parameter tensors in canonical order.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: Vec<Tensor>,
}

impl Detector {
    /// Seeded initialization: every tensor uniform in `[-s, s]` with
    /// `s = 1 / sqrt(fan_in)` of its layer.
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let shapes = config.param_shapes();
        let mut params = Vec::with_capacity(shapes.len());
        // weight/bias pairs: bias shares the fan-in of its weight
        let mut i = 0;
        while i < shapes.len() {
            let wshape = &shapes[i];
            let fan_in: usize = wshape[1..].iter().product();
            let s = 1.0 / (fan_in as f64).sqrt();
            for shape in [&shapes[i], &shapes[i + 1]] {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-s..s)).collect();
                params.push(Tensor::from_vec(shape, data));
            }
            i += 2;
        }
        Ok(Self { config, params })
    }

    /// Rebuild from a config and a flat parameter vector.
    pub fn from_flat(config: DetectorConfig, theta: &[f64]) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if theta.len() != expected {
            return Err(Error::data(format!(
                "parameter count {} does not match architecture ({expected})",
                theta.len()
            )));
        }
        let mut params = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for shape in &shapes {
            let n: usize = shape.iter().product();
            params.push(Tensor::from_vec(shape, theta[off..off + n].to_vec()));
            off += n;
        }
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|t| t.numel()).sum()
    }

    pub fn theta_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in &self.params {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn set_theta_flat(&mut self, theta: &[f64]) {
        assert_eq!(theta.len(), self.param_count(), "theta length mismatch");
        let mut off = 0;
        for t in self.params.iter_mut() {
            let n = t.numel();
            t.data.copy_from_slice(&theta[off..off + n]);
            off += n;
        }
    }

    /// FNV-1a hash over the parameter bits; used to assert teacher freezing.
    pub fn theta_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.params {
            for v in &t.data {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        image.validate()?;
        if image.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::data("image values outside [0, 1]"));
        }
        Ok(())
    }

    /// Backbone forward pass to the single shared feature map.
    pub fn backbone_forward(&self, image: &Image) -> Result<FeatureMap> {
        self.check_image(image)?;
        let tape = Tape::new();
        let tp = self.bind_params(&tape);
        let fm = self.backbone_tape(&tape, &tp, image);
        let values = tape.value(fm);
        if !values.is_finite() {
            return Err(Error::numeric("backbone produced non-finite values"));
        }
        Ok(FeatureMap {
            values,
            stride: self.config.stride(),
        })
    }

    /// RPN proposals: at most `n_candidates`, objectness-sorted, clipped to
    /// the image.
    pub fn rpn_forward(&self, fm: &FeatureMap, n_candidates: usize) -> Vec<Proposal> {
        let tape = Tape::new();
        let tp = self.bind_params(&tape);
        let fm_var = tape.leaf(fm.values.clone());
        let (obj, deltas) = self.rpn_tape(&tape, &tp, fm_var);
        let obj = tape.value(obj);
        let deltas = tape.value(deltas);
        self.proposals_from_rpn(&obj, &deltas, fm, n_candidates)
    }

    /// Decode RPN head outputs into sorted, clipped proposals.
    pub(crate) fn proposals_from_rpn(
        &self,
        obj_logits: &Tensor,
        deltas: &Tensor,
        fm: &FeatureMap,
        n_candidates: usize,
    ) -> Vec<Proposal> {
        let (fh, fw) = (fm.height(), fm.width());
        let img_w = (fw * fm.stride) as f64;
        let img_h = (fh * fm.stride) as f64;
        let anchors = anchor_grid(fh, fw, fm.stride, &self.config.anchor_sizes);
        let mut order: Vec<usize> = (0..anchors.len()).collect();
        // objectness desc, anchor index asc on ties
        order.sort_by(|&i, &j| {
            obj_logits.data[j]
                .partial_cmp(&obj_logits.data[i])
                .expect("finite logits")
                .then(i.cmp(&j))
        });
        let cells = fh * fw;
        order
            .into_iter()
            .take(n_candidates)
            .map(|i| {
                let a = i / cells;
                let cell = i % cells;
                let d = [
                    deltas.data[(a * 4) * cells + cell],
                    deltas.data[(a * 4 + 1) * cells + cell],
                    deltas.data[(a * 4 + 2) * cells + cell],
                    deltas.data[(a * 4 + 3) * cells + cell],
                ];
                Proposal {
                    bbox: decode_deltas(&d, &anchors[i], img_w, img_h),
                    objectness: sigmoid(obj_logits.data[i]),
                }
            })
            .collect()
    }

    /// RoI head on explicit boxes. Every RoI must lie inside the image the
    /// feature map was computed from.
    pub fn roi_head(&self, fm: &FeatureMap, rois: &[BBox]) -> Result<Vec<RoIOutput>> {
        let img_w = (fm.width() * fm.stride) as f64;
        let img_h = (fm.height() * fm.stride) as f64;
        for (i, r) in rois.iter().enumerate() {
            if !r.inside_image(img_w, img_h) {
                return Err(Error::data(format!(
                    "roi {i} ({:?}) outside image {img_w}x{img_h}",
                    r
                )));
            }
        }
        if rois.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let tp = self.bind_params(&tape);
        let fm_var = tape.leaf(fm.values.clone());
        let head = self.roi_head_tape(&tape, &tp, fm_var, rois, fm.stride);
        let probs = tape.value(head.probs);
        let regs = tape.value(head.regs);
        let k = self.config.num_classes();
        Ok((0..rois.len())
            .map(|r| {
                let mut regressions = Vec::with_capacity(k);
                for c in 0..k {
                    let o = r * 4 * k + c * 4;
                    regressions.push([
                        regs.data[o],
                        regs.data[o + 1],
                        regs.data[o + 2],
                        regs.data[o + 3],
                    ]);
                }
                RoIOutput {
                    probs: probs.data[r * (k + 1)..(r + 1) * (k + 1)].to_vec(),
                    regressions,
                    roi_feature: tape.value(head.pooled[r]),
                }
            })
            .collect())
    }

    /// Full pipeline: backbone → proposals → RoI head → per-class decode,
    /// score threshold, and NMS.
    pub fn detect(
        &self,
        image: &Image,
        score_threshold: f64,
        nms_iou: f64,
    ) -> Result<Vec<Detection>> {
        if !(0.0 < score_threshold && score_threshold <= 1.0) {
            return Err(Error::config(format!(
                "score threshold {score_threshold} outside (0, 1]"
            )));
        }
        let fm = self.backbone_forward(image)?;
        let proposals = self.rpn_forward(&fm, 256);
        let rois: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let outputs = self.roi_head(&fm, &rois)?;
        let img_w = image.width as f64;
        let img_h = image.height as f64;
        let mut dets = Vec::new();
        for (roi, out) in rois.iter().zip(outputs.iter()) {
            let (slot, score) = argmax_foreground(&out.probs);
            if score < score_threshold {
                continue;
            }
            let anchor = Anchor::from(roi);
            let bbox = decode_deltas(&out.regressions[slot - 1], &anchor, img_w, img_h);
            dets.push(Detection {
                bbox,
                class_id: self.config.class_ids[slot - 1],
                score,
            });
        }
        let mut kept = nms(&dets, nms_iou)?;
        kept.sort_by(det_order);
        Ok(kept)
    }

    /// Supervised detector loss `(L_RCNN, L_RPN)` on one image.
    ///
    /// RoI sampling is seeded and independent of the parameters, so the
    /// returned value is a smooth function of theta (away from smooth-L1
    /// kinks) and its tape gradient matches finite differences.
    pub fn supervised_loss(
        &self,
        image: &Image,
        gts: &[Detection],
        roi_seed: u64,
    ) -> Result<(f64, f64)> {
        self.check_image(image)?;
        let tape = Tape::new();
        let tp = self.bind_params(&tape);
        let (l_rcnn, l_rpn) = supervised_loss_parts(self, &tape, &tp, image, gts, roi_seed)?;
        let a = tape.value(l_rcnn).item();
        let b = tape.value(l_rpn).item();
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::numeric("supervised loss is non-finite"));
        }
        Ok((a, b))
    }
}

/// Foreground argmax of a `K + 1` probability vector (background at slot 0).
/// Ties break toward the lower slot.
pub fn argmax_foreground(probs: &[f64]) -> (usize, f64) {
    let mut best = 1;
    for slot in 2..probs.len() {
        if probs[slot] > probs[best] {
            best = slot;
        }
    }
    (best, probs[best])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests;
