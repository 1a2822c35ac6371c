use super::*;
use crate::geom::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro_config(num_classes: usize, seed: u64) -> DetectorConfig {
    DetectorConfig {
        class_ids: (0..num_classes).collect(),
        backbone_channels: vec![4, 8],
        rpn_channels: 8,
        fc_dim: 16,
        roi_pool: 3,
        anchor_sizes: vec![8.0, 16.0],
        seed,
    }
}

fn random_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::new(w, h);
    for v in img.data.iter_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    img
}

#[test]
fn backbone_zero_image_is_finite() {
    let det = Detector::new(micro_config(2, 7)).unwrap();
    let fm = det.backbone_forward(&Image::new(16, 16)).unwrap();
    assert!(fm.values.is_finite());
    assert_eq!(fm.stride, 4);
    assert_eq!(fm.values.shape, vec![8, 4, 4]);
}

#[test]
fn backbone_is_deterministic() {
    let det = Detector::new(micro_config(2, 7)).unwrap();
    let img = random_image(16, 16, 1);
    let a = det.backbone_forward(&img).unwrap();
    let b = det.backbone_forward(&img).unwrap();
    assert_eq!(a.values, b.values);
}

#[test]
fn backbone_rejects_out_of_range_pixels() {
    let det = Detector::new(micro_config(2, 7)).unwrap();
    let img = Image::filled(16, 16, 1.5);
    assert!(det.backbone_forward(&img).is_err());
}

#[test]
fn backbone_flip_symmetry_on_constant_image() {
    // A constant image is its own horizontal flip, so the feature map must
    // equal its own flip wherever zero padding plays no role. Odd sizes keep
    // the stride-2 sampling grid mirror-symmetric (33 -> 17 -> 9), and the
    // padding-affected region stays confined to the outermost cell ring.
    let cfg = DetectorConfig {
        backbone_channels: vec![4, 8],
        ..micro_config(2, 11)
    };
    let det = Detector::new(cfg).unwrap();
    let img = Image::filled(33, 33, 0.6);
    let fm = det.backbone_forward(&img).unwrap();
    let fm_flipped = det.backbone_forward(&img.hflip()).unwrap();
    let (c, h, w) = (fm.channels(), fm.height(), fm.width());
    for ch in 0..c {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let a = fm.values.data[ch * h * w + y * w + x];
                let b = fm_flipped.values.data[ch * h * w + y * w + (w - 1 - x)];
                assert!(
                    (a - b).abs() < 1e-5,
                    "flip mismatch at ({ch},{y},{x}): {a} vs {b}"
                );
            }
        }
    }
}

#[test]
fn rpn_proposals_sorted_and_bounded() {
    let det = Detector::new(micro_config(2, 3)).unwrap();
    let img = random_image(32, 32, 3);
    let fm = det.backbone_forward(&img).unwrap();
    let props = det.rpn_forward(&fm, 256);
    // 8x8 cells x 2 sizes = 128 anchors available
    assert_eq!(props.len(), 128);
    for w in props.windows(2) {
        assert!(w[0].objectness >= w[1].objectness);
    }
    for p in &props {
        assert!(p.bbox.inside_image(32.0, 32.0));
        assert!((0.0..=1.0).contains(&p.objectness));
    }
    let again = det.rpn_forward(&fm, 256);
    assert_eq!(props.len(), again.len());
    assert!(props
        .iter()
        .zip(again.iter())
        .all(|(a, b)| a.bbox == b.bbox && a.objectness == b.objectness));
}

#[test]
fn rpn_respects_candidate_cap() {
    let det = Detector::new(micro_config(2, 3)).unwrap();
    let img = random_image(32, 32, 3);
    let fm = det.backbone_forward(&img).unwrap();
    assert_eq!(det.rpn_forward(&fm, 10).len(), 10);
}

#[test]
fn roi_head_probs_on_simplex() {
    let det = Detector::new(micro_config(3, 5)).unwrap();
    let img = random_image(32, 32, 4);
    let fm = det.backbone_forward(&img).unwrap();
    let rois = vec![
        BBox::new(2.0, 2.0, 14.0, 14.0).unwrap(),
        BBox::new(10.0, 8.0, 30.0, 28.0).unwrap(),
    ];
    let outs = det.roi_head(&fm, &rois).unwrap();
    assert_eq!(outs.len(), 2);
    for o in &outs {
        assert_eq!(o.probs.len(), 4);
        assert_eq!(o.regressions.len(), 3);
        let sum: f64 = o.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(o.probs.iter().all(|&p| p >= 0.0));
        assert_eq!(o.roi_feature.shape, vec![8, 3, 3]);
    }
}

#[test]
fn roi_head_duplicate_roi_identical_output() {
    let det = Detector::new(micro_config(2, 5)).unwrap();
    let img = random_image(32, 32, 4);
    let fm = det.backbone_forward(&img).unwrap();
    let r = BBox::new(4.0, 4.0, 20.0, 24.0).unwrap();
    let outs = det.roi_head(&fm, &[r, r]).unwrap();
    assert_eq!(outs[0].probs, outs[1].probs);
    assert_eq!(outs[0].regressions, outs[1].regressions);
    assert_eq!(outs[0].roi_feature, outs[1].roi_feature);
}

#[test]
fn roi_head_rejects_outside_roi() {
    let det = Detector::new(micro_config(2, 5)).unwrap();
    let img = random_image(32, 32, 4);
    let fm = det.backbone_forward(&img).unwrap();
    let r = BBox::new(-2.0, 4.0, 20.0, 24.0).unwrap();
    assert!(det.roi_head(&fm, &[r]).is_err());
}

#[test]
fn detect_threshold_one_is_empty() {
    let det = Detector::new(micro_config(2, 9)).unwrap();
    let img = random_image(32, 32, 5);
    assert!(det.detect(&img, 1.0, 0.5).unwrap().is_empty());
}

#[test]
fn detect_rejects_bad_thresholds() {
    let det = Detector::new(micro_config(2, 9)).unwrap();
    let img = random_image(32, 32, 5);
    assert!(det.detect(&img, 0.0, 0.5).is_err());
    assert!(det.detect(&img, 0.5, 1.0).is_err());
}

#[test]
fn supervised_loss_empty_gts_is_finite() {
    let det = Detector::new(micro_config(2, 13)).unwrap();
    let img = random_image(32, 32, 6);
    let (l_rcnn, l_rpn) = det.supervised_loss(&img, &[], 77).unwrap();
    assert!(l_rcnn.is_finite() && l_rcnn > 0.0);
    assert!(l_rpn.is_finite() && l_rpn > 0.0);
}

#[test]
fn supervised_loss_rejects_unknown_class() {
    let det = Detector::new(micro_config(2, 13)).unwrap();
    let img = random_image(32, 32, 6);
    let gt = Detection::new(BBox::new(4.0, 4.0, 20.0, 20.0).unwrap(), 9, 1.0).unwrap();
    assert!(det.supervised_loss(&img, &[gt], 77).is_err());
}

#[test]
fn theta_roundtrip_and_checksum() {
    let det = Detector::new(micro_config(3, 21)).unwrap();
    let theta = det.theta_flat();
    let rebuilt = Detector::from_flat(det.config.clone(), &theta).unwrap();
    assert_eq!(rebuilt.theta_checksum(), det.theta_checksum());
    assert!(Detector::from_flat(det.config.clone(), &theta[1..]).is_err());
}

#[test]
fn supervised_gradient_matches_finite_differences() {
    let det = Detector::new(micro_config(2, 42)).unwrap();
    let img = random_image(16, 16, 7);
    let gts = vec![
        Detection::new(BBox::new(2.0, 3.0, 10.0, 11.0).unwrap(), 0, 1.0).unwrap(),
        Detection::new(BBox::new(8.0, 9.0, 15.0, 15.0).unwrap(), 1, 1.0).unwrap(),
    ];
    let roi_seed = 99;

    let tape = crate::tape::Tape::new();
    let tp = det.bind_params(&tape);
    let (l_rcnn, l_rpn) = supervised_loss_parts(&det, &tape, &tp, &img, &gts, roi_seed).unwrap();
    let total = tape.add(l_rcnn, l_rpn);
    let grads = tape.backward(total);
    let flat_grad = det.flat_gradient(&tape, &tp, &grads);

    let theta = det.theta_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let step = 1e-3;
    for _ in 0..20 {
        let i = rng.gen_range(0..theta.len());
        let eval = |delta: f64| {
            let mut t = theta.clone();
            t[i] += delta;
            let d = Detector::from_flat(det.config.clone(), &t).unwrap();
            let (a, b) = d.supervised_loss(&img, &gts, roi_seed).unwrap();
            a + b
        };
        let fd = (eval(step) - eval(-step)) / (2.0 * step);
        let ad = flat_grad[i];
        let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
        assert!(
            rel < 1e-4,
            "param {i}: fd={fd:.8e} ad={ad:.8e} rel={rel:.3e}"
        );
    }
}
