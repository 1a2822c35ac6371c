//! Class-incremental object detection without base/novel co-occurrence.
//!
//! The crate trains a pair of frozen teacher detectors (base classes, novel
//! classes), blindly samples useful images from an unlabeled wild pool via
//! confidence thresholds, a transformation-consistency check, and box voting,
//! and then distills both teachers into a single student detector with three
//! distillation losses (output-level with class remodeling, image-level with
//! RoI masks, instance-level with response heatmaps) on top of the standard
//! supervised detector losses.
//!
//! Modules:
//! - [`geom`] / [`partition`] / [`image`]: shared value types.
//! - [`tensor`] / [`tape`]: dense `f64` tensors and reverse-mode autodiff.
//! - [`detector`]: a small differentiable two-stage detector.
//! - [`data`]: synthetic shapes datasets, annotation ingestion, splits, and
//!   the co-occurrence auditor.
//! - [`sampler`]: the blind sampling strategy.
//! - [`distill`]: output remodeling and the three distillation losses.
//! - [`train`]: teacher training, student distillation, incremental plans,
//!   and checkpoints.
//! - [`eval`]: VOC / COCO style mAP and base | novel | all reporting.

pub mod data;
pub mod detector;
pub mod distill;
pub mod error;
pub mod eval;
pub mod geom;
pub mod image;
pub mod partition;
pub mod sampler;
pub mod seeding;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geom::{det_order, iou, nms, BBox, Detection, ImageTransform};
pub use image::Image;
pub use partition::{ClassPartition, Side};
pub use tensor::Tensor;
