//! Volumetric small-object detection with a two-branch 3-D detector.
//!
//! The pipeline: synthetic or loaded volumes, a dense encoder/decoder
//! backbone with a three-level feature pyramid, per-level region proposal
//! heads trained with an adaptive focal loss, a second-stage classifier over
//! aligned multi-level RoI features, tiled inference with NMS, and
//! FROC-based evaluation.

pub mod anchors;
pub mod config;
pub mod error;
pub mod eval;
pub mod infer;
pub mod io;
pub mod loss;
pub mod model;
pub mod nn;
pub mod rng;
pub mod roi;
pub mod synth;
pub mod train;
pub mod verify;
pub mod volume;

pub use anchors::{assign_anchors, cube_iou, decode_box, encode_targets, generate_anchors, AnchorConfig, AnchorLabels, Label, MatchConfig};
pub use error::{Error, Result};
pub use eval::{evaluate, froc, match_hits, sensitivity_by_bucket, tnp_score, EvalReport, EvalResult, EvalSet, FP_RATES};
pub use infer::{ensemble_merge, infer_scan, merge_tiles, nms_3d, tile_volume, EnsembleMode, InferConfig, NmsConfig, TileSpec};
pub use loss::{focal_adaptive, focal_vanilla, fprn_loss, rpn_loss, smooth_l1, FocalConfig, FocusShiftState};
pub use model::{propose, Detector, DetectorLike, ModelConfig};
pub use nn::{Mode, Param, Scalar, Tensor};
pub use roi::{diameter_align, fuse_scores, roi_align_3d, Proposal, RoiGeometry};
pub use synth::{generate_dataset, generate_phantom, Annotation, PhantomSpec};
pub use volume::{Box3D, Volume};
