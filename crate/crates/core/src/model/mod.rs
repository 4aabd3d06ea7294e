//! The two-branch detector: backbone, per-level RPN heads and the shared
//! second-stage classifier.

pub mod backbone;
pub mod blocks;
pub mod fprn;
pub mod head;

pub use backbone::{Backbone, BackboneConfig, FeaturePyramid, STRIDES};
pub use fprn::{Fprn, FprnConfig, Magnify, RoiRequest};
pub use head::{HeadOutput, RpnHead};

use crate::anchors::{decode_box, generate_anchors, AnchorConfig};
use crate::error::{Error, Result};
use crate::loss::sigmoid;
use crate::nn::{HasParams, Mode, Param, Scalar, Tensor};
use crate::rng;
use crate::roi::Proposal;
use crate::volume::Box3D;

/// `sigmoid(-1)`, the default proposal score threshold.
pub const DEFAULT_SCORE_THRESH: f64 = 0.268_941_421_369_995_1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub anchors: AnchorConfig,
    pub fprn: FprnConfig,
    pub score_thresh: f64,
    /// Per-level cap on proposals kept before NMS.
    pub pre_nms_top_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            anchors: AnchorConfig::anchor1(),
            fprn: FprnConfig::default(),
            score_thresh: DEFAULT_SCORE_THRESH,
            pre_nms_top_k: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.anchors.validate()?;
        self.fprn.validate()?;
        if self.anchors.strides() != STRIDES {
            return Err(Error::invalid("anchors", format!("strides must be {STRIDES:?}")));
        }
        if !(0.0..=1.0).contains(&self.score_thresh) {
            return Err(Error::invalid("score_thresh", "must be in [0, 1]"));
        }
        if self.pre_nms_top_k == 0 {
            return Err(Error::invalid("pre_nms_top_k", "must be >= 1"));
        }
        Ok(())
    }
}

/// Sigmoid-scores anchors, keeps those at or above `thresh`, caps the count
/// at `top_k` by score (ties by anchor index) and decodes their boxes.
pub fn propose(logits: &[f64], regs: &[[f64; 4]], anchors: &[Box3D], stride: usize, thresh: f64, top_k: usize) -> Result<Vec<Proposal>> {
    if logits.len() != anchors.len() || regs.len() != anchors.len() {
        return Err(Error::shape("propose anchors", anchors.len(), logits.len()));
    }
    let mut keep: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| (i, sigmoid(z)))
        .filter(|&(_, p)| p >= thresh)
        .collect();
    keep.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    keep.truncate(top_k);
    Ok(keep
        .into_iter()
        .map(|(i, p)| Proposal::from_rpn(decode_box(&anchors[i], regs[i]), p, stride))
        .collect())
}

/// Which parameters an optimizer step touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    All,
    BackboneRpn,
    Fprn,
}

#[derive(Debug, Clone)]
pub struct Detector<T: Scalar = f32> {
    pub cfg: ModelConfig,
    pub backbone: Backbone<T>,
    pub heads: Vec<RpnHead<T>>,
    pub fprn: Fprn<T>,
}

/// Result of the shared backbone and the RPN heads on a batch.
#[derive(Debug, Clone)]
pub struct RpnForward<T: Scalar> {
    pub pyramid: FeaturePyramid<T>,
    pub heads: Vec<HeadOutput>,
}

impl<T: Scalar> Detector<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::derive(seed, 0x4D0D_E100);
        let backbone = Backbone::new(cfg.backbone.clone(), &mut r)?;
        let pc = cfg.backbone.pyramid_channels;
        let heads = cfg
            .anchors
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| RpnHead::new(&format!("head{i}"), pc, cfg.backbone.growth, cfg.backbone.bottleneck, l.diameters.len(), &mut r))
            .collect();
        let fprn = Fprn::new(cfg.fprn.clone(), pc, STRIDES.len(), &mut r)?;
        Ok(Detector { cfg, backbone, heads, fprn })
    }

    pub fn strides(&self) -> Vec<usize> {
        self.cfg.anchors.strides()
    }

    pub fn forward_rpn(&mut self, x: &Tensor<T>, mode: Mode) -> Result<RpnForward<T>> {
        let pyramid = self.backbone.forward(x, mode)?;
        let heads = self
            .heads
            .iter_mut()
            .zip(&pyramid)
            .map(|(h, p)| h.forward(p, mode))
            .collect::<Result<Vec<_>>>()?;
        Ok(RpnForward { pyramid, heads })
    }

    /// Anchors of one batch item, per level, in head output order.
    pub fn anchors_for(&self, heads: &[HeadOutput]) -> Vec<Vec<Box3D>> {
        heads
            .iter()
            .zip(&self.cfg.anchors.levels)
            .map(|(h, l)| generate_anchors(h.dims, l.stride, &l.diameters))
            .collect()
    }

    /// Raw (pre-NMS) proposals of batch item `b` from every level.
    pub fn proposals(&self, heads: &[HeadOutput], anchors: &[Vec<Box3D>], b: usize) -> Result<Vec<Proposal>> {
        let mut out = Vec::new();
        for ((h, a), l) in heads.iter().zip(anchors).zip(&self.cfg.anchors.levels) {
            let per = h.per_item();
            let range = b * per..(b + 1) * per;
            out.extend(propose(
                &h.logits[range.clone()],
                &h.regs[range],
                a,
                l.stride,
                self.cfg.score_thresh,
                self.cfg.pre_nms_top_k,
            )?);
        }
        Ok(out)
    }

    /// Scores proposals of batch item `b` with the second branch in
    /// evaluation mode, in chunks to bound memory.
    pub fn rescore(&mut self, pyramid: &[Tensor<T>], b: usize, props: Vec<Proposal>) -> Result<Vec<Proposal>> {
        const CHUNK: usize = 32;
        let strides = self.strides();
        let mut out = Vec::with_capacity(props.len());
        for chunk in props.chunks(CHUNK) {
            let reqs: Vec<RoiRequest> = chunk
                .iter()
                .map(|p| RoiRequest {
                    batch: b,
                    proposal: p.clone(),
                })
                .collect();
            let logits = self.fprn.forward(pyramid, &strides, &reqs, Mode::Eval)?;
            out.extend(chunk.iter().zip(logits).map(|(p, z)| p.clone().with_fpr(sigmoid(z))));
        }
        Ok(out)
    }

    /// Inference on a single-item input `[1, 1, z, y, x]`: raw proposals,
    /// rescored and fused when `with_fprn` is set.
    pub fn full_forward(&mut self, x: &Tensor<T>, with_fprn: bool) -> Result<Vec<Proposal>> {
        let n = x.dims5()?[0];
        if n != 1 {
            return Err(Error::shape("full_forward batch", 1, n));
        }
        let fwd = self.forward_rpn(x, Mode::Eval)?;
        let anchors = self.anchors_for(&fwd.heads);
        let props = self.proposals(&fwd.heads, &anchors, 0)?;
        if !with_fprn || props.is_empty() {
            return Ok(props);
        }
        self.rescore(&fwd.pyramid, 0, props)
    }

    pub fn group(&mut self, which: ParamGroup) -> GroupView<'_, T> {
        GroupView { det: self, which }
    }
}

impl<T: Scalar> HasParams<T> for Detector<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.backbone.visit_params(f);
        for h in &mut self.heads {
            h.visit_params(f);
        }
        self.fprn.visit_params(f);
    }
}

/// A subset of the detector's parameters.
pub struct GroupView<'a, T: Scalar> {
    det: &'a mut Detector<T>,
    which: ParamGroup,
}

impl<T: Scalar> HasParams<T> for GroupView<'_, T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self.which {
            ParamGroup::All => self.det.visit_params(f),
            ParamGroup::BackboneRpn => {
                self.det.backbone.visit_params(f);
                for h in &mut self.det.heads {
                    h.visit_params(f);
                }
            }
            ParamGroup::Fprn => self.det.fprn.visit_params(f),
        }
    }
}

/// Anything that maps a single-item input volume tensor to proposals; lets
/// hard-region mining and inference run against stand-in models.
pub trait DetectorLike {
    /// Spatial multiple the input must have.
    fn input_multiple(&self) -> usize {
        16
    }

    fn detect(&mut self, x: &Tensor<f32>, with_fprn: bool) -> Result<Vec<Proposal>>;
}

impl DetectorLike for Detector<f32> {
    fn detect(&mut self, x: &Tensor<f32>, with_fprn: bool) -> Result<Vec<Proposal>> {
        self.full_forward(x, with_fprn)
    }
}
