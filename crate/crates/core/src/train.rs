//! Crop sampling, hard-region mining and the training loops.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::anchors::{assign_anchors, AnchorConfig, AnchorLabels, MatchConfig};
use crate::error::{Error, Result};
use crate::infer::{infer_scan, InferConfig};
use crate::loss::{fprn_loss, rpn_loss, FocalConfig, FocusShiftState, LevelBatch};
use crate::model::{Detector, DetectorLike, HeadOutput, ModelConfig, ParamGroup, RoiRequest};
use crate::nn::{save_checkpoint, sgd_step, HasParams, Mode, Param, SgdConfig, Tensor};
use crate::rng::{self, DetRng};
use crate::roi::Proposal;
use crate::volume::{crop_pad, Box3D, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    RpnOnly,
    Joint,
    Alternating,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::RpnOnly => "rpn_only",
            TrainMode::Joint => "joint",
            TrainMode::Alternating => "alternating",
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rpn_only" => Ok(TrainMode::RpnOnly),
            "joint" => Ok(TrainMode::Joint),
            "alternating" => Ok(TrainMode::Alternating),
            other => Err(Error::invalid("mode", format!("unknown mode `{other}` (rpn_only|joint|alternating)"))),
        }
    }
}

/// Step decay: `start · decay^k` after the k-th milestone epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub decay: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.start * self.decay.powi(k as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Epochs of RPN-only training before the second branch is attached.
    pub warmup_epochs: usize,
    /// Epochs in `mode` after warmup.
    pub epochs: usize,
    /// Extra epochs with hard-region sampling after one mining pass.
    pub abs_epochs: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    /// Iterations per epoch; by default one crop per training scan.
    pub iters_per_epoch: Option<usize>,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub mode: TrainMode,
    pub abs_enabled: bool,
    pub abs_focus_prob: f64,
    /// Fused score above which a missed proposal becomes a hard region.
    pub abs_score_thresh: f64,
    /// Probability of centering a crop on a lesion when not hard-sampling.
    pub gt_center_prob: f64,
    /// Random axis flips of training crops.
    pub flip: bool,
    pub pad_value: f32,
    /// Cap on second-branch proposals per batch.
    pub fprn_cap: usize,
    /// Jittered copies of each lesion box added as second-branch positives.
    pub fprn_gt_jitter: usize,
    pub focal: FocalConfig,
    pub focus_t0: f64,
    pub focus_t1: f64,
    pub tn_threshold: f64,
    pub reg_weight: f64,
    pub matching: MatchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_epochs: 20,
            epochs: 40,
            abs_epochs: 0,
            batch_size: 2,
            crop_size: 32,
            iters_per_epoch: None,
            lr: LrSchedule {
                start: 0.01,
                decay: 0.1,
                milestones: vec![48],
            },
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 10.0,
            mode: TrainMode::Joint,
            abs_enabled: false,
            abs_focus_prob: 0.5,
            abs_score_thresh: 0.5,
            gt_center_prob: 0.5,
            flip: true,
            pad_value: 0.0,
            fprn_cap: 48,
            fprn_gt_jitter: 2,
            focal: FocalConfig::default(),
            focus_t0: 1.0,
            focus_t1: 10.0,
            tn_threshold: 0.5,
            reg_weight: 1.0,
            matching: MatchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if self.crop_size == 0 || self.crop_size % 16 != 0 {
            return Err(Error::invalid("crop_size", format!("must be a positive multiple of 16, got {}", self.crop_size)));
        }
        if self.iters_per_epoch == Some(0) {
            return Err(Error::invalid("iters_per_epoch", "must be >= 1"));
        }
        for (name, p) in [
            ("abs_focus_prob", self.abs_focus_prob),
            ("abs_score_thresh", self.abs_score_thresh),
            ("gt_center_prob", self.gt_center_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(name, format!("must be in [0, 1], got {p}")));
            }
        }
        if !(self.lr.start > 0.0 && self.lr.decay > 0.0) {
            return Err(Error::invalid("lr", "start and decay must be > 0"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::invalid("clip_norm", "must be >= 0"));
        }
        if !(self.reg_weight >= 0.0) {
            return Err(Error::invalid("reg_weight", "must be >= 0"));
        }
        self.focal.validate()?;
        self.matching.validate()?;
        self.sgd(self.lr.start).validate()?;
        self.focus(0, 1).validate()
    }

    pub fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn focus(&self, iter: usize, total: usize) -> FocusShiftState {
        FocusShiftState {
            iter,
            total_iters: total.max(1),
            t0: self.focus_t0,
            t1: self.focus_t1,
            tn_threshold: self.tn_threshold,
        }
    }

    pub fn iters_for(&self, n_scans: usize) -> usize {
        self.iters_per_epoch.unwrap_or_else(|| n_scans.div_ceil(self.batch_size).max(1))
    }

    /// `(epochs, mode, uses hard regions)` per stage.
    fn stages(&self) -> Vec<(usize, TrainMode, bool)> {
        let mut s = vec![(self.warmup_epochs, TrainMode::RpnOnly, false), (self.epochs, self.mode, false)];
        if self.abs_enabled {
            s.push((self.abs_epochs, self.mode, true));
        }
        s
    }
}

/// A training scan held in memory.
#[derive(Debug, Clone)]
pub struct TrainScan {
    pub id: String,
    pub volume: Volume,
    pub gts: Vec<Box3D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardRegion {
    pub scan_id: String,
    pub center: [f64; 3],
    pub score: f64,
}

/// False-positive regions found by a mining pass, per scan.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HardRegionPool {
    pub regions: BTreeMap<String, Vec<HardRegion>>,
}

impl HardRegionPool {
    pub fn len(&self) -> usize {
        self.regions.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn for_scan(&self, scan_id: &str) -> &[HardRegion] {
        self.regions.get(scan_id).map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropKind {
    HardRegion,
    Lesion,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledCrop {
    pub volume: Volume,
    /// Lesions in crop coordinates whose centers fall inside the crop.
    pub boxes: Vec<Box3D>,
    pub origin: [i64; 3],
    pub kind: CropKind,
}

/// Crop origin placing `center` within `crop/4` of the crop center on each
/// axis.
fn jittered_origin(center: [f64; 3], crop: usize, rng: &mut DetRng) -> [i64; 3] {
    let half = crop as f64 / 2.0;
    let j = (crop as f64 / 4.0 - 0.5).max(0.0);
    center.map(|c| (c - half + rng::uniform(rng, -j, j)).round() as i64)
}

/// Draws one training crop: around a hard region with probability
/// `focus_prob` when `hard` is non-empty, otherwise around a random lesion
/// with probability `gt_prob`, otherwise uniformly. Out-of-volume voxels are
/// filled with `fill`.
#[allow(clippy::too_many_arguments)]
pub fn sample_crop(
    volume: &Volume,
    gts: &[Box3D],
    crop: usize,
    hard: &[HardRegion],
    focus_prob: f64,
    gt_prob: f64,
    fill: f32,
    rng: &mut DetRng,
) -> Result<SampledCrop> {
    if crop == 0 {
        return Err(Error::invalid("crop", "must be >= 1"));
    }
    let dims = volume.dims();
    let (origin, kind) = if !hard.is_empty() && rng::coin(rng, focus_prob) {
        let r = &hard[rng::index(rng, hard.len())];
        (jittered_origin(r.center, crop, rng), CropKind::HardRegion)
    } else if !gts.is_empty() && rng::coin(rng, gt_prob) {
        let g = &gts[rng::index(rng, gts.len())];
        (jittered_origin(g.center(), crop, rng), CropKind::Lesion)
    } else {
        let o = dims.map(|n| if n > crop { rng::index(rng, n - crop + 1) as i64 } else { -(((crop - n) / 2) as i64) });
        (o, CropKind::Uniform)
    };
    let cropped = crop_pad(volume, origin, [crop; 3], fill)?;
    let boxes = gts
        .iter()
        .map(|g| g.translated(-origin[0] as f64, -origin[1] as f64, -origin[2] as f64))
        .filter(|g| g.center().iter().all(|&c| c >= 0.0 && c < crop as f64))
        .collect();
    Ok(SampledCrop {
        volume: cropped,
        boxes,
        origin,
        kind,
    })
}

/// Mirrors a cubic crop and its boxes along the chosen axes.
pub fn flip_crop(crop: &mut SampledCrop, axes: [bool; 3]) {
    let [d, h, w] = crop.volume.dims();
    let src = crop.volume.data().to_vec();
    let dst = crop.volume.data_mut();
    for z in 0..d {
        let sz = if axes[0] { d - 1 - z } else { z };
        for y in 0..h {
            let sy = if axes[1] { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if axes[2] { w - 1 - x } else { x };
                dst[(z * h + y) * w + x] = src[(sz * h + sy) * w + sx];
            }
        }
    }
    let ext = [d as f64, h as f64, w as f64];
    for b in &mut crop.boxes {
        let mut c = b.center();
        for a in 0..3 {
            if axes[a] {
                c[a] = ext[a] - c[a];
            }
        }
        *b = Box3D::new(c[0], c[1], c[2], b.d);
    }
}

/// Runs inference over every scan and pools proposals scoring at least
/// `score_thresh` that hit no lesion.
pub fn mine_hard_regions<M: DetectorLike + ?Sized>(model: &mut M, scans: &[TrainScan], score_thresh: f64, infer: &InferConfig) -> Result<HardRegionPool> {
    let mut pool = HardRegionPool::default();
    for s in scans {
        let det = infer_scan(&mut [&mut *model], &s.volume, infer)?;
        let found: Vec<HardRegion> = det
            .fused
            .iter()
            .filter(|p| p.score >= score_thresh && !s.gts.iter().any(|g| g.sphere_contains(p.box3d.center())))
            .map(|p| HardRegion {
                scan_id: s.id.clone(),
                center: p.box3d.center(),
                score: p.score,
            })
            .collect();
        if !found.is_empty() {
            pool.regions.insert(s.id.clone(), found);
        }
    }
    Ok(pool)
}

/// Crops stacked into a network input.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor<f32>,
    pub gts: Vec<Vec<Box3D>>,
}

impl Batch {
    pub fn from_crops(crops: Vec<SampledCrop>) -> Result<Self> {
        let Some(first) = crops.first() else {
            return Err(Error::invalid("crops", "empty batch"));
        };
        let dims = first.volume.dims();
        let mut data = Vec::with_capacity(crops.len() * first.volume.len());
        let mut gts = Vec::with_capacity(crops.len());
        for c in &crops {
            if c.volume.dims() != dims {
                return Err(Error::shape("crop dims", format!("{dims:?}"), format!("{:?}", c.volume.dims())));
            }
            data.extend_from_slice(c.volume.data());
            gts.push(c.boxes.clone());
        }
        let x = Tensor::from_vec(&[crops.len(), 1, dims[0], dims[1], dims[2]], data)?;
        Ok(Batch { x, gts })
    }

    pub fn len(&self) -> usize {
        self.gts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gts.is_empty()
    }
}

/// Loss breakdown of one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub loss_neg: f64,
    pub loss_pos: f64,
    pub loss_reg: f64,
    pub loss_fpr: f64,
    pub n_pos: usize,
    pub n_tn: usize,
    /// Second-branch samples (positives, total).
    pub n_fpr_pos: usize,
    pub n_fpr: usize,
}

/// Per-iteration settings handed to the step functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub iter: usize,
    pub focus: FocusShiftState,
    pub sgd: SgdConfig,
}

/// Anchor labels of a whole batch per level, items concatenated in order.
fn level_labels(model: &Detector<f32>, heads: &[HeadOutput], gts: &[Vec<Box3D>], cfg: &MatchConfig) -> Vec<AnchorLabels> {
    let anchors = model.anchors_for(heads);
    anchors
        .iter()
        .map(|level| {
            let mut all = AnchorLabels {
                labels: Vec::new(),
                matched: Vec::new(),
                targets: Vec::new(),
            };
            for g in gts {
                let l = assign_anchors(level, g, cfg);
                all.labels.extend(l.labels);
                all.matched.extend(l.matched);
                all.targets.extend(l.targets);
            }
            all
        })
        .collect()
}

/// Pyramid stride whose anchor diameters best match `d` in log scale.
pub fn level_for_diameter(anchors: &AnchorConfig, d: f64) -> usize {
    let mut best = (f64::INFINITY, anchors.levels[0].stride);
    for l in &anchors.levels {
        for &a in &l.diameters {
            let e = (d / a).ln().abs();
            if e < best.0 {
                best = (e, l.stride);
            }
        }
    }
    best.1
}

/// Second-branch training set for a batch: raw proposals plus lesion boxes
/// (and jittered copies), labeled by center-in-sphere, with at most three
/// negatives per positive and `cap` in total.
fn fprn_samples(
    model: &Detector<f32>,
    heads: &[HeadOutput],
    gts: &[Vec<Box3D>],
    cfg: &TrainConfig,
    rng: &mut DetRng,
) -> Result<(Vec<RoiRequest>, Vec<bool>)> {
    let anchors = model.anchors_for(heads);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (b, g) in gts.iter().enumerate() {
        let mut cands = model.proposals(heads, &anchors, b)?;
        for gt in g {
            cands.push(Proposal::from_rpn(*gt, 1.0, level_for_diameter(&model.cfg.anchors, gt.d)));
            for _ in 0..cfg.fprn_gt_jitter {
                let r = gt.radius();
                let c = gt.center().map(|v| v + rng::uniform(rng, -0.5, 0.5) * r);
                let d = gt.d * rng::uniform(rng, 0.8, 1.25);
                cands.push(Proposal::from_rpn(Box3D::new(c[0], c[1], c[2], d), 1.0, level_for_diameter(&model.cfg.anchors, d)));
            }
        }
        for p in cands {
            let hit = g.iter().any(|gt| gt.sphere_contains(p.box3d.center()));
            let req = RoiRequest { batch: b, proposal: p };
            if hit {
                pos.push(req);
            } else {
                neg.push(req);
            }
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(cfg.fprn_cap);
    let n_neg = neg.len().min(3 * pos.len().max(1)).min(cfg.fprn_cap - pos.len());
    neg.truncate(n_neg);
    let labels = pos.iter().map(|_| true).chain(neg.iter().map(|_| false)).collect();
    pos.extend(neg);
    Ok((pos, labels))
}

/// Scales a parameter group's gradients so their global norm is at most
/// `max_norm`.
fn clip_gradients<M: HasParams<f32> + ?Sized>(m: &mut M, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = m.grad_norm_sq().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        m.visit_params(&mut |p: &mut Param<f32>| {
            if p.trainable {
                for g in p.grad.data_mut() {
                    *g *= s;
                }
            }
        });
    }
}

fn check_finite(loss: &StepLoss, iter: usize) -> Result<()> {
    if loss.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            iter,
            reason: format!("non-finite loss (neg {}, pos {}, reg {}, fpr {})", loss.loss_neg, loss.loss_pos, loss.loss_reg, loss.loss_fpr),
        })
    }
}

fn apply_step(model: &mut Detector<f32>, group: ParamGroup, cfg: &TrainConfig, p: &StepParams) -> Result<()> {
    let mut view = model.group(group);
    clip_gradients(&mut view, cfg.clip_norm);
    sgd_step(&mut view, &p.sgd, p.iter)
}

struct RpnPass {
    pyramid_grads: Vec<Tensor<f32>>,
    loss: StepLoss,
}

/// RPN loss and gradients back to the pyramid (heads' parameter gradients
/// accumulate on the way).
fn rpn_backward(model: &mut Detector<f32>, heads: &[HeadOutput], gts: &[Vec<Box3D>], cfg: &TrainConfig, p: &StepParams) -> Result<RpnPass> {
    let labels = level_labels(model, heads, gts, &cfg.matching);
    let levels: Vec<LevelBatch> = heads
        .iter()
        .zip(&labels)
        .map(|(h, l)| LevelBatch {
            logits: &h.logits,
            regs: &h.regs,
            labels: l,
        })
        .collect();
    let out = rpn_loss(&levels, &cfg.focal, &p.focus, cfg.reg_weight)?;
    let loss = StepLoss {
        total: out.total,
        loss_neg: out.loss_neg,
        loss_pos: out.loss_pos,
        loss_reg: out.loss_reg,
        n_pos: out.n_pos,
        n_tn: out.n_tn,
        ..Default::default()
    };
    check_finite(&loss, p.iter)?;
    let mut pyramid_grads = Vec::with_capacity(heads.len());
    for ((h, gl), gr) in model.heads.iter_mut().zip(&out.grad_logits).zip(&out.grad_regs) {
        pyramid_grads.push(h.backward(gl, gr)?);
    }
    Ok(RpnPass { pyramid_grads, loss })
}

/// Backbone and RPN heads on the RPN loss alone; the second branch is not
/// touched.
pub fn train_step_rpn(model: &mut Detector<f32>, batch: &Batch, cfg: &TrainConfig, p: &StepParams) -> Result<StepLoss> {
    let fwd = model.forward_rpn(&batch.x, Mode::Train)?;
    let pass = rpn_backward(model, &fwd.heads, &batch.gts, cfg, p)?;
    model.backbone.backward(&pass.pyramid_grads)?;
    apply_step(model, ParamGroup::BackboneRpn, cfg, p)?;
    Ok(pass.loss)
}

/// One forward of both branches, the summed loss, one update of every
/// parameter.
pub fn train_step_joint(model: &mut Detector<f32>, batch: &Batch, cfg: &TrainConfig, p: &StepParams, rng: &mut DetRng) -> Result<StepLoss> {
    let fwd = model.forward_rpn(&batch.x, Mode::Train)?;
    let mut pass = rpn_backward(model, &fwd.heads, &batch.gts, cfg, p)?;
    let (rois, labels) = fprn_samples(model, &fwd.heads, &batch.gts, cfg, rng)?;
    if !rois.is_empty() {
        let strides = model.strides();
        let logits = model.fprn.forward(&fwd.pyramid, &strides, &rois, Mode::Train)?;
        let (l, g) = fprn_loss(&logits, &labels)?;
        pass.loss.loss_fpr = l;
        pass.loss.total += l;
        pass.loss.n_fpr = labels.len();
        pass.loss.n_fpr_pos = labels.iter().filter(|&&b| b).count();
        check_finite(&pass.loss, p.iter)?;
        let gp = model.fprn.backward(&g, true)?.expect("pyramid gradients requested");
        for (a, b) in pass.pyramid_grads.iter_mut().zip(&gp) {
            a.add_assign(b)?;
        }
    }
    model.backbone.backward(&pass.pyramid_grads)?;
    apply_step(model, ParamGroup::All, cfg, p)?;
    Ok(pass.loss)
}

/// Second branch alone on features from the frozen backbone (inference
/// mode, so normalization statistics stay put).
pub fn train_step_fprn(model: &mut Detector<f32>, batch: &Batch, cfg: &TrainConfig, p: &StepParams, rng: &mut DetRng) -> Result<StepLoss> {
    let fwd = model.forward_rpn(&batch.x, Mode::Eval)?;
    let (rois, labels) = fprn_samples(model, &fwd.heads, &batch.gts, cfg, rng)?;
    let mut loss = StepLoss::default();
    if rois.is_empty() {
        return Ok(loss);
    }
    let strides = model.strides();
    let logits = model.fprn.forward(&fwd.pyramid, &strides, &rois, Mode::Train)?;
    let (l, g) = fprn_loss(&logits, &labels)?;
    loss.loss_fpr = l;
    loss.total = l;
    loss.n_fpr = labels.len();
    loss.n_fpr_pos = labels.iter().filter(|&&b| b).count();
    check_finite(&loss, p.iter)?;
    model.fprn.backward(&g, false)?;
    apply_step(model, ParamGroup::Fprn, cfg, p)?;
    Ok(loss)
}

/// Even iterations update backbone and RPN heads, odd ones the second
/// branch.
pub fn train_step_alternating(model: &mut Detector<f32>, batch: &Batch, cfg: &TrainConfig, p: &StepParams, rng: &mut DetRng) -> Result<StepLoss> {
    if p.iter % 2 == 0 {
        train_step_rpn(model, batch, cfg, p)
    } else {
        train_step_fprn(model, batch, cfg, p, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss: StepLoss,
}

pub const LOG_HEADER: &str = "iter,loss_total,loss_neg,loss_pos,loss_reg,loss_fpr,n_pos,n_tn";

pub fn format_log(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let l = &r.loss;
        let _ = writeln!(
            s,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{},{}",
            r.iter, l.total, l.loss_neg, l.loss_pos, l.loss_reg, l.loss_fpr, l.n_pos, l.n_tn
        );
    }
    s
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Detector<f32>,
    pub log: Vec<LogRow>,
    pub pool: HardRegionPool,
}

/// Stream ids separating the random draws of training from model init.
const DATA_STREAM: u64 = 0xDA7A;

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Full schedule: RPN warmup, `cfg.mode` training, then optionally one
/// hard-region mining pass and further training with those regions
/// boosted. With `out_dir`, writes `epoch_NNN.ckpt` after every epoch,
/// `model.ckpt` and `train_log.csv` at the end. On divergence the log so
/// far is written and the last epoch checkpoint is the last good state.
pub fn run_training(scans: &[TrainScan], model_cfg: &ModelConfig, cfg: &TrainConfig, seed: u64, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scans.is_empty() {
        return Err(Error::invalid("scans", "no training scans"));
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut model = Detector::<f32>::new(model_cfg.clone(), seed)?;
    let mut rng = rng::derive(seed, DATA_STREAM);
    let ipe = cfg.iters_for(scans.len());
    let stages = cfg.stages();
    let total: usize = stages.iter().map(|s| s.0 * ipe).sum();
    let mut log = Vec::with_capacity(total);
    let mut pool = HardRegionPool::default();
    let mut iter = 0;
    let mut epoch = 0;
    let mut order: Vec<usize> = Vec::new();
    let infer = InferConfig {
        with_fprn: cfg.mode != TrainMode::RpnOnly,
        ..InferConfig::default()
    };
    let result = (|| -> Result<()> {
        for &(n_epochs, mode, hard) in &stages {
            if hard {
                pool = mine_hard_regions(&mut model, scans, cfg.abs_score_thresh, &infer)?;
            }
            for _ in 0..n_epochs {
                let lr = cfg.lr.lr_at(epoch);
                for _ in 0..ipe {
                    let mut crops = Vec::with_capacity(cfg.batch_size);
                    for _ in 0..cfg.batch_size {
                        if order.is_empty() {
                            order = (0..scans.len()).collect();
                            order.shuffle(&mut rng);
                        }
                        let s = &scans[order.pop().expect("refilled")];
                        let focus = if hard { cfg.abs_focus_prob } else { 0.0 };
                        let mut c = sample_crop(
                            &s.volume,
                            &s.gts,
                            cfg.crop_size,
                            pool.for_scan(&s.id),
                            focus,
                            cfg.gt_center_prob,
                            cfg.pad_value,
                            &mut rng,
                        )?;
                        if cfg.flip {
                            let axes = [0; 3].map(|_| rng::coin(&mut rng, 0.5));
                            flip_crop(&mut c, axes);
                        }
                        crops.push(c);
                    }
                    let batch = Batch::from_crops(crops)?;
                    let p = StepParams {
                        iter,
                        focus: cfg.focus(iter, total),
                        sgd: cfg.sgd(lr),
                    };
                    let loss = match mode {
                        TrainMode::RpnOnly => train_step_rpn(&mut model, &batch, cfg, &p)?,
                        TrainMode::Joint => train_step_joint(&mut model, &batch, cfg, &p, &mut rng)?,
                        TrainMode::Alternating => train_step_alternating(&mut model, &batch, cfg, &p, &mut rng)?,
                    };
                    log.push(LogRow { iter, loss });
                    iter += 1;
                }
                if let Some(d) = out_dir {
                    save_checkpoint(&d.join(format!("epoch_{epoch:03}.ckpt")), &mut model)?;
                }
                epoch += 1;
            }
        }
        Ok(())
    })();
    if let Some(d) = out_dir {
        write_file(&d.join("train_log.csv"), &format_log(&log))?;
        if result.is_ok() {
            save_checkpoint(&d.join("model.ckpt"), &mut model)?;
        }
    }
    result?;
    Ok(TrainOutcome { model, log, pool })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(n: usize) -> Volume {
        let data = (0..n * n * n).map(|i| i as f32).collect();
        Volume::new([n; 3], [1.0; 3], data).unwrap()
    }

    #[test]
    fn uniform_crop_without_lesions() {
        let mut r = rng::seeded(1);
        let c = sample_crop(&vol(40), &[], 16, &[], 0.5, 0.5, 0.0, &mut r).unwrap();
        assert_eq!(c.kind, CropKind::Uniform);
        assert!(c.boxes.is_empty());
        assert!(c.origin.iter().all(|&o| (0..=24).contains(&o)));
    }

    #[test]
    fn lesion_crop_keeps_lesion_near_center() {
        let mut r = rng::seeded(2);
        let g = Box3D::new(20.3, 11.7, 30.2, 6.0);
        for _ in 0..200 {
            let c = sample_crop(&vol(48), &[g], 32, &[], 0.0, 1.0, 0.0, &mut r).unwrap();
            assert_eq!(c.kind, CropKind::Lesion);
            assert_eq!(c.boxes.len(), 1);
            for a in 0..3 {
                assert!((c.boxes[0].center()[a] - 16.0).abs() <= 8.0 + 1e-9);
            }
        }
    }

    #[test]
    fn focus_fraction_matches_probability() {
        let mut r = rng::seeded(3);
        let hard = vec![HardRegion {
            scan_id: "a".into(),
            center: [10.0, 10.0, 10.0],
            score: 0.9,
        }];
        let v = vol(32);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| sample_crop(&v, &[], 16, &hard, 0.5, 0.5, 0.0, &mut r).unwrap().kind == CropKind::HardRegion)
            .count();
        let f = hits as f64 / n as f64;
        assert!((f - 0.5).abs() <= 0.02, "{f}");
    }

    #[test]
    fn flip_moves_voxels_and_boxes_together() {
        let v = vol(4);
        let mut c = SampledCrop {
            volume: v.clone(),
            boxes: vec![Box3D::new(0.5, 1.5, 3.5, 1.0)],
            origin: [0; 3],
            kind: CropKind::Uniform,
        };
        flip_crop(&mut c, [true, false, true]);
        assert_eq!(c.volume.get(3, 1, 0), v.get(0, 1, 3));
        assert_eq!(c.boxes[0].center(), [3.5, 1.5, 0.5]);
        flip_crop(&mut c, [true, false, true]);
        assert_eq!(c.volume, v);
    }

    #[test]
    fn lr_steps_at_milestones() {
        let s = LrSchedule {
            start: 0.1,
            decay: 0.5,
            milestones: vec![2, 4],
        };
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(2), 0.05);
        assert_eq!(s.lr_at(5), 0.025);
    }

    #[test]
    fn level_choice_by_diameter() {
        let a = AnchorConfig::anchor1();
        assert_eq!(level_for_diameter(&a, 5.0), 4);
        assert_eq!(level_for_diameter(&a, 10.0), 8);
        assert_eq!(level_for_diameter(&a, 30.0), 16);
    }

    #[test]
    fn mode_round_trip() {
        for m in [TrainMode::RpnOnly, TrainMode::Joint, TrainMode::Alternating] {
            assert_eq!(m.as_str().parse::<TrainMode>().unwrap(), m);
        }
        assert!("both".parse::<TrainMode>().is_err());
    }
}
