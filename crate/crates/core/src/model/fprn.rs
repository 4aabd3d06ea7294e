//! Second-stage classifier: aligned multi-level crops, optional local
//! magnification, RoI Align and a two-layer head shared by all levels.

use super::blocks::ResBottleneck;
use crate::error::{Error, Result};
use crate::nn::{Deconv3dX2, HasParams, Linear, Mode, Param, Relu, Scalar, Tensor};
use crate::rng::DetRng;
use crate::roi::{
    crop_backward, crop_origin, crop_with_margin, diameter_align, roi_align_slice, roi_align_slice_backward, AlignConfig, Proposal,
    RoiBox,
};

#[derive(Debug, Clone, PartialEq)]
pub struct FprnConfig {
    /// Side of the fixed crop around each proposal, in feature cells (odd).
    pub crop_side: usize,
    pub magnify: bool,
    pub magnify_bias: bool,
    pub align: AlignConfig,
    pub hidden: usize,
}

impl Default for FprnConfig {
    fn default() -> Self {
        FprnConfig {
            crop_side: 5,
            magnify: false,
            magnify_bias: false,
            align: AlignConfig::default(),
            hidden: 256,
        }
    }
}

impl FprnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_side == 0 || self.crop_side % 2 == 0 {
            return Err(Error::invalid("fprn_crop", "must be odd"));
        }
        if self.align.out_size == 0 || self.align.samples == 0 || self.hidden == 0 {
            return Err(Error::invalid("fprn", "align sizes and hidden width must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct MagnifyStage<T: Scalar> {
    up: Deconv3dX2<T>,
    blocks: [ResBottleneck<T>; 2],
}

/// Two stages of (×2 transposed conv, two residual bottlenecks): ×4
/// spatial magnification with the channel count preserved.
#[derive(Debug, Clone)]
pub struct Magnify<T: Scalar> {
    stages: [MagnifyStage<T>; 2],
}

impl<T: Scalar> Magnify<T> {
    pub const FACTOR: usize = 4;

    pub fn new(name: &str, ch: usize, bias: bool, rng: &mut DetRng) -> Self {
        let mut stage = |i: usize| {
            let mut up = Deconv3dX2::new(&format!("{name}.{i}.up"), ch, ch, bias, rng);
            // The transposed conv feeds each output from a single tap, so
            // fan-in is `ch`; start as a near-copy of the input.
            up.weight.value = up.weight.value.map(|v| v * T::of(0.5));
            MagnifyStage {
                up,
                blocks: [
                    ResBottleneck::new(&format!("{name}.{i}.b0"), ch, ch / 2, bias, rng),
                    ResBottleneck::new(&format!("{name}.{i}.b1"), ch, ch / 2, bias, rng),
                ],
            }
        };
        let s0 = stage(0);
        let s1 = stage(1);
        Magnify { stages: [s0, s1] }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for s in &mut self.stages {
            h = s.up.forward(&h, mode)?;
            for b in &mut s.blocks {
                h = b.forward(&h, mode)?;
            }
        }
        Ok(h)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = g.clone();
        for s in self.stages.iter_mut().rev() {
            for b in s.blocks.iter_mut().rev() {
                g = b.backward(&g)?;
            }
            g = s.up.backward(&g)?;
        }
        Ok(g)
    }
}

impl<T: Scalar> HasParams<T> for Magnify<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for s in &mut self.stages {
            s.up.visit_params(f);
            for b in &mut s.blocks {
                b.visit_params(f);
            }
        }
    }
}

/// A proposal to classify, tied to the batch item whose features it reads.
#[derive(Debug, Clone)]
pub struct RoiRequest {
    pub batch: usize,
    pub proposal: Proposal,
}

#[derive(Debug, Clone)]
struct FprnCache {
    /// Per (proposal, level): batch item, crop origin and RoI in the
    /// (possibly magnified) crop frame.
    entries: Vec<(usize, usize, [i64; 3], RoiBox)>,
    pyramid_shapes: Vec<Vec<usize>>,
    crop_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Fprn<T: Scalar> {
    pub cfg: FprnConfig,
    pub magnify: Option<Magnify<T>>,
    pub fc1: Linear<T>,
    relu: Relu<T>,
    pub fc2: Linear<T>,
    channels: usize,
    n_levels: usize,
    cache: Option<FprnCache>,
}

impl<T: Scalar> Fprn<T> {
    pub fn new(cfg: FprnConfig, channels: usize, n_levels: usize, rng: &mut DetRng) -> Result<Self> {
        cfg.validate()?;
        let bins = cfg.align.out_size.pow(3);
        let fin = n_levels * channels * bins;
        let magnify = cfg.magnify.then(|| Magnify::new("fprn.magnify", channels, cfg.magnify_bias, rng));
        let fc1 = Linear::new("fprn.fc1", fin, cfg.hidden, rng);
        let mut fc2 = Linear::new("fprn.fc2", cfg.hidden, 1, rng);
        fc2.weight.value = fc2.weight.value.map(|v| v * T::of(0.1));
        Ok(Fprn {
            cfg,
            magnify,
            fc1,
            relu: Relu::new(),
            fc2,
            channels,
            n_levels,
            cache: None,
        })
    }

    /// Width of the aggregated feature vector fed to the head.
    pub fn feature_len(&self) -> usize {
        self.n_levels * self.channels * self.cfg.align.out_size.pow(3)
    }

    /// Aggregated features `[P, levels·channels·bins]`, level-major, then
    /// channel, then bin.
    pub fn features(&mut self, pyramid: &[Tensor<T>], strides: &[usize], rois: &[RoiRequest], mode: Mode) -> Result<Tensor<T>> {
        if pyramid.len() != self.n_levels || strides.len() != self.n_levels {
            return Err(Error::shape("pyramid levels", self.n_levels, pyramid.len()));
        }
        for t in pyramid {
            let c = t.dims5()?[1];
            if c != self.channels {
                return Err(Error::shape("pyramid channels", self.channels, c));
            }
        }
        let side = self.cfg.crop_side;
        let c = self.channels;
        let cube = side * side * side;
        let mut entries = Vec::with_capacity(rois.len() * self.n_levels);
        let mut crops = Vec::with_capacity(rois.len() * self.n_levels * c * cube);
        for (pi, r) in rois.iter().enumerate() {
            let geom = diameter_align(&r.proposal, strides)?;
            for (l, center) in geom.centers.iter().enumerate() {
                let origin = crop_origin(*center, side);
                let crop = crop_with_margin(&pyramid[l], r.batch, origin, side)?;
                crops.extend_from_slice(crop.data());
                let local = [0, 1, 2].map(|a| center[a] - origin[a] as f64);
                entries.push((pi, r.batch, origin, RoiBox::centered(local, geom.side)));
            }
        }
        let n_crops = entries.len();
        let stacked = Tensor::from_vec(&[n_crops.max(1), c, side, side, side], {
            if n_crops == 0 {
                vec![T::zero(); c * cube]
            } else {
                crops
            }
        })?;
        let (feat_maps, scale) = match (&mut self.magnify, n_crops) {
            (Some(m), n) if n > 0 => (m.forward(&stacked, mode)?, Magnify::<T>::FACTOR as f64),
            _ => (stacked, 1.0),
        };
        let [_, _, fd, fh, fw] = feat_maps.dims5()?;
        let bins = self.cfg.align.out_size.pow(3);
        let per_level = c * bins;
        let mut feats = Tensor::zeros(&[rois.len(), self.feature_len()]);
        for (k, e) in entries.iter_mut().enumerate() {
            e.3 = e.3.scaled(scale);
            let pooled = roi_align_slice(feat_maps.batch_item(k), c, [fd, fh, fw], &e.3, &self.cfg.align);
            let (pi, l) = (e.0, k % self.n_levels);
            let row = &mut feats.data_mut()[pi * self.feature_len()..(pi + 1) * self.feature_len()];
            row[l * per_level..(l + 1) * per_level].copy_from_slice(&pooled);
        }
        self.cache = (mode == Mode::Train).then(|| FprnCache {
            entries: entries.iter().map(|&(p, b, o, r)| (p, b, o, r)).collect(),
            pyramid_shapes: pyramid.iter().map(|t| t.shape().to_vec()).collect(),
            crop_shape: vec![n_crops, c, fd, fh, fw],
        });
        Ok(feats)
    }

    /// Classifier logits, one per request.
    pub fn forward(&mut self, pyramid: &[Tensor<T>], strides: &[usize], rois: &[RoiRequest], mode: Mode) -> Result<Vec<f64>> {
        if rois.is_empty() {
            self.cache = None;
            return Ok(Vec::new());
        }
        let feats = self.features(pyramid, strides, rois, mode)?;
        self.head_forward(&feats, mode)
    }

    pub fn head_forward(&mut self, feats: &Tensor<T>, mode: Mode) -> Result<Vec<f64>> {
        let h = self.fc1.forward(feats, mode)?;
        let h = self.relu.forward(&h, mode);
        let y = self.fc2.forward(&h, mode)?;
        Ok(y.data().iter().map(|v| v.f64()).collect())
    }

    pub fn head_backward(&mut self, grad_logits: &[f64]) -> Result<Tensor<T>> {
        let g = Tensor::from_vec(&[grad_logits.len(), 1], grad_logits.iter().map(|&v| T::of(v)).collect())?;
        let g = self.fc2.backward(&g)?;
        let g = self.relu.backward(&g)?;
        self.fc1.backward(&g)
    }

    /// Accumulates parameter gradients. With `want_pyramid`, also returns
    /// gradients for each pyramid level (otherwise the crop path is not
    /// differentiated unless magnification needs it).
    pub fn backward(&mut self, grad_logits: &[f64], want_pyramid: bool) -> Result<Option<Vec<Tensor<T>>>> {
        if grad_logits.is_empty() {
            return Ok(None);
        }
        let g_feat = self.head_backward(grad_logits)?;
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("backward", "fprn has no cached forward"))?;
        if self.magnify.is_none() && !want_pyramid {
            return Ok(None);
        }
        let c = self.channels;
        let bins = self.cfg.align.out_size.pow(3);
        let per_level = c * bins;
        let fl = self.feature_len();
        let mut g_maps = Tensor::zeros(&cache.crop_shape);
        let dims = [cache.crop_shape[2], cache.crop_shape[3], cache.crop_shape[4]];
        for (k, &(pi, _, _, roi)) in cache.entries.iter().enumerate() {
            let l = k % self.n_levels;
            let go = &g_feat.data()[pi * fl + l * per_level..pi * fl + (l + 1) * per_level];
            roi_align_slice_backward(go, c, dims, &roi, &self.cfg.align, g_maps.batch_item_mut(k));
        }
        let g_crops = match &mut self.magnify {
            Some(m) => m.backward(&g_maps)?,
            None => g_maps,
        };
        if !want_pyramid {
            return Ok(None);
        }
        let mut grads: Vec<Tensor<T>> = cache.pyramid_shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let side = self.cfg.crop_side;
        for (k, &(_, b, origin, _)) in cache.entries.iter().enumerate() {
            let l = k % self.n_levels;
            crop_backward(&mut grads[l], b, origin, g_crops.batch_item(k), side)?;
        }
        Ok(Some(grads))
    }
}

impl<T: Scalar> HasParams<T> for Fprn<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(m) = &mut self.magnify {
            m.visit_params(f);
        }
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }
}
