//! Proposal geometry across pyramid levels, fixed-size feature crops and
//! trilinear RoI Align.
//!
//! Feature coordinates: a volume coordinate divided by the level stride, so
//! feature cell `j` spans `[j, j + 1)` and has its center at `j + 0.5`.

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};
use crate::volume::Box3D;

/// A candidate detection. `score` is the ranking score: the fused score
/// when the second branch ran, the RPN score otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub box3d: Box3D,
    pub rpn_score: f64,
    pub fpr_score: Option<f64>,
    pub score: f64,
    /// Stride of the pyramid level that produced the proposal (0 if unknown).
    pub level: usize,
}

impl Proposal {
    pub fn from_rpn(box3d: Box3D, rpn_score: f64, level: usize) -> Self {
        Proposal {
            box3d,
            rpn_score,
            fpr_score: None,
            score: rpn_score,
            level,
        }
    }

    /// Attaches a second-branch score and sets the ranking score to the mean.
    pub fn with_fpr(mut self, fpr: f64) -> Self {
        self.fpr_score = Some(fpr);
        self.score = fuse_scores(self.rpn_score, fpr);
        self
    }

    /// Copy ranked by the RPN score alone.
    pub fn rpn_only(&self) -> Self {
        Proposal {
            fpr_score: None,
            score: self.rpn_score,
            ..self.clone()
        }
    }

    pub fn translated(&self, dz: f64, dy: f64, dx: f64) -> Self {
        Proposal {
            box3d: self.box3d.translated(dz, dy, dx),
            ..self.clone()
        }
    }
}

pub fn fuse_scores(rpn: f64, fpr: f64) -> f64 {
    0.5 * (rpn + fpr)
}

/// Per-level crop geometry of one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiGeometry {
    /// Side length in feature cells, identical on every level.
    pub side: f64,
    pub centers: Vec<[f64; 3]>,
    pub strides: Vec<usize>,
}

/// Broadcasts the proposal's feature-unit diameter from its own level to
/// every level; each level keeps its own center scaling.
pub fn diameter_align(p: &Proposal, strides: &[usize]) -> Result<RoiGeometry> {
    if !strides.contains(&p.level) {
        return Err(Error::invalid(
            "proposal level",
            format!("stride {} is not one of {strides:?}", p.level),
        ));
    }
    let c = p.box3d.center();
    Ok(RoiGeometry {
        side: p.box3d.d / p.level as f64,
        centers: strides
            .iter()
            .map(|&s| c.map(|v| v / s as f64))
            .collect(),
        strides: strides.to_vec(),
    })
}

/// Integer crop origin for a fixed odd side centered on the cell holding
/// `center`.
pub fn crop_origin(center: [f64; 3], side: usize) -> [i64; 3] {
    center.map(|c| c.floor() as i64 - (side / 2) as i64)
}

/// Copies a `side³` block of batch item `b` starting at `origin`, zero
/// outside the map. Output shape `[1, c, side, side, side]`.
pub fn crop_with_margin<T: Scalar>(feature: &Tensor<T>, b: usize, origin: [i64; 3], side: usize) -> Result<Tensor<T>> {
    if side % 2 == 0 {
        return Err(Error::invalid("crop side", format!("must be odd, got {side}")));
    }
    let [_, c, d, h, w] = feature.dims5()?;
    let src = feature.batch_item(b);
    let mut out = Tensor::zeros(&[1, c, side, side, side]);
    let dst = out.data_mut();
    for ch in 0..c {
        for k in 0..side {
            let z = origin[0] + k as i64;
            if z < 0 || z >= d as i64 {
                continue;
            }
            for j in 0..side {
                let y = origin[1] + j as i64;
                if y < 0 || y >= h as i64 {
                    continue;
                }
                for i in 0..side {
                    let x = origin[2] + i as i64;
                    if x < 0 || x >= w as i64 {
                        continue;
                    }
                    dst[((ch * side + k) * side + j) * side + i] = src[((ch * d + z as usize) * h + y as usize) * w + x as usize];
                }
            }
        }
    }
    Ok(out)
}

/// Adds a crop gradient back into the full feature gradient.
pub fn crop_backward<T: Scalar>(grad_feature: &mut Tensor<T>, b: usize, origin: [i64; 3], grad_crop: &[T], side: usize) -> Result<()> {
    let [_, c, d, h, w] = grad_feature.dims5()?;
    if grad_crop.len() != c * side * side * side {
        return Err(Error::shape("crop gradient", c * side * side * side, grad_crop.len()));
    }
    let dst = grad_feature.batch_item_mut(b);
    for ch in 0..c {
        for k in 0..side {
            let z = origin[0] + k as i64;
            if z < 0 || z >= d as i64 {
                continue;
            }
            for j in 0..side {
                let y = origin[1] + j as i64;
                if y < 0 || y >= h as i64 {
                    continue;
                }
                for i in 0..side {
                    let x = origin[2] + i as i64;
                    if x < 0 || x >= w as i64 {
                        continue;
                    }
                    dst[((ch * d + z as usize) * h + y as usize) * w + x as usize] += grad_crop[((ch * side + k) * side + j) * side + i];
                }
            }
        }
    }
    Ok(())
}

/// Axis-aligned cubic region in feature coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiBox {
    pub start: [f64; 3],
    pub side: f64,
}

impl RoiBox {
    pub fn centered(center: [f64; 3], side: f64) -> Self {
        RoiBox {
            start: center.map(|c| c - side / 2.0),
            side,
        }
    }

    pub fn shifted(&self, by: [f64; 3]) -> Self {
        RoiBox {
            start: [self.start[0] + by[0], self.start[1] + by[1], self.start[2] + by[2]],
            side: self.side,
        }
    }

    pub fn scaled(&self, f: f64) -> Self {
        RoiBox {
            start: self.start.map(|s| s * f),
            side: self.side * f,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignConfig {
    pub out_size: usize,
    pub samples: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig { out_size: 2, samples: 2 }
    }
}

/// Eight `(flat spatial index, weight)` pairs for trilinear sampling at a
/// feature coordinate, using cell centers and clamping at the borders.
pub fn trilinear_taps(p: [f64; 3], dims: [usize; 3]) -> [(usize, f64); 8] {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut fr = [0f64; 3];
    for a in 0..3 {
        let n = dims[a];
        let idx = (p[a] - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = idx.floor() as usize;
        lo[a] = i0;
        hi[a] = (i0 + 1).min(n - 1);
        fr[a] = idx - i0 as f64;
    }
    let mut taps = [(0, 0.0); 8];
    for (k, t) in taps.iter_mut().enumerate() {
        let (bz, by, bx) = (k >> 2, (k >> 1) & 1, k & 1);
        let z = if bz == 1 { hi[0] } else { lo[0] };
        let y = if by == 1 { hi[1] } else { lo[1] };
        let x = if bx == 1 { hi[2] } else { lo[2] };
        let wz = if bz == 1 { fr[0] } else { 1.0 - fr[0] };
        let wy = if by == 1 { fr[1] } else { 1.0 - fr[1] };
        let wx = if bx == 1 { fr[2] } else { 1.0 - fr[2] };
        *t = ((z * dims[1] + y) * dims[2] + x, wz * wy * wx);
    }
    taps
}

/// Per output bin, the merged list of taps averaged over its sample points.
fn bin_taps(roi: &RoiBox, dims: [usize; 3], cfg: &AlignConfig) -> Vec<Vec<(usize, f64)>> {
    let (o, s) = (cfg.out_size, cfg.samples);
    let bin = roi.side / o as f64;
    let norm = 1.0 / (s * s * s) as f64;
    let coord = |a: usize, b: usize, k: usize| roi.start[a] + b as f64 * bin + (k as f64 + 0.5) * bin / s as f64;
    let mut out = Vec::with_capacity(o * o * o);
    for bz in 0..o {
        for by in 0..o {
            for bx in 0..o {
                let mut taps = Vec::with_capacity(8 * s * s * s);
                for kz in 0..s {
                    for ky in 0..s {
                        for kx in 0..s {
                            let p = [coord(0, bz, kz), coord(1, by, ky), coord(2, bx, kx)];
                            taps.extend(trilinear_taps(p, dims).iter().map(|&(i, w)| (i, w * norm)));
                        }
                    }
                }
                out.push(taps);
            }
        }
    }
    out
}

/// Pools `feat` (`c` channels of a `dims` grid, channel-major) into
/// `c × out_size³` values.
pub fn roi_align_slice<T: Scalar>(feat: &[T], c: usize, dims: [usize; 3], roi: &RoiBox, cfg: &AlignConfig) -> Vec<T> {
    let sp: usize = dims.iter().product();
    let bins = bin_taps(roi, dims, cfg);
    let nb = bins.len();
    let mut out = vec![T::zero(); c * nb];
    for ch in 0..c {
        let f = &feat[ch * sp..(ch + 1) * sp];
        for (bi, taps) in bins.iter().enumerate() {
            let mut acc = 0.0;
            for &(i, w) in taps {
                acc += w * f[i].f64();
            }
            out[ch * nb + bi] = T::of(acc);
        }
    }
    out
}

pub fn roi_align_slice_backward<T: Scalar>(grad_out: &[T], c: usize, dims: [usize; 3], roi: &RoiBox, cfg: &AlignConfig, grad_feat: &mut [T]) {
    let sp: usize = dims.iter().product();
    let bins = bin_taps(roi, dims, cfg);
    let nb = bins.len();
    for ch in 0..c {
        let g = &mut grad_feat[ch * sp..(ch + 1) * sp];
        for (bi, taps) in bins.iter().enumerate() {
            let go = grad_out[ch * nb + bi];
            for &(i, w) in taps {
                g[i] += T::of(w) * go;
            }
        }
    }
}

/// RoI Align on a single-item tensor `[1, c, z, y, x]`; returns
/// `[1, c, o, o, o]`.
pub fn roi_align_3d<T: Scalar>(feature: &Tensor<T>, roi: &RoiBox, cfg: &AlignConfig) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = feature.dims5()?;
    if n != 1 {
        return Err(Error::shape("roi_align batch", 1, n));
    }
    if !(roi.side > 0.0) {
        return Err(Error::invalid("roi side", "must be > 0"));
    }
    let o = cfg.out_size;
    Tensor::from_vec(&[1, c, o, o, o], roi_align_slice(feature.data(), c, [d, h, w], roi, cfg))
}

pub fn roi_align_3d_backward<T: Scalar>(feature_shape: &[usize], roi: &RoiBox, cfg: &AlignConfig, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Tensor::zeros(feature_shape);
    let [_, c, d, h, w] = g.dims5()?;
    let o = cfg.out_size;
    if grad_out.len() != c * o * o * o {
        return Err(Error::shape("roi_align grad_output", c * o * o * o, grad_out.len()));
    }
    roi_align_slice_backward(grad_out.data(), c, [d, h, w], roi, cfg, g.data_mut());
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn prop(z: f64, y: f64, x: f64, d: f64, level: usize) -> Proposal {
        Proposal::from_rpn(Box3D::new(z, y, x, d), 0.9, level)
    }

    #[test]
    fn fuse_is_mean() {
        assert_eq!(fuse_scores(1.0, 1.0), 1.0);
        assert_eq!(fuse_scores(0.3, 0.3), 0.3);
        assert!((fuse_scores(0.8, 0.4) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn stride4_alignment_formula() {
        let g = diameter_align(&prop(8.0, 16.0, 32.0, 4.0, 4), &[4, 8, 16]).unwrap();
        assert_eq!(g.side, 1.0);
        assert_eq!(g.centers, vec![[2.0, 4.0, 8.0], [1.0, 2.0, 4.0], [0.5, 1.0, 2.0]]);
    }

    #[test]
    fn unknown_level_rejected() {
        assert!(diameter_align(&prop(1.0, 1.0, 1.0, 4.0, 2), &[4, 8, 16]).is_err());
    }

    #[test]
    fn corner_crop_zero_pads() {
        let f = Tensor::<f32>::full(&[1, 2, 4, 4, 4], 3.0);
        let origin = crop_origin([0.2, 0.2, 0.2], 5);
        assert_eq!(origin, [-2, -2, -2]);
        let c = crop_with_margin(&f, 0, origin, 5).unwrap();
        assert_eq!(c.data()[0], 0.0);
        assert_eq!(c.data()[(2 * 5 + 2) * 5 + 2], 3.0);
        let mid = crop_with_margin(&f, 0, crop_origin([2.0, 2.0, 2.0], 3), 3).unwrap();
        assert!(mid.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn constant_map_constant_bins() {
        let f = Tensor::<f64>::full(&[1, 3, 5, 5, 5], -1.5);
        let out = roi_align_3d(&f, &RoiBox::centered([2.3, 2.6, 1.9], 1.7), &AlignConfig::default()).unwrap();
        assert!(out.data().iter().all(|v| (v + 1.5).abs() < 1e-12));
    }

    #[test]
    fn aligned_block_one_sample() {
        let mut rng = seeded(4);
        let f = Tensor::<f64>::randn(&[1, 1, 4, 4, 4], 1.0, &mut rng);
        let roi = RoiBox { start: [1.0, 1.0, 1.0], side: 2.0 };
        let out = roi_align_3d(&f, &roi, &AlignConfig { out_size: 2, samples: 1 }).unwrap();
        for (k, v) in out.data().iter().enumerate() {
            let (z, y, x) = (1 + (k >> 2), 1 + ((k >> 1) & 1), 1 + (k & 1));
            assert!((v - f.data()[(z * 4 + y) * 4 + x]).abs() < 1e-12);
        }
    }

    #[test]
    fn align_translation_invariance() {
        let mut rng = seeded(9);
        let f = Tensor::<f64>::randn(&[1, 2, 6, 6, 6], 1.0, &mut rng);
        let mut g = Tensor::<f64>::zeros(&[1, 2, 8, 8, 8]);
        for ch in 0..2 {
            for z in 0..6 {
                for y in 0..6 {
                    for x in 0..6 {
                        g.data_mut()[((ch * 8 + z + 2) * 8 + y + 1) * 8 + x + 2] = f.data()[((ch * 6 + z) * 6 + y) * 6 + x];
                    }
                }
            }
        }
        let roi = RoiBox::centered([3.1, 2.7, 3.4], 2.2);
        let a = roi_align_3d(&f, &roi, &AlignConfig::default()).unwrap();
        let b = roi_align_3d(&g, &roi.shifted([2.0, 1.0, 2.0]), &AlignConfig::default()).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
