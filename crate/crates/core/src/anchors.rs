//! Multi-scale anchors, cube IoU, label assignment and box encoding.

use crate::error::{Error, Result};
use crate::volume::Box3D;

/// Anchor diameters attached to one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelAnchors {
    pub stride: usize,
    pub diameters: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    pub levels: Vec<LevelAnchors>,
}

impl AnchorConfig {
    /// {4, 6} at stride 4, {8, 12} at 8, {16, 24} at 16.
    pub fn anchor1() -> Self {
        Self::from_pairs(&[(4, &[4.0, 6.0]), (8, &[8.0, 12.0]), (16, &[16.0, 24.0])])
    }

    /// {5, 10} at stride 4, {15, 20} at 8, {25, 35} at 16.
    pub fn anchor2() -> Self {
        Self::from_pairs(&[(4, &[5.0, 10.0]), (8, &[15.0, 20.0]), (16, &[25.0, 35.0])])
    }

    fn from_pairs(pairs: &[(usize, &[f64])]) -> Self {
        AnchorConfig {
            levels: pairs
                .iter()
                .map(|&(stride, d)| LevelAnchors {
                    stride,
                    diameters: d.to_vec(),
                })
                .collect(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "anchor1" => Ok(Self::anchor1()),
            "anchor2" => Ok(Self::anchor2()),
            other => Err(Error::invalid("anchors", format!("unknown set `{other}` (anchor1|anchor2)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::invalid("anchors", "no levels"));
        }
        for w in self.levels.windows(2) {
            if w[1].stride <= w[0].stride {
                return Err(Error::invalid("anchors", "strides must be strictly increasing"));
            }
        }
        for l in &self.levels {
            if l.stride == 0 || l.diameters.is_empty() {
                return Err(Error::invalid("anchors", "each level needs a stride >= 1 and diameters"));
            }
            if l.diameters.iter().any(|&d| !(d > 0.0 && d.is_finite())) || l.diameters.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::invalid("anchors", "diameters must be positive and sorted"));
            }
        }
        Ok(())
    }

    pub fn strides(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.stride).collect()
    }
}

/// One anchor per (cell, diameter), cell-major with the diameter index
/// fastest; centers at `(i + 0.5) * stride`.
pub fn generate_anchors(level_dims: [usize; 3], stride: usize, diameters: &[f64]) -> Vec<Box3D> {
    let s = stride as f64;
    let mut out = Vec::with_capacity(level_dims.iter().product::<usize>() * diameters.len());
    for z in 0..level_dims[0] {
        for y in 0..level_dims[1] {
            for x in 0..level_dims[2] {
                for &d in diameters {
                    out.push(Box3D::new((z as f64 + 0.5) * s, (y as f64 + 0.5) * s, (x as f64 + 0.5) * s, d));
                }
            }
        }
    }
    out
}

/// IoU of the axis-aligned cubes of side `d` around each center.
pub fn cube_iou(a: &Box3D, b: &Box3D) -> f64 {
    let mut inter = 1.0;
    for (ca, cb) in a.center().into_iter().zip(b.center()) {
        let lo = (ca - a.d / 2.0).max(cb - b.d / 2.0);
        let hi = (ca + a.d / 2.0).min(cb + b.d / 2.0);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let union = a.d.powi(3) + b.d.powi(3) - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub iou_pos: f64,
    pub iou_neg: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { iou_pos: 0.5, iou_neg: 0.02 }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.iou_neg && self.iou_neg < self.iou_pos && self.iou_pos <= 1.0) {
            return Err(Error::invalid("iou thresholds", "need 0 <= iou_neg < iou_pos <= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLabels {
    pub labels: Vec<Label>,
    /// Matched ground-truth index, set for positives only.
    pub matched: Vec<Option<usize>>,
    /// Regression target, zero for non-positives.
    pub targets: Vec<[f64; 4]>,
}

impl AnchorLabels {
    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Label::Positive).count()
    }

    pub fn n_neg(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Label::Negative).count()
    }
}

/// Threshold assignment plus one forced positive per ground truth: its
/// highest-IoU anchor (lowest index on ties) among anchors not already
/// forced by an earlier ground truth, provided that IoU is > 0.
pub fn assign_anchors(anchors: &[Box3D], gts: &[Box3D], cfg: &MatchConfig) -> AnchorLabels {
    let n = anchors.len();
    let mut labels = vec![Label::Negative; n];
    let mut matched = vec![None; n];
    let mut ious = vec![0.0f64; n * gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        let mut best = (0.0, usize::MAX);
        for (g, gt) in gts.iter().enumerate() {
            let iou = cube_iou(a, gt);
            ious[i * gts.len() + g] = iou;
            if iou > best.0 {
                best = (iou, g);
            }
        }
        if best.0 >= cfg.iou_pos {
            labels[i] = Label::Positive;
            matched[i] = Some(best.1);
        } else if best.0 > cfg.iou_neg {
            labels[i] = Label::Ignore;
        }
    }
    // Forced matches are claimed greedily in GT order so two GTs sharing a
    // best anchor both end up with a positive.
    let mut claimed = vec![false; n];
    for g in 0..gts.len() {
        let mut best = (0.0, usize::MAX);
        for i in 0..n {
            let iou = ious[i * gts.len() + g];
            if !claimed[i] && iou > best.0 {
                best = (iou, i);
            }
        }
        if best.1 != usize::MAX {
            claimed[best.1] = true;
            labels[best.1] = Label::Positive;
            matched[best.1] = Some(g);
        }
    }
    let targets = (0..n)
        .map(|i| match matched[i] {
            Some(g) => encode_targets(&anchors[i], &gts[g]),
            None => [0.0; 4],
        })
        .collect();
    AnchorLabels { labels, matched, targets }
}

/// `(Δz/d_a, Δy/d_a, Δx/d_a, ln(d_g/d_a))`.
pub fn encode_targets(anchor: &Box3D, gt: &Box3D) -> [f64; 4] {
    [
        (gt.z - anchor.z) / anchor.d,
        (gt.y - anchor.y) / anchor.d,
        (gt.x - anchor.x) / anchor.d,
        (gt.d / anchor.d).ln(),
    ]
}

pub fn decode_box(anchor: &Box3D, t: [f64; 4]) -> Box3D {
    Box3D::new(
        anchor.z + t[0] * anchor.d,
        anchor.y + t[1] * anchor.d,
        anchor.x + t[2] * anchor.d,
        anchor.d * t[3].exp(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_cell_anchors() {
        let a = generate_anchors([1, 1, 1], 4, &[4.0, 6.0]);
        assert_eq!(a, vec![Box3D::new(2.0, 2.0, 2.0, 4.0), Box3D::new(2.0, 2.0, 2.0, 6.0)]);
        assert_eq!(generate_anchors([2, 2, 2], 8, &[8.0, 12.0]).len(), 16);
    }

    #[test]
    fn iou_cases() {
        let a = Box3D::new(5.0, 5.0, 5.0, 4.0);
        assert_eq!(cube_iou(&a, &a), 1.0);
        assert!((cube_iou(&a, &Box3D::new(5.0, 5.0, 5.0, 2.0)) - 0.125).abs() < 1e-15);
        assert_eq!(cube_iou(&a, &Box3D::new(5.0, 5.0, 9.1, 4.0)), 0.0);
    }

    #[test]
    fn empty_gts_all_negative() {
        let a = generate_anchors([2, 2, 2], 4, &[4.0]);
        let l = assign_anchors(&a, &[], &MatchConfig::default());
        assert!(l.labels.iter().all(|&v| v == Label::Negative));
    }

    #[test]
    fn anchor_equal_to_gt_is_positive_with_zero_target() {
        let a = generate_anchors([2, 2, 2], 4, &[4.0, 6.0]);
        let gt = a[5];
        let l = assign_anchors(&a, &[gt], &MatchConfig::default());
        assert_eq!(l.labels[5], Label::Positive);
        assert_eq!(l.targets[5], [0.0; 4]);
    }

    #[test]
    fn small_gt_between_centers_gets_forced_match() {
        let a = generate_anchors([4, 4, 4], 4, &[4.0]);
        let gt = Box3D::new(4.0, 4.0, 4.0, 2.5);
        let l = assign_anchors(&a, &[gt], &MatchConfig::default());
        assert_eq!(l.n_pos(), 1);
    }

    #[test]
    fn encode_known_value() {
        let t = encode_targets(&Box3D::new(0.0, 0.0, 0.0, 4.0), &Box3D::new(0.0, 0.0, 0.0, 8.0));
        assert_eq!(t[..3], [0.0; 3]);
        assert!((t[3] - 2f64.ln()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_translation_invariant(
            c in prop::array::uniform3(-20.0f64..20.0), e in prop::array::uniform3(-5.0f64..5.0),
            da in 0.5f64..10.0, db in 0.5f64..10.0, t in prop::array::uniform3(-50.0f64..50.0)
        ) {
            let a = Box3D::new(c[0], c[1], c[2], da);
            let b = Box3D::new(c[0] + e[0], c[1] + e[1], c[2] + e[2], db);
            let ab = cube_iou(&a, &b);
            prop_assert!((ab - cube_iou(&b, &a)).abs() < 1e-12);
            let at = a.translated(t[0], t[1], t[2]);
            let bt = b.translated(t[0], t[1], t[2]);
            prop_assert!((ab - cube_iou(&at, &bt)).abs() < 1e-9);
        }

        #[test]
        fn decode_inverts_encode(
            a in prop::array::uniform4(0.5f64..60.0), g in prop::array::uniform4(0.5f64..60.0)
        ) {
            let anchor = Box3D::new(a[0], a[1], a[2], a[3]);
            let gt = Box3D::new(g[0], g[1], g[2], g[3]);
            let back = decode_box(&anchor, encode_targets(&anchor, &gt));
            for (u, v) in [back.z, back.y, back.x, back.d].into_iter().zip([gt.z, gt.y, gt.x, gt.d]) {
                prop_assert!((u - v).abs() < 1e-6);
            }
        }
    }
}
