//! Center-in-sphere matching, FROC, TNP and per-size sensitivity.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::roi::Proposal;
use crate::volume::Box3D;

/// False positives per scan at which sensitivity is averaged.
pub const FP_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Prediction hits at least one ground truth (never a false positive).
    pub pred_hit: Vec<bool>,
    /// Prediction is the first, in order, to hit some not-yet-hit GT.
    pub pred_tp: Vec<bool>,
    pub pred_fp: Vec<bool>,
    pub gt_hit: Vec<bool>,
    /// Highest score among predictions hitting each GT.
    pub gt_score: Vec<Option<f64>>,
}

/// A prediction hits a GT when its center is strictly inside the GT sphere.
/// Predictions are processed in the given order (score descending); a hit
/// on an already-hit GT is neither a new true positive nor a false positive.
pub fn match_hits(preds: &[Proposal], gts: &[Box3D]) -> MatchResult {
    let mut r = MatchResult {
        pred_hit: vec![false; preds.len()],
        pred_tp: vec![false; preds.len()],
        pred_fp: vec![false; preds.len()],
        gt_hit: vec![false; gts.len()],
        gt_score: vec![None; gts.len()],
    };
    for (i, p) in preds.iter().enumerate() {
        let c = p.box3d.center();
        for (g, gt) in gts.iter().enumerate() {
            if gt.sphere_contains(c) {
                r.pred_hit[i] = true;
                if !r.gt_hit[g] {
                    r.gt_hit[g] = true;
                    r.pred_tp[i] = true;
                }
                let s = r.gt_score[g].map_or(p.score, |v: f64| v.max(p.score));
                r.gt_score[g] = Some(s);
            }
        }
        r.pred_fp[i] = !r.pred_hit[i];
    }
    r
}

/// Predictions and ground truth for one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub scan_id: String,
    pub preds: Vec<Proposal>,
    pub gts: Vec<Box3D>,
}

/// All scans under evaluation, including scans without any prediction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalSet {
    pub scans: Vec<ScanRecord>,
}

impl EvalSet {
    /// Joins predictions and ground truth over `scan_ids`. Predictions for
    /// scans outside the list are an error.
    pub fn new(scan_ids: &[String], preds: &BTreeMap<String, Vec<Proposal>>, gts: &BTreeMap<String, Vec<Box3D>>) -> Result<Self> {
        for id in preds.keys() {
            if !scan_ids.contains(id) {
                return Err(Error::invalid("predictions", format!("scan `{id}` is not part of the evaluated set")));
            }
        }
        let scans = scan_ids
            .iter()
            .map(|id| {
                let mut p = preds.get(id).cloned().unwrap_or_default();
                p.sort_by(|a, b| b.score.total_cmp(&a.score));
                ScanRecord {
                    scan_id: id.clone(),
                    preds: p,
                    gts: gts.get(id).cloned().unwrap_or_default(),
                }
            })
            .collect();
        Ok(EvalSet { scans })
    }

    pub fn n_gt(&self) -> usize {
        self.scans.iter().map(|s| s.gts.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    /// Predictions with score >= threshold are accepted.
    pub threshold: f64,
    pub sensitivity: f64,
    pub fps_per_scan: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub froc: f64,
    pub sensitivity_at: Vec<(f64, f64)>,
    /// Starts at the empty operating point (threshold +inf).
    pub operating_points: Vec<OperatingPoint>,
    pub tnp: Option<f64>,
}

impl EvalResult {
    pub fn sensitivity(&self, rate: f64) -> Option<f64> {
        self.sensitivity_at.iter().find(|(r, _)| *r == rate).map(|&(_, s)| s)
    }
}

/// Per-scan (GT hit scores, false-positive scores).
fn scored_events(set: &EvalSet) -> (Vec<(f64, usize)>, Vec<f64>) {
    let mut hits = Vec::new();
    let mut fps = Vec::new();
    for s in &set.scans {
        let m = match_hits(&s.preds, &s.gts);
        for (g, score) in m.gt_score.iter().enumerate() {
            if let Some(v) = score {
                hits.push((*v, g));
            }
        }
        for (p, &fp) in s.preds.iter().zip(&m.pred_fp) {
            if fp {
                fps.push(p.score);
            }
        }
    }
    (hits, fps)
}

/// Threshold sweep over every distinct prediction score.
pub fn operating_points(set: &EvalSet) -> Result<Vec<OperatingPoint>> {
    let n_gt = set.n_gt();
    if n_gt == 0 {
        return Err(Error::UndefinedMetric("sensitivity needs at least one ground-truth lesion".into()));
    }
    if set.scans.is_empty() {
        return Err(Error::UndefinedMetric("no scans to evaluate".into()));
    }
    let (hits, fps) = scored_events(set);
    let n_scans = set.scans.len() as f64;
    let mut events: Vec<(f64, bool)> = hits.iter().map(|&(s, _)| (s, true)).chain(fps.iter().map(|&s| (s, false))).collect();
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![OperatingPoint {
        threshold: f64::INFINITY,
        sensitivity: 0.0,
        fps_per_scan: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            if events[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(OperatingPoint {
            threshold: t,
            sensitivity: tp as f64 / n_gt as f64,
            fps_per_scan: fp as f64 / n_scans,
        });
    }
    Ok(points)
}

/// The most permissive operating point whose FP rate stays within `rate`.
fn point_at(points: &[OperatingPoint], rate: f64) -> OperatingPoint {
    *points
        .iter()
        .rev()
        .find(|p| p.fps_per_scan <= rate)
        .unwrap_or(&points[0])
}

/// Step-function FROC: sensitivity at each rate is the best sensitivity
/// reached without exceeding that many false positives per scan.
pub fn froc(set: &EvalSet) -> Result<EvalResult> {
    let points = operating_points(set)?;
    let sensitivity_at: Vec<(f64, f64)> = FP_RATES.iter().map(|&r| (r, point_at(&points, r).sensitivity)).collect();
    let froc = sensitivity_at.iter().map(|&(_, s)| s).sum::<f64>() / FP_RATES.len() as f64;
    Ok(EvalResult {
        froc,
        sensitivity_at,
        operating_points: points,
        tnp: None,
    })
}

/// Fraction of lesion-free scans with no prediction at or above `threshold`.
pub fn tnp_score(set: &EvalSet, threshold: f64) -> Result<f64> {
    let negatives: Vec<&ScanRecord> = set.scans.iter().filter(|s| s.gts.is_empty()).collect();
    if negatives.is_empty() {
        return Err(Error::invalid("scans", "TNP needs at least one scan without lesions"));
    }
    let clean = negatives
        .iter()
        .filter(|s| s.preds.iter().all(|p| p.score < threshold))
        .count();
    Ok(clean as f64 / negatives.len() as f64)
}

/// Sweeping the threshold down from the top score, the first threshold at
/// which overall sensitivity reaches `target`. `None` if it never does.
pub fn threshold_for_sensitivity(set: &EvalSet, target: f64) -> Result<Option<f64>> {
    Ok(operating_points(set)?
        .into_iter()
        .find(|p| p.sensitivity >= target && p.threshold.is_finite())
        .map(|p| p.threshold))
}

/// Half-open diameter range `[lo, hi)` (with an inclusive upper end for the
/// middle bucket by construction of the default set).
#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
    pub hi_inclusive: bool,
}

impl Bucket {
    pub fn contains(&self, d: f64) -> bool {
        d >= self.lo && (d < self.hi || (self.hi_inclusive && d == self.hi))
    }
}

/// `<10`, `10-30`, `>30` voxels.
pub fn default_buckets() -> Vec<Bucket> {
    vec![
        Bucket {
            label: "<10".into(),
            lo: 0.0,
            hi: 10.0,
            hi_inclusive: false,
        },
        Bucket {
            label: "10-30".into(),
            lo: 10.0,
            hi: 30.0,
            hi_inclusive: true,
        },
        Bucket {
            label: ">30".into(),
            lo: 30.0,
            hi: f64::INFINITY,
            hi_inclusive: false,
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketResult {
    pub label: String,
    pub n_gt: usize,
    /// `None` when the bucket holds no lesions.
    pub sensitivity: Option<f64>,
}

/// Per-bucket recall at the operating point used for sensitivity at
/// `fp_rate` (false positives are still counted over all scans).
pub fn sensitivity_by_bucket(set: &EvalSet, buckets: &[Bucket], fp_rate: f64) -> Result<Vec<BucketResult>> {
    let t = point_at(&operating_points(set)?, fp_rate).threshold;
    let mut counts = vec![(0usize, 0usize); buckets.len()];
    for s in &set.scans {
        let m = match_hits(&s.preds, &s.gts);
        for (g, gt) in s.gts.iter().enumerate() {
            if let Some(bi) = buckets.iter().position(|b| b.contains(gt.d)) {
                counts[bi].0 += 1;
                if m.gt_score[g].is_some_and(|v| v >= t) {
                    counts[bi].1 += 1;
                }
            }
        }
    }
    Ok(buckets
        .iter()
        .zip(counts)
        .map(|(b, (n, hit))| BucketResult {
            label: b.label.clone(),
            n_gt: n,
            sensitivity: (n > 0).then(|| hit as f64 / n as f64),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub result: EvalResult,
    pub buckets: Vec<BucketResult>,
}

/// FROC, bucket sensitivities at 4 FPs/scan, and TNP at `tnp_threshold`
/// when the set has lesion-free scans.
pub fn evaluate(set: &EvalSet, tnp_threshold: Option<f64>) -> Result<EvalReport> {
    let mut result = froc(set)?;
    if let Some(t) = tnp_threshold {
        if set.scans.iter().any(|s| s.gts.is_empty()) {
            result.tnp = Some(tnp_score(set, t)?);
        }
    }
    let buckets = sensitivity_by_bucket(set, &default_buckets(), 4.0)?;
    Ok(EvalReport { result, buckets })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(z: f64, score: f64) -> Proposal {
        let mut q = Proposal::from_rpn(Box3D::new(z, 10.0, 10.0, 5.0), score, 4);
        q.score = score;
        q
    }

    fn set(scans: Vec<(Vec<Proposal>, Vec<Box3D>)>) -> EvalSet {
        EvalSet {
            scans: scans
                .into_iter()
                .enumerate()
                .map(|(i, (preds, gts))| ScanRecord {
                    scan_id: format!("s{i}"),
                    preds,
                    gts,
                })
                .collect(),
        }
    }

    #[test]
    fn boundary_is_a_miss() {
        let gt = Box3D::new(10.0, 10.0, 10.0, 6.0);
        let m = match_hits(&[p(13.0, 0.9), p(10.0, 0.8)], &[gt]);
        assert_eq!(m.pred_fp, vec![true, false]);
        assert_eq!(m.gt_hit, vec![true]);
    }

    #[test]
    fn duplicate_hit_is_neither() {
        let gt = Box3D::new(10.0, 10.0, 10.0, 6.0);
        let m = match_hits(&[p(10.0, 0.9), p(11.0, 0.8)], &[gt]);
        assert_eq!(m.pred_tp, vec![true, false]);
        assert_eq!(m.pred_fp, vec![false, false]);
    }

    #[test]
    fn perfect_and_empty() {
        let gt = Box3D::new(10.0, 10.0, 10.0, 6.0);
        let perfect = set(vec![(vec![p(10.0, 0.9)], vec![gt]), (vec![], vec![gt])]);
        assert!(froc(&perfect).unwrap().froc < 1.0);
        let perfect = set(vec![(vec![p(10.0, 0.9)], vec![gt]), (vec![p(10.0, 0.7)], vec![gt])]);
        assert_eq!(froc(&perfect).unwrap().froc, 1.0);
        let empty = set(vec![(vec![], vec![gt])]);
        assert_eq!(froc(&empty).unwrap().froc, 0.0);
    }

    #[test]
    fn no_gt_is_undefined() {
        let s = set(vec![(vec![p(1.0, 0.5)], vec![])]);
        assert!(matches!(froc(&s), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn tnp_cases() {
        let gt = Box3D::new(10.0, 10.0, 10.0, 6.0);
        let s = set(vec![(vec![], vec![gt]), (vec![], vec![]), (vec![], vec![])]);
        assert_eq!(tnp_score(&s, 0.5).unwrap(), 1.0);
        let s = set(vec![(vec![p(40.0, 0.9)], vec![]), (vec![p(40.0, 0.95)], vec![])]);
        assert_eq!(tnp_score(&s, 0.5).unwrap(), 0.0);
        let s = set(vec![(vec![], vec![gt])]);
        assert!(tnp_score(&s, 0.5).is_err());
    }

    #[test]
    fn bucket_without_lesions_is_absent() {
        let gt = Box3D::new(10.0, 10.0, 10.0, 6.0);
        let s = set(vec![(vec![p(10.0, 0.9)], vec![gt])]);
        let b = sensitivity_by_bucket(&s, &default_buckets(), 4.0).unwrap();
        assert_eq!(b[0].sensitivity, Some(1.0));
        assert_eq!(b[1].sensitivity, None);
        assert_eq!(b[2].sensitivity, None);
    }
}
