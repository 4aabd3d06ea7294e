//! Brute-force reference implementations and randomized comparisons
//! against the production code paths.

use super::CheckReport;
use crate::anchors::{assign_anchors, cube_iou, encode_targets, generate_anchors, AnchorLabels, Label, MatchConfig};
use crate::error::Result;
use crate::eval::{froc, EvalSet, FP_RATES};
use crate::infer::{nms_3d, NmsConfig};
use crate::loss::{self, FocalConfig, FocusShiftState};
use crate::rng::{self, DetRng};
use crate::roi::{roi_align_slice, AlignConfig, Proposal, RoiBox};
use crate::volume::Box3D;
use std::collections::BTreeMap;

/// Cube overlap by counting cells of a grid of pitch `h`. Exact when every
/// cube face lies on a multiple of `h`.
pub fn voxelized_iou(a: &Box3D, b: &Box3D, h: f64) -> f64 {
    let lo = |c: [f64; 3], d: f64| c.map(|v| v - d / 2.0);
    let (la, lb) = (lo(a.center(), a.d), lo(b.center(), b.d));
    let mut min = [0.0; 3];
    let mut n = [0usize; 3];
    for k in 0..3 {
        min[k] = la[k].min(lb[k]);
        let max = (la[k] + a.d).max(lb[k] + b.d);
        n[k] = ((max - min[k]) / h).round() as usize;
    }
    let inside = |l: [f64; 3], d: f64, p: [f64; 3]| (0..3).all(|k| p[k] > l[k] && p[k] < l[k] + d);
    let (mut inter, mut ca, mut cb) = (0u64, 0u64, 0u64);
    for i in 0..n[0] {
        for j in 0..n[1] {
            for k in 0..n[2] {
                let p = [
                    min[0] + (i as f64 + 0.5) * h,
                    min[1] + (j as f64 + 0.5) * h,
                    min[2] + (k as f64 + 0.5) * h,
                ];
                let (ia, ib) = (inside(la, a.d, p), inside(lb, b.d, p));
                ca += ia as u64;
                cb += ib as u64;
                inter += (ia && ib) as u64;
            }
        }
    }
    let union = ca + cb - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn quarter(rng: &mut DetRng, lo: f64, hi: f64) -> f64 {
    (rng::uniform(rng, lo, hi) * 4.0).round() / 4.0
}

pub fn iou_vs_voxelized(cases: usize, seed: u64) -> CheckReport {
    let mut rep = CheckReport::new("cube_iou vs voxelized", 1e-9);
    let mut rng = rng::derive(seed, 101);
    for _ in 0..cases {
        // Centers and sides on a quarter grid put faces on an eighth grid.
        let mk = |rng: &mut DetRng| {
            let d = quarter(rng, 0.5, 6.0).max(0.25);
            Box3D::new(quarter(rng, 0.0, 6.0), quarter(rng, 0.0, 6.0), quarter(rng, 0.0, 6.0), d)
        };
        let a = mk(&mut rng);
        let b = if rng::coin(&mut rng, 0.2) { a } else { mk(&mut rng) };
        rep.record((cube_iou(&a, &b) - voxelized_iou(&a, &b, 0.125)).abs());
    }
    rep
}

/// Labels every anchor from the full IoU matrix, then for each ground truth
/// in turn claims its highest-IoU anchor not yet claimed by an earlier one.
pub fn exhaustive_assign(anchors: &[Box3D], gts: &[Box3D], cfg: &MatchConfig) -> AnchorLabels {
    let iou: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| cube_iou(a, g)).collect()).collect();
    let mut labels = Vec::with_capacity(anchors.len());
    let mut matched = Vec::with_capacity(anchors.len());
    for row in &iou {
        let mut best: Option<(usize, f64)> = None;
        for (g, &v) in row.iter().enumerate() {
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) if v >= cfg.iou_pos => {
                labels.push(Label::Positive);
                matched.push(Some(g));
            }
            Some((_, v)) if v >= cfg.iou_neg => {
                labels.push(Label::Ignore);
                matched.push(None);
            }
            _ => {
                labels.push(Label::Negative);
                matched.push(None);
            }
        }
    }
    let mut claimed = vec![false; anchors.len()];
    for g in 0..gts.len() {
        let mut best: Option<(usize, f64)> = None;
        for a in 0..anchors.len() {
            if !claimed[a] && iou[a][g] > 0.0 && best.map_or(true, |(_, b)| iou[a][g] > b) {
                best = Some((a, iou[a][g]));
            }
        }
        if let Some((a, _)) = best {
            claimed[a] = true;
            labels[a] = Label::Positive;
            matched[a] = Some(g);
        }
    }
    let targets = anchors
        .iter()
        .zip(&matched)
        .map(|(a, m)| m.map_or([0.0; 4], |g| encode_targets(a, &gts[g])))
        .collect();
    AnchorLabels { labels, matched, targets }
}

pub fn assign_vs_exhaustive(cases: usize, seed: u64) -> CheckReport {
    let mut rep = CheckReport::new("assign_anchors vs exhaustive", 0.0);
    let mut rng = rng::derive(seed, 102);
    let cfg = MatchConfig::default();
    for _ in 0..cases {
        let stride = [4usize, 8, 16][rng::index(&mut rng, 3)];
        let n = 2 + rng::index(&mut rng, 3);
        let diams = [5.0, 10.0, 20.0];
        let anchors = generate_anchors([n; 3], stride, &diams[..1 + rng::index(&mut rng, 3)]);
        let extent = (n * stride) as f64;
        let gts: Vec<Box3D> = (0..rng::index(&mut rng, 4))
            .map(|_| {
                Box3D::new(
                    rng::uniform(&mut rng, 0.0, extent),
                    rng::uniform(&mut rng, 0.0, extent),
                    rng::uniform(&mut rng, 0.0, extent),
                    rng::uniform(&mut rng, 3.0, 24.0),
                )
            })
            .collect();
        rep.record_match(assign_anchors(&anchors, &gts, &cfg) == exhaustive_assign(&anchors, &gts, &cfg));
    }
    rep
}

/// NMS by subset enumeration: the unique set `S` such that no member is
/// suppressed by a higher-ranked member and every non-member is suppressed by
/// a higher-ranked member, truncated to the detection cap.
pub fn nms_brute(props: &[Proposal], cfg: &NmsConfig) -> Vec<Proposal> {
    let n = props.len();
    assert!(n <= 16, "subset enumeration needs a small input");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| props[b].score.total_cmp(&props[a].score).then(a.cmp(&b)));
    let suppresses = |k: usize, c: usize| {
        cube_iou(&props[k].box3d, &props[c].box3d) > cfg.iou_thresh || props[k].box3d.sphere_contains(props[c].box3d.center())
    };
    for mask in 0u32..(1 << n) {
        let in_set = |rank: usize| mask & (1 << rank) != 0;
        let ok = (0..n).all(|r| {
            let hit = (0..r).any(|q| in_set(q) && suppresses(order[q], order[r]));
            in_set(r) != hit
        });
        if ok {
            return (0..n)
                .filter(|&r| in_set(r))
                .take(cfg.max_detections)
                .map(|r| props[order[r]].clone())
                .collect();
        }
    }
    unreachable!("greedy suppression always has a fixed point")
}

pub fn nms_vs_brute(cases: usize, seed: u64) -> CheckReport {
    let mut rep = CheckReport::new("nms_3d vs subset enumeration", 0.0);
    let mut rng = rng::derive(seed, 103);
    for _ in 0..cases {
        let n = rng::index(&mut rng, 11);
        let props: Vec<Proposal> = (0..n)
            .map(|_| {
                let b = Box3D::new(
                    rng::uniform(&mut rng, 0.0, 20.0),
                    rng::uniform(&mut rng, 0.0, 20.0),
                    rng::uniform(&mut rng, 0.0, 20.0),
                    rng::uniform(&mut rng, 2.0, 12.0),
                );
                // Coarse scores make ties common.
                let s = (rng::uniform(&mut rng, 0.0, 1.0) * 5.0).round() / 5.0;
                Proposal::from_rpn(b, s, 4)
            })
            .collect();
        let cfg = NmsConfig {
            iou_thresh: [0.0, 0.1, 0.3][rng::index(&mut rng, 3)],
            max_detections: 1 + rng::index(&mut rng, 10),
        };
        rep.record_match(nms_3d(&props, &cfg) == nms_brute(&props, &cfg));
    }
    rep
}

/// Direct trilinear interpolation of channel `ch` at feature coordinate `p`
/// (cell centers at `i + 0.5`, clamped at the borders).
fn interp(feat: &[f64], ch: usize, dims: [usize; 3], p: [f64; 3]) -> f64 {
    let idx: Vec<f64> = (0..3).map(|a| (p[a] - 0.5).clamp(0.0, (dims[a] - 1) as f64)).collect();
    let at = |z: usize, y: usize, x: usize| feat[((ch * dims[0] + z) * dims[1] + y) * dims[2] + x];
    let (z0, y0, x0) = (idx[0].floor() as usize, idx[1].floor() as usize, idx[2].floor() as usize);
    let (z1, y1, x1) = ((z0 + 1).min(dims[0] - 1), (y0 + 1).min(dims[1] - 1), (x0 + 1).min(dims[2] - 1));
    let (fz, fy, fx) = (idx[0] - z0 as f64, idx[1] - y0 as f64, idx[2] - x0 as f64);
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
    let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
    let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
    let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
    lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz)
}

/// Bin averages estimated with `dense` evenly spaced samples per axis.
pub fn roi_align_dense(feat: &[f64], c: usize, dims: [usize; 3], roi: &RoiBox, out_size: usize, dense: usize) -> Vec<f64> {
    let bin = roi.side / out_size as f64;
    let mut out = Vec::with_capacity(c * out_size.pow(3));
    for ch in 0..c {
        for bz in 0..out_size {
            for by in 0..out_size {
                for bx in 0..out_size {
                    let mut acc = 0.0;
                    for i in 0..dense {
                        for j in 0..dense {
                            for k in 0..dense {
                                let t = |b: usize, s: usize| (b as f64 + (s as f64 + 0.5) / dense as f64) * bin;
                                let p = [roi.start[0] + t(bz, i), roi.start[1] + t(by, j), roi.start[2] + t(bx, k)];
                                acc += interp(feat, ch, dims, p);
                            }
                        }
                    }
                    out.push(acc / (dense * dense * dense) as f64);
                }
            }
        }
    }
    out
}


/// RoI Align at the configured sampling against a 10-per-axis dense
/// estimate of each bin average, on random maps with the RoI sizes diameter
/// alignment produces (0.5 to 2.5 cells on a 5-cell crop, four times that on
/// a magnified crop). Error is the largest output deviation relative to the
/// RMS of the map.
pub fn roi_align_vs_dense(cases: usize, seed: u64) -> CheckReport {
    let mut rep = CheckReport::new("roi_align vs dense 10^3", 2e-2);
    let mut rng = rng::derive(seed, 104);
    let cfg = AlignConfig::default();
    for case in 0..cases {
        let c = 1 + rng::index(&mut rng, 3);
        let scale = if case % 2 == 0 { 1 } else { 4 };
        let n = 5 * scale;
        let dims = [n; 3];
        let feat: Vec<f64> = (0..c * n * n * n).map(|_| rng::normal(&mut rng)).collect();
        let side = rng::uniform(&mut rng, 0.5, 2.5) * scale as f64;
        let center = [0; 3].map(|_| (2.5 + rng::uniform(&mut rng, -0.5, 0.5)) * scale as f64);
        let roi = RoiBox::centered(center, side);
        let fast = roi_align_slice(&feat, c, dims, &roi, &cfg);
        let dense = roi_align_dense(&feat, c, dims, &roi, cfg.out_size, 10);
        let rms = (feat.iter().map(|v| v * v).sum::<f64>() / feat.len() as f64).sqrt();
        rep.record(fast.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / rms);
    }
    rep
}

/// Sanity check of the sampling geometry: with 10 samples per bin axis the
/// production path and the dense oracle evaluate identical points.
pub fn roi_align_geometry(cases: usize, seed: u64) -> CheckReport {
    let mut rep = CheckReport::new("roi_align geometry (10/axis)", 1e-12);
    let mut rng = rng::derive(seed, 107);
    let cfg = AlignConfig { out_size: 2, samples: 10 };
    for _ in 0..cases {
        let dims = [0; 3].map(|_| 2 + rng::index(&mut rng, 6));
        let feat: Vec<f64> = (0..dims.iter().product::<usize>()).map(|_| rng::normal(&mut rng)).collect();
        let center = dims.map(|d| rng::uniform(&mut rng, 0.0, d as f64));
        let roi = RoiBox::centered(center, rng::uniform(&mut rng, 0.2, 6.0));
        let fast = roi_align_slice(&feat, 1, dims, &roi, &cfg);
        let dense = roi_align_dense(&feat, 1, dims, &roi, 2, 10);
        rep.record(fast.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    rep
}

/// Focal loss straight from its definition with probabilities.
pub fn focal_vanilla_direct(logits: &[f64], labels: &[bool], cfg: &FocalConfig) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut sum = 0.0;
    for (&z, &pos) in logits.iter().zip(labels) {
        let p = 1.0 / (1.0 + (-z).exp());
        sum += if pos {
            -cfg.alpha * (1.0 - p).powf(cfg.gamma) * p.ln()
        } else {
            -(1.0 - cfg.alpha) * p.powf(cfg.gamma) * (1.0 - p).ln()
        };
    }
    sum / n_pos
}

pub fn focal_adaptive_direct(logits: &[f64], labels: &[Label], cfg: &FocalConfig, state: &FocusShiftState) -> f64 {
    let probs: Vec<f64> = logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
    let n_tn = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| l == Label::Negative && p < state.tn_threshold)
        .count()
        .max(2) as f64;
    let n_pos = labels.iter().filter(|&&l| l == Label::Positive).count();
    let t = state.t0 + (state.t1 - state.t0) * (state.iter as f64 / state.total_iters as f64).min(1.0);
    let mut neg = 0.0;
    let mut pos = 0.0;
    for (&p, &l) in probs.iter().zip(labels) {
        match l {
            Label::Negative => neg += -(1.0 - cfg.alpha) * p.powf(cfg.gamma) * (1.0 - p).ln(),
            Label::Positive => pos += -p.ln(),
            Label::Ignore => {}
        }
    }
    let pos = if n_pos > 0 { pos / n_pos as f64 } else { 0.0 };
    t * n_tn.ln() / n_tn * neg + pos
}

pub fn smooth_l1_direct(pred: &[f64; 4], target: &[f64; 4]) -> f64 {
    (0..4)
        .map(|k| {
            let x = (pred[k] - target[k]).abs();
            if x < 1.0 {
                0.5 * x * x
            } else {
                x - 0.5
            }
        })
        .sum()
}

pub fn losses_vs_direct(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rep = CheckReport::new("losses vs direct formulas", 1e-12);
    let mut rng = rng::derive(seed, 105);
    for _ in 0..cases {
        let n = 1 + rng::index(&mut rng, 40);
        let logits: Vec<f64> = (0..n).map(|_| rng::uniform(&mut rng, -8.0, 8.0)).collect();
        let cfg = FocalConfig {
            alpha: rng::uniform(&mut rng, 0.05, 0.95),
            gamma: [0.0, 0.5, 2.0, 5.0][rng::index(&mut rng, 4)],
        };
        let mut bools: Vec<bool> = (0..n).map(|_| rng::coin(&mut rng, 0.3)).collect();
        bools[0] = true;
        let labels: Vec<Label> = (0..n)
            .map(|_| match rng::index(&mut rng, 6) {
                0 => Label::Positive,
                1 => Label::Ignore,
                _ => Label::Negative,
            })
            .collect();
        let state = FocusShiftState::new(rng::index(&mut rng, 200), 150);
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        let mut err = rel(loss::focal_vanilla(&logits, &bools, &cfg)?.0, focal_vanilla_direct(&logits, &bools, &cfg));
        err = err.max(rel(
            loss::focal_adaptive(&logits, &labels, &cfg, &state)?.loss,
            focal_adaptive_direct(&logits, &labels, &cfg, &state),
        ));
        let pred = [0; 4].map(|_| 2.0 * rng::normal(&mut rng));
        let target = [0; 4].map(|_| 2.0 * rng::normal(&mut rng));
        err = err.max(rel(loss::smooth_l1(&pred, &target, 1.0).0, smooth_l1_direct(&pred, &target)));
        rep.record(err);
    }
    Ok(rep)
}

/// FROC by brute force: for each rate, the best sensitivity over every
/// candidate threshold whose false-positive count stays within budget.
pub fn froc_brute(scans: &[(Vec<Proposal>, Vec<Box3D>)]) -> f64 {
    let n_gt: usize = scans.iter().map(|(_, g)| g.len()).sum();
    let mut thresholds: Vec<f64> = scans.iter().flat_map(|(p, _)| p.iter().map(|q| q.score)).collect();
    thresholds.push(f64::INFINITY);
    let counts = |t: f64| {
        let (mut hit, mut fp) = (0usize, 0usize);
        for (preds, gts) in scans {
            let kept: Vec<&Proposal> = preds.iter().filter(|p| p.score >= t).collect();
            hit += gts.iter().filter(|g| kept.iter().any(|p| g.sphere_contains(p.box3d.center()))).count();
            fp += kept.iter().filter(|p| !gts.iter().any(|g| g.sphere_contains(p.box3d.center()))).count();
        }
        (hit, fp)
    };
    let table: Vec<(usize, usize)> = thresholds.iter().map(|&t| counts(t)).collect();
    let n_scans = scans.len() as f64;
    FP_RATES
        .iter()
        .map(|&r| {
            table
                .iter()
                .filter(|&&(_, fp)| fp as f64 / n_scans <= r)
                .map(|&(h, _)| h as f64 / n_gt as f64)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / FP_RATES.len() as f64
}

pub fn froc_vs_brute(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rep = CheckReport::new("froc vs threshold sweep", 1e-12);
    let mut rng = rng::derive(seed, 106);
    for _ in 0..cases {
        let n_scans = 1 + rng::index(&mut rng, 5);
        let mut scans = Vec::new();
        for _ in 0..n_scans {
            let gts: Vec<Box3D> = (0..rng::index(&mut rng, 3))
                .map(|_| {
                    Box3D::new(
                        rng::uniform(&mut rng, 0.0, 30.0),
                        rng::uniform(&mut rng, 0.0, 30.0),
                        rng::uniform(&mut rng, 0.0, 30.0),
                        rng::uniform(&mut rng, 4.0, 12.0),
                    )
                })
                .collect();
            let preds: Vec<Proposal> = (0..rng::index(&mut rng, 12))
                .map(|_| {
                    let c = if !gts.is_empty() && rng::coin(&mut rng, 0.4) {
                        let g = &gts[rng::index(&mut rng, gts.len())];
                        [g.z + rng::normal(&mut rng), g.y + rng::normal(&mut rng), g.x + rng::normal(&mut rng)]
                    } else {
                        [0; 3].map(|_| rng::uniform(&mut rng, 0.0, 30.0))
                    };
                    let s = (rng::uniform(&mut rng, 0.0, 1.0) * 10.0).round() / 10.0;
                    Proposal::from_rpn(Box3D::new(c[0], c[1], c[2], 6.0), s, 4)
                })
                .collect();
            scans.push((preds, gts));
        }
        if scans.iter().all(|(_, g)| g.is_empty()) {
            scans[0].1.push(Box3D::new(15.0, 15.0, 15.0, 6.0));
        }
        let ids: Vec<String> = (0..scans.len()).map(|i| format!("s{i}")).collect();
        let preds: BTreeMap<String, Vec<Proposal>> = ids.iter().cloned().zip(scans.iter().map(|s| s.0.clone())).collect();
        let gts: BTreeMap<String, Vec<Box3D>> = ids.iter().cloned().zip(scans.iter().map(|s| s.1.clone())).collect();
        let set = EvalSet::new(&ids, &preds, &gts)?;
        rep.record((froc(&set)?.froc - froc_brute(&scans)).abs());
    }
    Ok(rep)
}

/// Every oracle comparison at the stated instance counts.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        iou_vs_voxelized(300, seed),
        assign_vs_exhaustive(300, seed),
        nms_vs_brute(1000, seed),
        roi_align_vs_dense(100, seed),
        roi_align_geometry(50, seed),
        losses_vs_direct(500, seed)?,
        froc_vs_brute(300, seed)?,
    ])
}
