//! Whole-volume inference: overlapping tiles, ownership-based merging,
//! greedy 3-D NMS and two-model ensembling.

use std::time::Instant;

use crate::anchors::cube_iou;
use crate::error::{Error, Result};
use crate::model::DetectorLike;
use crate::nn::Tensor;
use crate::roi::Proposal;
use crate::volume::{crop_pad, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct TileSpec {
    pub tile: [usize; 3],
    pub margin: usize,
    pub dims: [usize; 3],
    /// Per-axis origin lists; the tiles are their Cartesian product.
    pub axis_origins: [Vec<usize>; 3],
}

impl TileSpec {
    pub fn origins(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for &z in &self.axis_origins[0] {
            for &y in &self.axis_origins[1] {
                for &x in &self.axis_origins[2] {
                    out.push([z, y, x]);
                }
            }
        }
        out
    }

    /// Whether the tile at `origin` owns global point `p`: on every axis its
    /// center is the nearest tile center (lower origin on ties).
    pub fn owns(&self, origin: [usize; 3], p: [f64; 3]) -> bool {
        (0..3).all(|a| {
            let half = self.tile[a] as f64 / 2.0;
            let mine = (p[a] - (origin[a] as f64 + half)).abs();
            self.axis_origins[a].iter().all(|&o| {
                let d = (p[a] - (o as f64 + half)).abs();
                d > mine || (d == mine && o >= origin[a])
            })
        })
    }
}

fn axis_origins(n: usize, tile: usize, stride: usize) -> Vec<usize> {
    if tile >= n {
        return vec![0];
    }
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        if o + tile >= n {
            let last = n - tile;
            if out.last() != Some(&last) {
                out.push(last);
            }
            break;
        }
        out.push(o);
        o += stride;
    }
    out
}

/// Origins on a `tile - margin` grid per axis with the last tile clamped to
/// end at the volume edge. An axis shorter than the tile gets one tile at 0
/// (the caller pads).
pub fn tile_volume(dims: [usize; 3], tile: usize, margin: usize) -> Result<TileSpec> {
    if tile == 0 || margin >= tile {
        return Err(Error::invalid("tile/margin", format!("need 0 <= margin < tile, got tile {tile}, margin {margin}")));
    }
    if dims.contains(&0) {
        return Err(Error::invalid("dims", "must be >= 1"));
    }
    let stride = tile - margin;
    Ok(TileSpec {
        tile: [tile; 3],
        margin,
        dims,
        axis_origins: [0, 1, 2].map(|a| axis_origins(dims[a], tile, stride)),
    })
}

/// Translates per-tile proposals to volume coordinates and keeps each only
/// in the tile that owns its center.
pub fn merge_tiles(per_tile: &[([usize; 3], Vec<Proposal>)], spec: &TileSpec) -> Vec<Proposal> {
    let mut out = Vec::new();
    for (origin, props) in per_tile {
        for p in props {
            let g = p.translated(origin[0] as f64, origin[1] as f64, origin[2] as f64);
            if spec.owns(*origin, g.box3d.center()) {
                out.push(g);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsConfig {
    pub iou_thresh: f64,
    pub max_detections: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            iou_thresh: 0.1,
            max_detections: 100,
        }
    }
}

/// Greedy NMS by descending `score` (stable for ties). A candidate is
/// dropped when its cube IoU with a kept box exceeds the threshold or its
/// center lies inside a kept box's sphere.
pub fn nms_3d(props: &[Proposal], cfg: &NmsConfig) -> Vec<Proposal> {
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| props[b].score.total_cmp(&props[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Proposal> = Vec::new();
    for i in order {
        if kept.len() >= cfg.max_detections {
            break;
        }
        let c = &props[i];
        let suppressed = kept
            .iter()
            .any(|k| cube_iou(&k.box3d, &c.box3d) > cfg.iou_thresh || k.box3d.sphere_contains(c.box3d.center()));
        if !suppressed {
            kept.push(c.clone());
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMode {
    Union,
    Intersection,
}

impl std::str::FromStr for EnsembleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "union" => Ok(EnsembleMode::Union),
            "intersection" => Ok(EnsembleMode::Intersection),
            other => Err(Error::invalid("ensemble", format!("unknown mode `{other}` (union|intersection)"))),
        }
    }
}

fn mutual_hit(a: &Proposal, b: &Proposal) -> bool {
    a.box3d.sphere_contains(b.box3d.center()) && b.box3d.sphere_contains(a.box3d.center())
}

fn average(a: &Proposal, b: &Proposal) -> Proposal {
    let mid = |u: f64, v: f64| 0.5 * (u + v);
    Proposal {
        box3d: crate::volume::Box3D::new(
            mid(a.box3d.z, b.box3d.z),
            mid(a.box3d.y, b.box3d.y),
            mid(a.box3d.x, b.box3d.x),
            mid(a.box3d.d, b.box3d.d),
        ),
        rpn_score: mid(a.rpn_score, b.rpn_score),
        fpr_score: match (a.fpr_score, b.fpr_score) {
            (Some(u), Some(v)) => Some(mid(u, v)),
            (u, v) => u.or(v),
        },
        score: mid(a.score, b.score),
        level: a.level,
    }
}

/// Pairs proposals whose centers lie inside each other's spheres (A in
/// descending score order, each taking the nearest unmatched B), averages
/// matched pairs and keeps unmatched ones only for `Union`. Output is sorted
/// by score, descending.
pub fn ensemble_merge(a: &[Proposal], b: &[Proposal], mode: EnsembleMode) -> Vec<Proposal> {
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| a[j].score.total_cmp(&a[i].score).then(i.cmp(&j)));
    let mut b_used = vec![false; b.len()];
    let mut out = Vec::new();
    for i in order {
        let best = b
            .iter()
            .enumerate()
            .filter(|&(j, q)| !b_used[j] && mutual_hit(&a[i], q))
            .min_by(|x, y| a[i].box3d.center_distance(&x.1.box3d).total_cmp(&a[i].box3d.center_distance(&y.1.box3d)));
        match best {
            Some((j, q)) => {
                b_used[j] = true;
                out.push(average(&a[i], q));
            }
            None if mode == EnsembleMode::Union => out.push(a[i].clone()),
            None => {}
        }
    }
    if mode == EnsembleMode::Union {
        out.extend(b.iter().zip(&b_used).filter(|(_, &u)| !u).map(|(q, _)| q.clone()));
    }
    out.sort_by(|x, y| y.score.total_cmp(&x.score));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferConfig {
    /// `None` runs the network on the whole (padded) volume at once.
    pub tile: Option<usize>,
    pub margin: usize,
    pub nms: NmsConfig,
    pub with_fprn: bool,
    /// Intensity used to pad volumes up to the network's input multiple.
    pub pad_value: f32,
    pub ensemble: EnsembleMode,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            tile: Some(64),
            margin: 16,
            nms: NmsConfig::default(),
            with_fprn: true,
            pad_value: 0.0,
            ensemble: EnsembleMode::Union,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanDetections {
    /// Ranked by fused score (equal to the RPN score without the second
    /// branch).
    pub fused: Vec<Proposal>,
    /// The same pass ranked and suppressed by RPN score alone.
    pub rpn: Vec<Proposal>,
    pub seconds: f64,
}

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Raw merged (pre-NMS) proposals of one model on one volume.
pub fn raw_detections<M: DetectorLike + ?Sized>(model: &mut M, vol: &Volume, cfg: &InferConfig) -> Result<Vec<Proposal>> {
    let m = model.input_multiple();
    let dims = vol.dims();
    let (tile, margin) = match cfg.tile {
        Some(t) => {
            if t % m != 0 {
                return Err(Error::invalid("tile", format!("must be a multiple of {m}, got {t}")));
            }
            (t, cfg.margin)
        }
        None => (round_up(*dims.iter().max().expect("3 dims"), m), 0),
    };
    let padded = dims.map(|n| round_up(n.max(tile), m));
    let spec = if cfg.tile.is_some() {
        tile_volume(padded, tile, margin)?
    } else {
        TileSpec {
            tile: padded,
            margin: 0,
            dims: padded,
            axis_origins: [vec![0], vec![0], vec![0]],
        }
    };
    let mut per_tile = Vec::new();
    for origin in spec.origins() {
        let size = spec.tile;
        let crop = crop_pad(vol, origin.map(|v| v as i64), size, cfg.pad_value)?;
        let x = Tensor::from_vec(&[1, 1, size[0], size[1], size[2]], crop.into_data())?;
        per_tile.push((origin, model.detect(&x, cfg.with_fprn)?));
    }
    let inside = |p: &Proposal| {
        let c = p.box3d.center();
        (0..3).all(|a| c[a] >= 0.0 && c[a] < dims[a] as f64)
    };
    Ok(merge_tiles(&per_tile, &spec).into_iter().filter(inside).collect())
}

/// Tiled inference, merging and NMS for one model, or two models merged as
/// an ensemble.
pub fn infer_scan<M: DetectorLike + ?Sized>(models: &mut [&mut M], vol: &Volume, cfg: &InferConfig) -> Result<ScanDetections> {
    let start = Instant::now();
    if models.is_empty() || models.len() > 2 {
        return Err(Error::invalid("models", format!("need one or two models, got {}", models.len())));
    }
    let mut fused_sets = Vec::new();
    let mut rpn_sets = Vec::new();
    for m in models.iter_mut() {
        let raw = raw_detections(&mut **m, vol, cfg)?;
        let rpn_ranked: Vec<Proposal> = raw.iter().map(Proposal::rpn_only).collect();
        fused_sets.push(nms_3d(&raw, &cfg.nms));
        rpn_sets.push(nms_3d(&rpn_ranked, &cfg.nms));
    }
    let combine = |mut sets: Vec<Vec<Proposal>>| {
        if sets.len() == 2 {
            let b = sets.pop().expect("two sets");
            ensemble_merge(&sets[0], &b, cfg.ensemble)
        } else {
            sets.pop().expect("one set")
        }
    };
    Ok(ScanDetections {
        fused: combine(fused_sets),
        rpn: combine(rpn_sets),
        seconds: start.elapsed().as_secs_f64(),
    })
}
