//! Deterministic synthetic CT phantoms: Gaussian-profile lesions, tubular
//! vessel distractors, additive noise, plus ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::{write_annotations, DatasetManifest, ManifestEntry, Split};
use crate::rng::{self, DetRng};
use crate::volume::{save_vol1, Box3D, Volume};

/// FWHM = 2 sqrt(2 ln 2) sigma.
const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;
const PLACEMENT_RETRIES: usize = 2000;
const COUNT_STREAM: u64 = 0xC0_07;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub n_lesions: usize,
    pub diameter_range: (f64, f64),
    pub n_vessels: usize,
    pub noise_sigma: f64,
    pub lesion_contrast: f64,
    /// Intensity of lesion-free tissue.
    pub background: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            dims: [64, 64, 64],
            n_lesions: 2,
            diameter_range: (4.0, 12.0),
            n_vessels: 3,
            noise_sigma: 0.05,
            lesion_contrast: 1.0,
            background: 0.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.diameter_range;
        let half_min = *self.dims.iter().min().unwrap() as f64 / 2.0;
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("dims", "zero extent"));
        }
        if !(lo > 0.0 && lo <= hi && hi <= half_min) {
            return Err(Error::invalid(
                "diameter_range",
                format!("need 0 < {lo} <= {hi} <= {half_min}"),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma", "must be >= 0"));
        }
        if !(self.lesion_contrast > 0.0) {
            return Err(Error::invalid("lesion_contrast", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub scan_id: String,
    pub box3d: Box3D,
    pub is_lesion: bool,
}

/// Centerline of a rendered vessel, kept as generator metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Vessel {
    pub points: Vec<[f64; 3]>,
    pub radius: f64,
}

impl Vessel {
    pub fn distance_to(&self, p: [f64; 3]) -> f64 {
        self.points
            .iter()
            .map(|q| ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    pub lesions: Vec<Box3D>,
    pub vessels: Vec<Vessel>,
}

impl Phantom {
    pub fn annotations(&self, scan_id: &str) -> Vec<Annotation> {
        self.lesions
            .iter()
            .map(|b| Annotation {
                scan_id: scan_id.to_string(),
                box3d: *b,
                is_lesion: true,
            })
            .collect()
    }
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let [nz, ny, nx] = spec.dims;
    let (d_min, d_max) = spec.diameter_range;

    let mut lesions: Vec<Box3D> = Vec::with_capacity(spec.n_lesions);
    for k in 0..spec.n_lesions {
        let d = rng::uniform(&mut rng, d_min, d_max);
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let c = [
                rng::uniform(&mut rng, d_max, nz as f64 - d_max),
                rng::uniform(&mut rng, d_max, ny as f64 - d_max),
                rng::uniform(&mut rng, d_max, nx as f64 - d_max),
            ];
            if c.iter().zip(spec.dims).any(|(&c, n)| c < d_max || c > n as f64 - d_max) {
                continue;
            }
            let cand = Box3D::new(c[0], c[1], c[2], d);
            if lesions
                .iter()
                .all(|o| o.center_distance(&cand) > 0.5 * (o.d + cand.d))
            {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(b) => lesions.push(b),
            None => {
                return Err(Error::Generation(format!(
                    "could not place lesion {} of {} (d = {d:.2}) in {:?} after {PLACEMENT_RETRIES} draws",
                    k + 1,
                    spec.n_lesions,
                    spec.dims
                )))
            }
        }
    }

    let vessels: Vec<Vessel> = (0..spec.n_vessels)
        .map(|_| random_vessel(&mut rng, spec))
        .collect();

    let n = nz * ny * nx;
    let mut lesion_field = vec![0f64; n];
    for b in &lesions {
        splat_gaussian(&mut lesion_field, spec.dims, b.center(), b.d / FWHM_PER_SIGMA, spec.lesion_contrast, false);
    }
    let mut vessel_field = vec![0f64; n];
    for v in &vessels {
        let sigma = 2.0 * v.radius / FWHM_PER_SIGMA;
        for p in &v.points {
            splat_gaussian(&mut vessel_field, spec.dims, *p, sigma, spec.lesion_contrast, true);
        }
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let noise = if spec.noise_sigma > 0.0 {
            spec.noise_sigma * rng::normal(&mut rng)
        } else {
            0.0
        };
        data.push((spec.background + lesion_field[i] + vessel_field[i] + noise) as f32);
    }
    Ok(Phantom {
        volume: Volume::new(spec.dims, [1.0; 3], data)?,
        lesions,
        vessels,
    })
}

/// Adds (or max-combines) an isotropic Gaussian evaluated at voxel centers.
fn splat_gaussian(field: &mut [f64], dims: [usize; 3], c: [f64; 3], sigma: f64, peak: f64, use_max: bool) {
    let reach = 4.0 * sigma;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let lo = |a: usize| ((c[a] - reach - 0.5).floor().max(0.0)) as usize;
    let hi = |a: usize| ((c[a] + reach - 0.5).ceil().max(0.0) as usize).min(dims[a] - 1);
    if c.iter().zip(dims).any(|(&c, n)| c + reach < 0.0 || c - reach > n as f64) {
        return;
    }
    for z in lo(0)..=hi(0) {
        let dz = z as f64 + 0.5 - c[0];
        for y in lo(1)..=hi(1) {
            let dy = y as f64 + 0.5 - c[1];
            let row = (z * dims[1] + y) * dims[2];
            for x in lo(2)..=hi(2) {
                let dx = x as f64 + 0.5 - c[2];
                let v = peak * (-(dz * dz + dy * dy + dx * dx) * inv).exp();
                let slot = &mut field[row + x];
                if use_max {
                    *slot = slot.max(v);
                } else {
                    *slot += v;
                }
            }
        }
    }
}

/// A persistent random walk through a random interior point, traced in both
/// directions until it leaves the volume.
fn random_vessel(rng: &mut DetRng, spec: &PhantomSpec) -> Vessel {
    let (d_min, _) = spec.diameter_range;
    let r_hi = d_min / 2.0;
    let radius = rng::uniform(rng, (0.5 * r_hi).max(0.5).min(r_hi), r_hi);
    let start = [
        rng::uniform(rng, 0.0, spec.dims[0] as f64),
        rng::uniform(rng, 0.0, spec.dims[1] as f64),
        rng::uniform(rng, 0.0, spec.dims[2] as f64),
    ];
    let dir = unit([rng::normal(rng), rng::normal(rng), rng::normal(rng)]);
    let max_steps = 4 * spec.dims.iter().max().unwrap();
    let step = 0.5;
    let mut halves = Vec::with_capacity(2);
    for sign in [1.0, -1.0] {
        let mut p = start;
        let mut d = [dir[0] * sign, dir[1] * sign, dir[2] * sign];
        let mut pts = Vec::new();
        for _ in 0..max_steps {
            d = unit([
                d[0] + 0.08 * rng::normal(rng),
                d[1] + 0.08 * rng::normal(rng),
                d[2] + 0.08 * rng::normal(rng),
            ]);
            p = [p[0] + step * d[0], p[1] + step * d[1], p[2] + step * d[2]];
            if p.iter().zip(spec.dims).any(|(&c, n)| c < 0.0 || c > n as f64) {
                break;
            }
            pts.push(p);
        }
        halves.push(pts);
    }
    let mut points: Vec<[f64; 3]> = halves[1].iter().rev().copied().collect();
    points.push(start);
    points.extend(halves[0].iter().copied());
    Vessel { points, radius }
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Template for a generated dataset. Each scan draws its lesion count
/// uniformly from `lesion_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub template: PhantomSpec,
    pub lesion_count: (usize, usize),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            template: PhantomSpec::default(),
            lesion_count: (1, 3),
        }
    }
}

pub fn scan_id(index: usize) -> String {
    format!("scan_{index:04}")
}

/// Spec for scan `index`: seed `base_seed + index` and a lesion count drawn
/// from that seed.
pub fn scan_spec(base_seed: u64, index: usize, ds: &DatasetSpec) -> PhantomSpec {
    let seed = base_seed.wrapping_add(index as u64);
    let (lo, hi) = ds.lesion_count;
    let mut crng = rng::derive(seed, COUNT_STREAM);
    let n_lesions = if hi > lo { lo + rng::index(&mut crng, hi - lo + 1) } else { lo };
    PhantomSpec {
        seed,
        n_lesions,
        ..ds.template.clone()
    }
}

/// Writes `scans/<id>.vol`, `annotations.csv`, and `manifest.csv` under
/// `out_dir`. Train scans take indices `0..n_train`, test scans follow.
pub fn generate_dataset(
    out_dir: &Path,
    base_seed: u64,
    n_train: usize,
    n_test: usize,
    ds: &DatasetSpec,
) -> Result<DatasetManifest> {
    let scans_dir = out_dir.join("scans");
    fs::create_dir_all(&scans_dir).map_err(|e| Error::io(&scans_dir, e))?;
    let mut entries = Vec::with_capacity(n_train + n_test);
    let mut annotations = Vec::new();
    for index in 0..n_train + n_test {
        let spec = scan_spec(base_seed, index, ds);
        let phantom = generate_phantom(&spec)?;
        let id = scan_id(index);
        let rel = PathBuf::from("scans").join(format!("{id}.vol"));
        save_vol1(&out_dir.join(&rel), &phantom.volume)?;
        annotations.extend(phantom.annotations(&id));
        entries.push(ManifestEntry {
            scan_id: id,
            path: rel,
            split: if index < n_train { Split::Train } else { Split::Test },
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    write_annotations(&manifest.annotations_path(), &annotations)?;
    manifest.save()?;
    Ok(manifest)
}
