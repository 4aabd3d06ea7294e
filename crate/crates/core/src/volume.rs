//! Dense scalar volumes, resampling, cropping, intensity windowing, and the
//! `VOL1` binary format.
//!
//! Layout is row-major with z slowest: `data[(z * ny + y) * nx + x]`. Voxel
//! `i` along an axis covers the continuous interval `[i, i + 1)`, so its
//! center sits at `i + 0.5`. Every coordinate in the crate uses this rule.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

/// A box encoded as center plus diameter, in voxel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub z: f64,
    pub y: f64,
    pub x: f64,
    pub d: f64,
}

impl Box3D {
    pub fn new(z: f64, y: f64, x: f64, d: f64) -> Self {
        Box3D { z, y, x, d }
    }

    pub fn center(&self) -> [f64; 3] {
        [self.z, self.y, self.x]
    }

    pub fn radius(&self) -> f64 {
        0.5 * self.d
    }

    pub fn is_valid(&self) -> bool {
        self.d > 0.0 && self.z.is_finite() && self.y.is_finite() && self.x.is_finite() && self.d.is_finite()
    }

    pub fn center_distance(&self, other: &Box3D) -> f64 {
        let dz = self.z - other.z;
        let dy = self.y - other.y;
        let dx = self.x - other.x;
        (dz * dz + dy * dy + dx * dx).sqrt()
    }

    /// True when `point` lies strictly inside this box's bounding sphere.
    pub fn sphere_contains(&self, point: [f64; 3]) -> bool {
        let dz = self.z - point[0];
        let dy = self.y - point[1];
        let dx = self.x - point[2];
        (dz * dz + dy * dy + dx * dx).sqrt() < self.radius()
    }

    pub fn translated(&self, dz: f64, dy: f64, dx: f64) -> Box3D {
        Box3D::new(self.z + dz, self.y + dy, self.x + dx, self.d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("dims", format!("{dims:?} has a zero extent")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("spacing", format!("{spacing:?} must be positive")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::shape("data length", n, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("data", "non-finite voxel value"));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f32) -> Result<Self> {
        let n = dims.iter().product();
        Volume::new(dims, spacing, vec![value; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// Value at signed coordinates, or `None` outside the grid.
    pub fn get_signed(&self, z: i64, y: i64, x: i64) -> Option<f32> {
        let [nz, ny, nx] = self.dims;
        if z < 0 || y < 0 || x < 0 || z >= nz as i64 || y >= ny as i64 || x >= nx as i64 {
            return None;
        }
        Some(self.get(z as usize, y as usize, x as usize))
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Trilinear sample at continuous index coordinates (voxel centers at
    /// integers), clamping to the boundary voxel.
    pub fn sample_clamped(&self, z: f64, y: f64, x: f64) -> f64 {
        let (z0, z1, wz) = clamp_axis(z, self.dims[0]);
        let (y0, y1, wy) = clamp_axis(y, self.dims[1]);
        let (x0, x1, wx) = clamp_axis(x, self.dims[2]);
        let v = |z, y, x| self.get(z, y, x) as f64;
        let c00 = v(z0, y0, x0) * (1.0 - wx) + v(z0, y0, x1) * wx;
        let c01 = v(z0, y1, x0) * (1.0 - wx) + v(z0, y1, x1) * wx;
        let c10 = v(z1, y0, x0) * (1.0 - wx) + v(z1, y0, x1) * wx;
        let c11 = v(z1, y1, x0) * (1.0 - wx) + v(z1, y1, x1) * wx;
        let c0 = c00 * (1.0 - wy) + c01 * wy;
        let c1 = c10 * (1.0 - wy) + c11 * wy;
        c0 * (1.0 - wz) + c1 * wz
    }

    /// FNV-1a over the raw little-endian bytes; cheap identity for tests and
    /// manifests.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

fn clamp_axis(c: f64, n: usize) -> (usize, usize, f64) {
    let hi = (n - 1) as f64;
    let c = c.clamp(0.0, hi);
    let i0 = c.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - i0 as f64)
}

/// Resamples onto a new grid spacing with trilinear interpolation.
///
/// Output extent per axis is `round(n * spacing / target)` (at least 1). The
/// output voxel center `j + 0.5` maps back to physical position
/// `(j + 0.5) * target`, i.e. input index `(j + 0.5) * target / spacing - 0.5`.
pub fn resample_trilinear(vol: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    if target_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(
            "target_spacing",
            format!("{target_spacing:?} must be positive"),
        ));
    }
    if target_spacing == vol.spacing {
        return Ok(vol.clone());
    }
    let mut dims = [0usize; 3];
    let mut scale = [0f64; 3];
    for a in 0..3 {
        let extent = vol.dims[a] as f64 * vol.spacing[a] / target_spacing[a];
        dims[a] = (extent.round() as usize).max(1);
        scale[a] = target_spacing[a] / vol.spacing[a];
    }
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        let sz = (z as f64 + 0.5) * scale[0] - 0.5;
        for y in 0..dims[1] {
            let sy = (y as f64 + 0.5) * scale[1] - 0.5;
            for x in 0..dims[2] {
                let sx = (x as f64 + 0.5) * scale[2] - 0.5;
                out.push(vol.sample_clamped(sz, sy, sx) as f32);
            }
        }
    }
    Volume::new(dims, target_spacing, out)
}

/// Extracts `size` voxels starting at `origin`; anything outside the source
/// grid takes `fill`.
pub fn crop_pad(vol: &Volume, origin: [i64; 3], size: [usize; 3], fill: f32) -> Result<Volume> {
    if size.iter().any(|&s| s == 0) {
        return Err(Error::invalid("size", format!("{size:?} has a zero extent")));
    }
    let [nz, ny, nx] = vol.dims;
    let mut out = vec![fill; size[0] * size[1] * size[2]];
    // Copy the in-bounds x-run of each row in one slice operation.
    let x_lo = origin[2].max(0);
    let x_hi = (origin[2] + size[2] as i64).min(nx as i64);
    if x_lo < x_hi {
        for cz in 0..size[0] {
            let sz = origin[0] + cz as i64;
            if sz < 0 || sz >= nz as i64 {
                continue;
            }
            for cy in 0..size[1] {
                let sy = origin[1] + cy as i64;
                if sy < 0 || sy >= ny as i64 {
                    continue;
                }
                let src = vol.index(sz as usize, sy as usize, x_lo as usize);
                let dst = (cz * size[1] + cy) * size[2] + (x_lo - origin[2]) as usize;
                let n = (x_hi - x_lo) as usize;
                out[dst..dst + n].copy_from_slice(&vol.data[src..src + n]);
            }
        }
    }
    Volume::new(size, vol.spacing, out)
}

/// Clamps to `[lo, hi]` and maps affinely onto `[0, 1]`.
pub fn normalize_intensity(vol: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::invalid("window", format!("lo {lo} must be below hi {hi}")));
    }
    let span = hi - lo;
    let data = vol.data.iter().map(|&v| (v.clamp(lo, hi) - lo) / span).collect();
    Volume::new(vol.dims, vol.spacing, data)
}

const VOL_MAGIC: &[u8; 4] = b"VOL1";

pub fn write_vol1<W: Write>(mut w: W, vol: &Volume) -> std::io::Result<()> {
    w.write_all(VOL_MAGIC)?;
    for &d in &vol.dims {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &s in &vol.spacing {
        w.write_f32::<LittleEndian>(s as f32)?;
    }
    for &v in &vol.data {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_vol1<R: Read>(mut r: R, source: &str) -> Result<Volume> {
    let fmt = |reason: String| Error::Format {
        path: source.to_string(),
        reason,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| fmt(format!("missing header: {e}")))?;
    if &magic != VOL_MAGIC {
        return Err(fmt(format!("bad magic {magic:?}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r
            .read_u32::<LittleEndian>()
            .map_err(|e| fmt(format!("truncated dims: {e}")))? as usize;
    }
    let mut spacing = [0f64; 3];
    for s in &mut spacing {
        *s = r
            .read_f32::<LittleEndian>()
            .map_err(|e| fmt(format!("truncated spacing: {e}")))? as f64;
    }
    let n: usize = dims.iter().product();
    let mut data = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|e| fmt(format!("truncated voxel data: {e}")))?;
    Volume::new(dims, spacing, data).map_err(|e| fmt(e.to_string()))
}

pub fn save_vol1(path: &Path, vol: &Volume) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_vol1(&mut w, vol).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_vol1(path: &Path) -> Result<Volume> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_vol1(BufReader::new(f), &path.display().to_string())
}
