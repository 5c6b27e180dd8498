//! Volumes: the `SVOL` container, canonical-grid resampling, orientation
//! slicing and the synthetic two-class phantom generator.
//!
//! `SVOL` layout (all integers little-endian):
//!
//! | bytes          | content                                          |
//! |----------------|--------------------------------------------------|
//! | 0..4           | magic `SVOL`                                     |
//! | 4..8           | `u32` header length `h`                          |
//! | 8..8+h         | UTF-8 JSON header (`dims`, `dtype`, `spacing`, `id`, `label`, optional `kind`/`meta`) |
//! | 8+h..          | `D0·D1·D2` `f32` voxels, axis 0 slowest          |

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::protohead::Orientation;
use crate::rng::Rng;
use crate::{Error, Result};

pub const SVOL_MAGIC: &[u8; 4] = b"SVOL";

/// Dense scalar volume, row-major with axis 0 slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxels: Vec<f32>,
    pub spacing: [f32; 3],
    pub id: String,
    /// One-based class label, when known.
    pub label: Option<u32>,
    pub kind: Option<String>,
    pub meta: Option<serde_json::Value>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f32>, id: impl Into<String>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Dimension(format!("volume dims {dims:?} must be positive")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(Error::Dimension(format!(
                "volume dims {dims:?} need {n} voxels, got {}",
                voxels.len()
            )));
        }
        Ok(Self {
            dims,
            voxels,
            spacing: [1.0; 3],
            id: id.into(),
            label: None,
            kind: None,
            meta: None,
        })
    }

    pub fn with_label(mut self, label: Option<u32>) -> Self {
        self.label = label;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.voxels[self.index(i, j, k)]
    }

    /// Side length if the volume is a cube.
    pub fn cube_side(&self) -> Option<usize> {
        let [a, b, c] = self.dims;
        (a == b && b == c).then_some(a)
    }

    fn require_cube(&self) -> Result<usize> {
        self.cube_side().ok_or_else(|| {
            Error::Dimension(format!(
                "volume {} has dims {:?}; a cubic canonical grid is required",
                self.id, self.dims
            ))
        })
    }

    /// Copies slice `slice` (zero-based) of `orientation` into `out`.
    ///
    /// In-plane axes are the two remaining volume axes in increasing order:
    /// axial `(1, 2)`, coronal `(0, 2)`, sagittal `(0, 1)`; the first of them
    /// indexes rows.
    pub fn slice_into(&self, orientation: Orientation, slice: usize, out: &mut [f32]) {
        let s = self.dims[0];
        debug_assert!(self.cube_side().is_some() && out.len() == s * s && slice < s);
        match orientation {
            Orientation::Axial => out.copy_from_slice(&self.voxels[slice * s * s..(slice + 1) * s * s]),
            Orientation::Coronal => {
                for r in 0..s {
                    let src = (r * s + slice) * s;
                    out[r * s..(r + 1) * s].copy_from_slice(&self.voxels[src..src + s]);
                }
            }
            Orientation::Sagittal => {
                for r in 0..s {
                    for c in 0..s {
                        out[r * s + c] = self.voxels[(r * s + c) * s + slice];
                    }
                }
            }
        }
    }

    /// Voxel index of in-plane pixel `(row, col)` of a slice.
    pub fn plane_voxel(&self, orientation: Orientation, slice: usize, row: usize, col: usize) -> usize {
        match orientation {
            Orientation::Axial => self.index(slice, row, col),
            Orientation::Coronal => self.index(row, slice, col),
            Orientation::Sagittal => self.index(row, col, slice),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SvolHeader {
    dims: [usize; 3],
    dtype: String,
    spacing: [f32; 3],
    id: String,
    label: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

pub fn encode_volume(volume: &Volume) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&SvolHeader {
        dims: volume.dims,
        dtype: "f32".into(),
        spacing: volume.spacing,
        id: volume.id.clone(),
        label: volume.label,
        kind: volume.kind.clone(),
        meta: volume.meta.clone(),
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + 4 * volume.voxels.len());
    out.extend_from_slice(SVOL_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &volume.voxels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 4 || &bytes[..4] != SVOL_MAGIC {
        let got = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::format(0, format!("expected magic \"SVOL\", found {got:?}")));
    }
    let hlen = read_u32(bytes, 4)? as usize;
    let body = 8 + hlen;
    if bytes.len() < body {
        return Err(Error::format(
            bytes.len() as u64,
            format!("header of {hlen} bytes is truncated"),
        ));
    }
    let header: SvolHeader = serde_json::from_slice(&bytes[8..body])
        .map_err(|e| Error::format(8, format!("bad header JSON: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::format(8, format!("unsupported dtype {:?}", header.dtype)));
    }
    let n: usize = header.dims.iter().product();
    let payload = &bytes[body..];
    if payload.len() != 4 * n {
        let what = if payload.len() < 4 * n { "truncated payload" } else { "trailing bytes after payload" };
        return Err(Error::format(
            (body + payload.len().min(4 * n)) as u64,
            format!(
                "{what}: dims {:?} need {} bytes, found {}",
                header.dims,
                4 * n,
                payload.len()
            ),
        ));
    }
    let voxels = f32_from_le(payload);
    if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
        return Err(Error::format((body + 4 * i) as u64, "non-finite voxel"));
    }
    let mut v = Volume::new(header.dims, voxels, header.id)?;
    v.spacing = header.spacing;
    v.label = header.label;
    v.kind = header.kind;
    v.meta = header.meta;
    Ok(v)
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_volume(volume)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

pub(crate) fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(bytes.len() as u64, "file ends inside a u32 field"))
}

pub(crate) fn f32_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

/// Trilinear resample onto an `side³` grid (corner-aligned), then min-max
/// normalization to `[0, 1]`. A constant volume maps to all zeros.
pub fn resample_to_canonical(volume: &Volume, side: usize) -> Result<Volume> {
    if volume.dims.iter().any(|&d| d < 2) || side < 2 {
        return Err(Error::Input(format!(
            "resampling needs every dimension >= 2 (volume {:?}, target {side})",
            volume.dims
        )));
    }
    let scale: Vec<f64> = volume
        .dims
        .iter()
        .map(|&d| (d - 1) as f64 / (side - 1) as f64)
        .collect();
    let axis_weights = |axis: usize| -> Vec<(usize, usize, f64)> {
        (0..side)
            .map(|o| {
                let x = o as f64 * scale[axis];
                let lo = (x.floor() as usize).min(volume.dims[axis] - 1);
                let hi = (lo + 1).min(volume.dims[axis] - 1);
                (lo, hi, x - lo as f64)
            })
            .collect()
    };
    let (w0, w1, w2) = (axis_weights(0), axis_weights(1), axis_weights(2));
    let mut out = vec![0.0f32; side * side * side];
    for (i, &(i0, i1, fi)) in w0.iter().enumerate() {
        for (j, &(j0, j1, fj)) in w1.iter().enumerate() {
            for (k, &(k0, k1, fk)) in w2.iter().enumerate() {
                let g = |a, b, c| volume.get(a, b, c) as f64;
                let c00 = g(i0, j0, k0) * (1.0 - fk) + g(i0, j0, k1) * fk;
                let c01 = g(i0, j1, k0) * (1.0 - fk) + g(i0, j1, k1) * fk;
                let c10 = g(i1, j0, k0) * (1.0 - fk) + g(i1, j0, k1) * fk;
                let c11 = g(i1, j1, k0) * (1.0 - fk) + g(i1, j1, k1) * fk;
                let c0 = c00 * (1.0 - fj) + c01 * fj;
                let c1 = c10 * (1.0 - fj) + c11 * fj;
                out[(i * side + j) * side + k] = (c0 * (1.0 - fi) + c1 * fi) as f32;
            }
        }
    }
    normalize_min_max(&mut out);
    let mut v = Volume::new([side; 3], out, volume.id.clone())?;
    v.label = volume.label;
    v.spacing = [0, 1, 2].map(|a| volume.spacing[a] * scale[a] as f32);
    Ok(v)
}

fn normalize_min_max(values: &mut [f32]) {
    let (min, max) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(max > min) {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    if min == 0.0 && max == 1.0 {
        return;
    }
    let range = max - min;
    values
        .iter_mut()
        .for_each(|v| *v = ((*v - min) / range).clamp(0.0, 1.0));
}

/// All slices of one orientation, ordered by position along its axis.
pub fn extract_slices(volume: &Volume, orientation: Orientation) -> Result<Vec<Vec<f32>>> {
    let s = volume.require_cube()?;
    Ok((0..s)
        .map(|i| {
            let mut buf = vec![0.0; s * s];
            volume.slice_into(orientation, i, &mut buf);
            buf
        })
        .collect())
}

/// Axis-aligned ellipsoid in voxel-index coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

pub const BRAIN_INTENSITY: f32 = 0.8;
pub const VENTRICLE_INTENSITY: f32 = 0.1;
pub const BRAIN_SEMI_AXIS: f64 = 0.42;
pub const VENTRICLE_SEMI_AXIS: f64 = 0.08;

/// Parameters of one synthetic phantom. `class` is zero-based; class 0 is
/// the normal template, class `k` enlarges the inner ellipsoid by
/// `1 + (anomaly_scale - 1)·k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub side: usize,
    pub seed: u64,
    pub class: usize,
    pub noise_sigma: f64,
    pub jitter: f64,
    pub anomaly_scale: f64,
}

impl PhantomSpec {
    pub fn ventricle_scale(&self, class: usize) -> f64 {
        1.0 + (self.anomaly_scale - 1.0) * class as f64
    }

    fn validate(&self) -> Result<()> {
        if self.side < 2 {
            return Err(Error::Phantom(format!("side {} is too small", self.side)));
        }
        if !(self.noise_sigma >= 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::Phantom("noise_sigma and jitter must be non-negative".into()));
        }
        if !(self.anomaly_scale > 1.0) {
            return Err(Error::Phantom(format!(
                "anomaly_scale must exceed 1, got {}",
                self.anomaly_scale
            )));
        }
        let r = VENTRICLE_SEMI_AXIS * self.ventricle_scale(self.class.max(1));
        if r >= BRAIN_SEMI_AXIS {
            return Err(Error::Phantom(format!(
                "inner ellipsoid ({:.3}·S) does not fit inside the outer one ({BRAIN_SEMI_AXIS}·S)",
                r
            )));
        }
        Ok(())
    }
}

/// Voxels where the normal and anomalous templates differ.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMask {
    dims: [usize; 3],
    mask: Vec<bool>,
}

impl GroundTruthMask {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Inclusive `(min, max)` voxel corners of the mask.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let [_, d1, d2] = self.dims;
        let mut any = false;
        for (idx, _) in self.mask.iter().enumerate().filter(|(_, &m)| m) {
            any = true;
            let p = [idx / (d1 * d2), (idx / d2) % d1, idx % d2];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        any.then_some((lo, hi))
    }
}

/// Renders a phantom and its ground-truth mask. Deterministic in `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, GroundTruthMask)> {
    spec.validate()?;
    let s = spec.side;
    let sf = s as f64;
    let mut rng = Rng::new(spec.seed);
    let mid = (sf - 1.0) / 2.0;
    let center = [0, 1, 2].map(|_| mid + rng.uniform_range(-spec.jitter, spec.jitter));
    let brain = Ellipsoid {
        center,
        semi_axes: [BRAIN_SEMI_AXIS * sf; 3],
    };
    let ventricle_of = |class: usize| Ellipsoid {
        center,
        semi_axes: [VENTRICLE_SEMI_AXIS * sf * spec.ventricle_scale(class); 3],
    };
    let own = ventricle_of(spec.class);
    let normal = ventricle_of(0);
    let anomalous = ventricle_of(spec.class.max(1));

    let mut voxels = vec![0.0f32; s * s * s];
    let mut mask = vec![false; s * s * s];
    for i in 0..s {
        for j in 0..s {
            for k in 0..s {
                let p = [i as f64, j as f64, k as f64];
                let idx = (i * s + j) * s + k;
                if own.contains(p) {
                    voxels[idx] = VENTRICLE_INTENSITY;
                } else if brain.contains(p) {
                    voxels[idx] = BRAIN_INTENSITY;
                }
                mask[idx] = anomalous.contains(p) && !normal.contains(p);
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in &mut voxels {
            *v = (*v as f64 + spec.noise_sigma * rng.standard_normal()).clamp(0.0, 1.0) as f32;
        }
    }
    let mut volume = Volume::new([s; 3], voxels, format!("phantom-{}", spec.seed))?;
    volume.label = Some(spec.class as u32 + 1);
    Ok((
        volume,
        GroundTruthMask {
            dims: [s; 3],
            mask,
        },
    ))
}

/// One line of a dataset manifest (JSON lines). `path` is relative to the
/// manifest's directory; `label` is one-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub id: String,
    pub label: u32,
    pub split: String,
}

pub fn write_manifest(records: &[ManifestRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Input(format!("manifest line {}: {e}", n + 1)))
        })
        .collect()
}
