//! Voxel-level class-probability maps.
//!
//! Each slice's class probabilities are painted over its whole plane, one
//! field per orientation, and the three fields are combined voxelwise.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::exec;
use crate::protohead::{Orientation, PrototypeBank};
use crate::vae::VaeModel;
use crate::volume::{write_volume, GroundTruthMask, Volume};
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f32 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    /// Voxelwise geometric mean, renormalised over classes.
    Geometric,
}

/// Per-slice probabilities of one orientation, `[slice][class]`.
pub fn slice_probabilities(
    model: &VaeModel,
    bank: &PrototypeBank,
    volume: &Volume,
    orientation: Orientation,
) -> Result<Vec<Vec<f32>>> {
    let s = check_inputs(model, bank, volume)?;
    exec::try_map_indexed(s, |i| {
        let mut buf = vec![0.0; s * s];
        volume.slice_into(orientation, i, &mut buf);
        let z = model.encode(&buf)?.mu;
        Ok::<_, Error>(bank.score_slice(&z, orientation, i)?.probabilities)
    })
}

fn check_inputs(model: &VaeModel, bank: &PrototypeBank, volume: &Volume) -> Result<usize> {
    let s = model.dims().side;
    if bank.n_section() != s || bank.latent_dim() != model.dims().latent {
        return Err(Error::State("prototype bank does not belong to this model".into()));
    }
    if volume.cube_side() != Some(s) {
        return Err(Error::Dimension(format!(
            "volume {} has dims {:?}, model expects {s}³",
            volume.id,
            volume.dims()
        )));
    }
    Ok(s)
}

/// Dense `[K × S × S × S]` field of one orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityField {
    pub orientation: Orientation,
    pub num_classes: usize,
    pub side: usize,
    pub values: Vec<f32>,
}

/// Paints `probs[i]` over every voxel of plane `i`.
pub fn broadcast_field(probs: &[Vec<f32>], orientation: Orientation) -> Result<ProbabilityField> {
    let s = probs.len();
    let k = probs.first().map_or(0, Vec::len);
    if s == 0 || k == 0 || probs.iter().any(|p| p.len() != k) {
        return Err(Error::Dimension("ragged or empty slice probabilities".into()));
    }
    let s3 = s * s * s;
    let mut values = vec![0.0f32; k * s3];
    for c in 0..k {
        let field = &mut values[c * s3..(c + 1) * s3];
        for i in 0..s {
            for j in 0..s {
                for l in 0..s {
                    let slice = [i, j, l][orientation.axis()];
                    field[(i * s + j) * s + l] = probs[slice][c];
                }
            }
        }
    }
    Ok(ProbabilityField {
        orientation,
        num_classes: k,
        side: s,
        values,
    })
}

pub fn slice_probability_field(
    model: &VaeModel,
    bank: &PrototypeBank,
    volume: &Volume,
    orientation: Orientation,
) -> Result<ProbabilityField> {
    broadcast_field(&slice_probabilities(model, bank, volume, orientation)?, orientation)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub volume_id: String,
    pub num_classes: usize,
    pub side: usize,
    pub threshold: f32,
    /// `[class][voxel]`, voxels row-major as in [`Volume`].
    pub values: Vec<f32>,
}

impl ProbabilityMap {
    pub fn class_values(&self, class: usize) -> Result<&[f32]> {
        if class >= self.num_classes {
            return Err(Error::Input(format!(
                "class {} outside 1..={}",
                class + 1,
                self.num_classes
            )));
        }
        let s3 = self.side.pow(3);
        Ok(&self.values[class * s3..(class + 1) * s3])
    }

    /// One `SVOL` volume per class, tagged `kind: "probmap"`.
    pub fn to_volumes(&self, meta: serde_json::Value) -> Result<Vec<Volume>> {
        (0..self.num_classes)
            .map(|c| {
                let mut v = Volume::new(
                    [self.side; 3],
                    self.class_values(c)?.to_vec(),
                    format!("{}-class{}", self.volume_id, c + 1),
                )?;
                v.label = Some(c as u32 + 1);
                v.kind = Some("probmap".into());
                let mut m = serde_json::json!({
                    "source": self.volume_id,
                    "class": c + 1,
                    "threshold": self.threshold,
                });
                if !meta.is_null() {
                    m["run"] = meta.clone();
                }
                v.meta = Some(m);
                Ok(v)
            })
            .collect()
    }

    /// Voxels with `map[class] >= threshold`.
    pub fn highlight(&self, class: usize, threshold: f32) -> Result<Vec<bool>> {
        Ok(self.class_values(class)?.iter().map(|&p| p >= threshold).collect())
    }

    /// Mean voxel coordinate of the highlighted region, if any.
    pub fn centroid(&self, class: usize, threshold: f32) -> Result<Option<[f64; 3]>> {
        let s = self.side;
        let mut sum = [0.0f64; 3];
        let mut count = 0usize;
        for (idx, _) in self.highlight(class, threshold)?.iter().enumerate().filter(|(_, &h)| h) {
            let p = [idx / (s * s), (idx / s) % s, idx % s];
            for a in 0..3 {
                sum[a] += p[a] as f64;
            }
            count += 1;
        }
        Ok((count > 0).then(|| sum.map(|v| v / count as f64)))
    }

    /// Mean class probability inside and outside a mask.
    pub fn region_means(&self, class: usize, mask: &GroundTruthMask) -> Result<(f64, f64)> {
        let vals = self.class_values(class)?;
        if mask.dims() != [self.side; 3] {
            return Err(Error::Dimension(format!(
                "mask dims {:?} vs map side {}",
                mask.dims(),
                self.side
            )));
        }
        let (mut si, mut ni, mut so, mut no) = (0.0f64, 0usize, 0.0f64, 0usize);
        for (&v, &m) in vals.iter().zip(mask.values()) {
            if m {
                si += v as f64;
                ni += 1;
            } else {
                so += v as f64;
                no += 1;
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        Ok((mean(si, ni), mean(so, no)))
    }
}

pub fn aggregate_probability_map(
    fields: &[ProbabilityField],
    volume_id: impl Into<String>,
    mode: Aggregation,
) -> Result<ProbabilityMap> {
    if fields.len() != 3 {
        return Err(Error::Dimension(format!("expected 3 fields, got {}", fields.len())));
    }
    let (k, s) = (fields[0].num_classes, fields[0].side);
    if fields
        .iter()
        .any(|f| f.num_classes != k || f.side != s || f.values.len() != k * s * s * s)
    {
        return Err(Error::Dimension("orientation fields differ in shape".into()));
    }
    let s3 = s * s * s;
    let mut values = vec![0.0f32; k * s3];
    match mode {
        Aggregation::Mean => {
            for (i, out) in values.iter_mut().enumerate() {
                let sum: f64 = fields.iter().map(|f| f.values[i] as f64).sum();
                *out = (sum / 3.0) as f32;
            }
        }
        Aggregation::Geometric => {
            let mut g = vec![0.0f64; k];
            for v in 0..s3 {
                for (c, gc) in g.iter_mut().enumerate() {
                    let log: f64 = fields
                        .iter()
                        .map(|f| (f.values[c * s3 + v] as f64).max(f64::MIN_POSITIVE).ln())
                        .sum();
                    *gc = (log / 3.0).exp();
                }
                let total: f64 = g.iter().sum();
                for (c, gc) in g.iter().enumerate() {
                    values[c * s3 + v] = (gc / total) as f32;
                }
            }
        }
    }
    Ok(ProbabilityMap {
        volume_id: volume_id.into(),
        num_classes: k,
        side: s,
        threshold: DEFAULT_THRESHOLD,
        values,
    })
}

/// Full map of a canonical volume.
pub fn probability_map(
    model: &VaeModel,
    bank: &PrototypeBank,
    volume: &Volume,
    mode: Aggregation,
) -> Result<ProbabilityMap> {
    let s = check_inputs(model, bank, volume)?;
    let probs = exec::try_map_indexed(3 * s, |i| {
        let o = Orientation::ALL[i / s];
        let mut buf = vec![0.0; s * s];
        volume.slice_into(o, i % s, &mut buf);
        let z = model.encode(&buf)?.mu;
        Ok::<_, Error>(bank.score_slice(&z, o, i % s)?.probabilities)
    })?;
    let fields = Orientation::ALL
        .iter()
        .zip(probs.chunks(s))
        .map(|(&o, p)| broadcast_field(p, o))
        .collect::<Result<Vec<_>>>()?;
    aggregate_probability_map(&fields, volume.id.clone(), mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlaySummary {
    pub volume_id: String,
    /// One-based.
    pub class: usize,
    pub threshold: f32,
    pub highlighted: usize,
    pub centroid: Option<[f64; 3]>,
    pub files: Vec<String>,
    #[serde(default)]
    pub fingerprint: Option<String>,
    #[serde(default)]
    pub run_config: serde_json::Value,
}

/// Writes, for each orientation, a grayscale PGM of the slice through the
/// highlight centroid (the middle slice when nothing is highlighted) and a
/// PPM with highlighted voxels tinted red, plus a JSON sidecar.
pub fn export_overlay(
    map: &ProbabilityMap,
    volume: &Volume,
    class: usize,
    threshold: f32,
    dir: impl AsRef<Path>,
) -> Result<OverlaySummary> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Parameter(format!("threshold {threshold} outside [0, 1]")));
    }
    let mask = map.highlight(class, threshold)?;
    if volume.cube_side() != Some(map.side) {
        return Err(Error::Dimension(format!(
            "volume {} does not match the {}³ map",
            volume.id, map.side
        )));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let s = map.side;
    let centroid = map.centroid(class, threshold)?;
    let stem = format!("{}_class{}", map.volume_id, class + 1);
    let mut files = Vec::new();
    let mut gray = vec![0.0f32; s * s];
    for o in Orientation::ALL {
        let slice = centroid.map_or(s / 2, |c| (c[o.axis()].round() as usize).min(s - 1));
        volume.slice_into(o, slice, &mut gray);
        let pix: Vec<u8> = gray.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let mut pgm = format!("P5\n{s} {s}\n255\n").into_bytes();
        pgm.extend_from_slice(&pix);
        let mut ppm = format!("P6\n{s} {s}\n255\n").into_bytes();
        for r in 0..s {
            for c in 0..s {
                let g = pix[r * s + c];
                if mask[volume.plane_voxel(o, slice, r, c)] {
                    ppm.extend_from_slice(&[255, g / 2, g / 2]);
                } else {
                    ppm.extend_from_slice(&[g, g, g]);
                }
            }
        }
        for (ext, bytes) in [("pgm", pgm), ("ppm", ppm)] {
            let name = format!("{stem}_{}_{:03}.{ext}", o.name(), slice + 1);
            fs::write(dir.join(&name), bytes)?;
            files.push(name);
        }
    }
    let summary = OverlaySummary {
        volume_id: map.volume_id.clone(),
        class: class + 1,
        threshold,
        highlighted: mask.iter().filter(|&&h| h).count(),
        centroid,
        files,
        fingerprint: None,
        run_config: serde_json::Value::Null,
    };
    Ok(summary)
}

pub fn write_overlay_sidecar(summary: &OverlaySummary, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let path = dir
        .as_ref()
        .join(format!("{}_class{}.json", summary.volume_id, summary.class));
    fs::write(&path, serde_json::to_string_pretty(summary)?)?;
    Ok(path)
}

/// Writes one `SVOL` per class into `dir`.
pub fn write_map_volumes(map: &ProbabilityMap, meta: serde_json::Value, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    map.to_volumes(meta)?
        .into_iter()
        .map(|v| {
            let path = dir.join(format!("{}.svol", v.id));
            write_volume(&v, &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(o: Orientation, _k: usize, s: usize, f: impl Fn(usize) -> Vec<f32>) -> ProbabilityField {
        broadcast_field(&(0..s).map(f).collect::<Vec<_>>(), o).unwrap()
    }

    #[test]
    fn constant_probs_give_constant_field() {
        let f = field(Orientation::Coronal, 2, 4, |_| vec![0.3, 0.7]);
        assert!(f.values[..64].iter().all(|&v| v == 0.3));
        assert!(f.values[64..].iter().all(|&v| v == 0.7));
    }

    #[test]
    fn axial_field_depends_on_first_axis_only() {
        let s = 5;
        let f = field(Orientation::Axial, 2, s, |i| vec![i as f32 / 10.0, 1.0 - i as f32 / 10.0]);
        for a in 0..s {
            for b in 0..s {
                for c in 0..s {
                    assert_eq!(f.values[(a * s + b) * s + c], a as f32 / 10.0);
                }
            }
        }
    }

    #[test]
    fn one_of_three_is_a_third() {
        let ones = field(Orientation::Axial, 2, 2, |_| vec![1.0, 0.0]);
        let zeros = |o| field(o, 2, 2, |_| vec![0.0, 1.0]);
        let m = aggregate_probability_map(
            &[ones, zeros(Orientation::Coronal), zeros(Orientation::Sagittal)],
            "v",
            Aggregation::Mean,
        )
        .unwrap();
        assert!((m.values[0] - 1.0 / 3.0).abs() < 1e-7);
        assert!((m.values[0] + m.values[8] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn all_certain_stays_certain() {
        let f = |o| field(o, 2, 3, |_| vec![0.0, 1.0]);
        for mode in [Aggregation::Mean, Aggregation::Geometric] {
            let m = aggregate_probability_map(&Orientation::ALL.map(f), "v", mode).unwrap();
            assert!(m.class_values(1).unwrap().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn mismatched_fields_rejected() {
        let a = field(Orientation::Axial, 2, 2, |_| vec![0.5, 0.5]);
        let b = field(Orientation::Coronal, 2, 3, |_| vec![0.5, 0.5]);
        assert!(aggregate_probability_map(&[a.clone(), b, a], "v", Aggregation::Mean).is_err());
    }

    #[test]
    fn thresholds_and_unknown_class() {
        let f = |o| field(o, 2, 4, |i| vec![i as f32 / 4.0, 1.0 - i as f32 / 4.0]);
        let m = aggregate_probability_map(&Orientation::ALL.map(f), "v", Aggregation::Mean).unwrap();
        assert_eq!(m.highlight(0, 0.0).unwrap().iter().filter(|&&h| h).count(), 64);
        assert_eq!(m.centroid(0, 0.99).unwrap(), None);
        assert!(matches!(m.class_values(2), Err(Error::Input(_))));
    }
}
