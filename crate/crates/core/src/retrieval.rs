//! 2.5D retrieval and detection.
//!
//! Slice codes of one orientation are grouped into blocks of `n` consecutive
//! slices taken every `m` slices; block `j` (zero-based) covers slices
//! `j·m .. j·m + n`. Each block is classified against the concatenation of
//! the per-slice prototypes at the same positions, the per-block votes are
//! thresholded per class, and the three orientations are combined with the
//! `r`-of-3 rule. The gallery index stores block codes for nearest-case
//! retrieval.

use std::collections::BTreeSet;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::LabeledVolume;
use crate::exec;
use crate::protohead::{cosine_similarity, score_against, ClassScores, Orientation, PrototypeBank};
use crate::vae::VaeModel;
use crate::volume::{f32_from_le, read_u32, Volume};
use crate::{Error, Result};

pub const ICBX_MAGIC: &[u8; 4] = b"ICBX";
pub const ICBX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockParams {
    /// Slices per block.
    pub n: usize,
    /// Stride between block starts.
    pub m: usize,
}

impl Default for BlockParams {
    fn default() -> Self {
        Self { n: 8, m: 4 }
    }
}

impl BlockParams {
    /// `J = floor((N - n) / m) + 1`.
    pub fn num_blocks(&self, n_section: usize) -> Result<usize> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::Parameter(format!(
                "block size n={} and stride m={} must be positive",
                self.n, self.m
            )));
        }
        if self.n > n_section {
            return Err(Error::Parameter(format!(
                "block size n={} exceeds the {n_section} available slices",
                self.n
            )));
        }
        Ok((n_section - self.n) / self.m + 1)
    }

    /// Zero-based slice positions of block `j`.
    pub fn slices(&self, j: usize) -> Range<usize> {
        j * self.m..j * self.m + self.n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCode {
    pub index: usize,
    pub vector: Vec<f32>,
}

/// Concatenates slice codes into the `J` blocks defined by `params`.
pub fn build_blocks<C: AsRef<[f32]>>(codes: &[C], params: BlockParams) -> Result<Vec<BlockCode>> {
    let count = params.num_blocks(codes.len())?;
    Ok((0..count)
        .map(|j| BlockCode {
            index: j,
            vector: params
                .slices(j)
                .flat_map(|i| codes[i].as_ref().iter().copied())
                .collect(),
        })
        .collect())
}

/// Concatenated prototypes `u_{j,k}` of block `j` for every class.
pub fn block_prototypes(
    bank: &PrototypeBank,
    orientation: Orientation,
    params: BlockParams,
    j: usize,
) -> Result<Vec<Vec<f32>>> {
    let count = params.num_blocks(bank.n_section())?;
    if j >= count {
        return Err(Error::Parameter(format!("block {} of {count}", j + 1)));
    }
    Ok((0..bank.num_classes())
        .map(|k| {
            params
                .slices(j)
                .flat_map(|i| bank.prototype(orientation, i, k).iter().copied())
                .collect()
        })
        .collect())
}

/// Cosine-softmax classification of a whole concatenated block.
pub fn classify_block(block: &[f32], prototypes: &[Vec<f32>], temperature: f32) -> Result<ClassScores> {
    score_against(block, prototypes.iter().map(|p| p.as_slice()), temperature)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    /// Per-class vote-fraction threshold; a class is detected in a section
    /// when strictly more than this fraction of blocks predict it.
    pub xi: Vec<f64>,
    /// Orientations that must detect a class for the volume to get it.
    pub r: usize,
    /// The default label; never "detected".
    pub normal_class: usize,
}

impl DetectionConfig {
    pub fn uniform(num_classes: usize, xi: f64, r: usize) -> Self {
        Self {
            xi: vec![xi; num_classes],
            r,
            normal_class: 0,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.xi.len() != num_classes {
            return Err(Error::Config(format!(
                "{} thresholds for {num_classes} classes",
                self.xi.len()
            )));
        }
        if let Some(x) = self.xi.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Config(format!("threshold {x} outside [0, 1]")));
        }
        if !(1..=3).contains(&self.r) {
            return Err(Error::Config(format!("r must be 1, 2 or 3, got {}", self.r)));
        }
        if self.normal_class >= num_classes {
            return Err(Error::Config(format!(
                "normal class {} outside 1..={num_classes}",
                self.normal_class + 1
            )));
        }
        Ok(())
    }
}

/// Vote tally of one orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionDetection {
    pub votes: Vec<usize>,
    pub fractions: Vec<f64>,
    pub detected: Vec<usize>,
}

impl SectionDetection {
    /// The detected class with the largest vote fraction, else `normal`.
    pub fn label(&self, normal: usize) -> usize {
        let mut best: Option<usize> = None;
        for &d in &self.detected {
            if best.is_none_or(|b| self.fractions[d] > self.fractions[b]) {
                best = Some(d);
            }
        }
        best.unwrap_or(normal)
    }
}

pub fn detect_section(predictions: &[usize], config: &DetectionConfig) -> Result<SectionDetection> {
    let k = config.xi.len();
    if predictions.is_empty() {
        return Err(Error::Input("a section needs at least one block".into()));
    }
    let mut votes = vec![0usize; k];
    for &p in predictions {
        if p >= k {
            return Err(Error::Input(format!("block prediction {} outside 1..={k}", p + 1)));
        }
        votes[p] += 1;
    }
    let total = predictions.len() as f64;
    let fractions: Vec<f64> = votes.iter().map(|&v| v as f64 / total).collect();
    let detected = (0..k)
        .filter(|&d| d != config.normal_class && fractions[d] > config.xi[d])
        .collect();
    Ok(SectionDetection {
        votes,
        fractions,
        detected,
    })
}

/// Combines the three orientation tallies with the `r`-of-3 rule.
pub fn detect_volume(sections: &[SectionDetection], config: &DetectionConfig) -> Result<usize> {
    if sections.len() != 3 {
        return Err(Error::Input(format!(
            "expected 3 orientation results, got {}",
            sections.len()
        )));
    }
    let k = config.xi.len();
    let mut best: Option<(usize, f64)> = None;
    for d in 0..k {
        if d == config.normal_class {
            continue;
        }
        let hits = sections.iter().filter(|s| s.detected.contains(&d)).count();
        if hits < config.r {
            continue;
        }
        let weight: f64 = sections.iter().map(|s| s.fractions[d]).sum();
        if best.is_none_or(|(_, w)| weight > w) {
            best = Some((d, weight));
        }
    }
    Ok(best.map_or(config.normal_class, |(d, _)| d))
}

/// Inference codes (`z = mu`) of every slice, `[orientation][slice][latent]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeCodes {
    pub per_orientation: [Vec<Vec<f32>>; 3],
}

pub fn encode_volume(model: &VaeModel, volume: &Volume) -> Result<VolumeCodes> {
    let s = model.dims().side;
    if volume.cube_side() != Some(s) {
        return Err(Error::Dimension(format!(
            "volume {} has dims {:?}, model expects {s}³",
            volume.id,
            volume.dims()
        )));
    }
    let mut codes = exec::try_map_indexed(3 * s, |i| {
        let mut buf = vec![0.0; s * s];
        volume.slice_into(Orientation::ALL[i / s], i % s, &mut buf);
        Ok::<_, Error>(model.encode(&buf)?.mu)
    })?;
    let sag = codes.split_off(2 * s);
    let cor = codes.split_off(s);
    Ok(VolumeCodes {
        per_orientation: [codes, cor, sag],
    })
}

/// Block classifications and votes of one orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientationResult {
    pub orientation: Orientation,
    pub blocks: Vec<ClassScores>,
    pub section: SectionDetection,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeDetection {
    pub orientations: Vec<OrientationResult>,
    pub label: usize,
}

pub fn detect_codes(
    bank: &PrototypeBank,
    codes: &VolumeCodes,
    params: BlockParams,
    config: &DetectionConfig,
) -> Result<VolumeDetection> {
    config.validate(bank.num_classes())?;
    let mut orientations = Vec::with_capacity(3);
    for o in Orientation::ALL {
        let blocks = build_blocks(&codes.per_orientation[o.axis()], params)?;
        let scores = blocks
            .iter()
            .map(|b| classify_block(&b.vector, &block_prototypes(bank, o, params, b.index)?, bank.temperature()))
            .collect::<Result<Vec<_>>>()?;
        let preds: Vec<usize> = scores.iter().map(|s| s.predicted).collect();
        let section = detect_section(&preds, config)?;
        let label = section.label(config.normal_class);
        orientations.push(OrientationResult {
            orientation: o,
            blocks: scores,
            section,
            label,
        });
    }
    let sections: Vec<SectionDetection> = orientations.iter().map(|r| r.section.clone()).collect();
    let label = detect_volume(&sections, config)?;
    Ok(VolumeDetection {
        orientations,
        label,
    })
}

pub fn detect(
    checkpoint: &Checkpoint,
    volume: &Volume,
    params: BlockParams,
    config: &DetectionConfig,
) -> Result<VolumeDetection> {
    let codes = encode_volume(&checkpoint.model, volume)?;
    detect_codes(&checkpoint.bank, &codes, params, config)
}

/// Block codes of one gallery volume, `[orientation][block][n·L]` flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub id: String,
    pub label: Option<usize>,
    pub blocks: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    pub params: BlockParams,
    pub fingerprint: String,
    pub n_section: usize,
    pub latent_dim: usize,
    pub run_config: serde_json::Value,
    pub entries: Vec<GalleryEntry>,
}

impl GalleryIndex {
    pub fn blocks_per_orientation(&self) -> usize {
        (self.n_section - self.params.n) / self.params.m + 1
    }

    pub fn vector_len(&self) -> usize {
        self.params.n * self.latent_dim
    }

    fn entry_len(&self) -> usize {
        3 * self.blocks_per_orientation() * self.vector_len()
    }
}

/// Flattened block codes of a volume in gallery layout.
pub fn volume_blocks(codes: &VolumeCodes, params: BlockParams) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for o in Orientation::ALL {
        for b in build_blocks(&codes.per_orientation[o.axis()], params)? {
            out.extend_from_slice(&b.vector);
        }
    }
    Ok(out)
}

/// Mean blockwise cosine over every (orientation, block) pair.
pub fn block_similarity(a: &[f32], b: &[f32], vector_len: usize) -> Result<f64> {
    if a.len() != b.len() || !a.len().is_multiple_of(vector_len) || a.is_empty() {
        return Err(Error::Dimension(format!(
            "block payloads of {} and {} values (vector length {vector_len})",
            a.len(),
            b.len()
        )));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (x, y) in a.chunks(vector_len).zip(b.chunks(vector_len)) {
        sum += cosine_similarity(x, y)? as f64;
        count += 1;
    }
    Ok(sum / count as f64)
}

pub fn index_gallery(
    checkpoint: &Checkpoint,
    volumes: &[LabeledVolume],
    params: BlockParams,
) -> Result<GalleryIndex> {
    let n_section = checkpoint.model.dims().side;
    params.num_blocks(n_section)?;
    let mut ids = BTreeSet::new();
    for v in volumes {
        if !ids.insert(v.id.as_str()) {
            return Err(Error::Index(format!("duplicate gallery id {:?}", v.id)));
        }
    }
    let entries = volumes
        .iter()
        .map(|v| {
            let codes = encode_volume(&checkpoint.model, &v.volume)?;
            Ok(GalleryEntry {
                id: v.id.clone(),
                label: Some(v.class),
                blocks: volume_blocks(&codes, params)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GalleryIndex {
        params,
        fingerprint: checkpoint.fingerprint(),
        n_section,
        latent_dim: checkpoint.model.dims().latent,
        run_config: serde_json::Value::Null,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub id: String,
    /// Zero-based class of the gallery entry.
    pub label: Option<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub hits: Vec<QueryHit>,
    pub truncated: bool,
}

/// Ranks gallery entries against precomputed query block codes.
pub fn query_blocks(index: &GalleryIndex, blocks: &[f32], k: usize) -> Result<QueryResult> {
    if blocks.len() != index.entry_len() {
        return Err(Error::Index(format!(
            "query has {} block values, index entries have {}",
            blocks.len(),
            index.entry_len()
        )));
    }
    let vl = index.vector_len();
    let scores = exec::try_map_indexed(index.entries.len(), |i| {
        block_similarity(blocks, &index.entries[i].blocks, vl)
    })?;
    let mut hits: Vec<QueryHit> = index
        .entries
        .iter()
        .zip(scores)
        .map(|(e, score)| QueryHit {
            id: e.id.clone(),
            label: e.label,
            score,
        })
        .collect();
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    let truncated = k > hits.len();
    if truncated {
        log::warn!("requested {k} neighbours but the gallery holds {}", hits.len());
    }
    hits.truncate(k);
    Ok(QueryResult { hits, truncated })
}

pub fn query(index: &GalleryIndex, checkpoint: &Checkpoint, volume: &Volume, k: usize) -> Result<QueryResult> {
    let fp = checkpoint.fingerprint();
    if fp != index.fingerprint {
        return Err(Error::Index(format!(
            "checkpoint fingerprint {fp} does not match index fingerprint {}",
            index.fingerprint
        )));
    }
    let codes = encode_volume(&checkpoint.model, volume)?;
    query_blocks(index, &volume_blocks(&codes, index.params)?, k)
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntryMeta {
    id: String,
    /// One-based.
    label: Option<u32>,
    offset: u64,
    count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexMeta {
    block_params: BlockParams,
    fingerprint: String,
    n_section: usize,
    latent_dim: usize,
    blocks_per_orientation: usize,
    vector_len: usize,
    #[serde(default)]
    run_config: serde_json::Value,
    entries: Vec<IndexEntryMeta>,
}

impl GalleryIndex {
    /// `ICBX` bytes: magic, `u32` version, `u32` metadata length, JSON
    /// metadata with byte offsets into the payload, raw `f32` block codes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let len = self.entry_len();
        let meta = IndexMeta {
            block_params: self.params,
            fingerprint: self.fingerprint.clone(),
            n_section: self.n_section,
            latent_dim: self.latent_dim,
            blocks_per_orientation: self.blocks_per_orientation(),
            vector_len: self.vector_len(),
            run_config: self.run_config.clone(),
            entries: self
                .entries
                .iter()
                .enumerate()
                .map(|(i, e)| IndexEntryMeta {
                    id: e.id.clone(),
                    label: e.label.map(|l| l as u32 + 1),
                    offset: (i * len * 4) as u64,
                    count: len as u64,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * len * self.entries.len());
        out.extend_from_slice(ICBX_MAGIC);
        out.extend_from_slice(&ICBX_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.entries {
            if e.blocks.len() != len {
                return Err(Error::Index(format!("entry {} has a malformed payload", e.id)));
            }
            for v in &e.blocks {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != ICBX_MAGIC {
            return Err(Error::format(0, "expected magic \"ICBX\""));
        }
        let version = read_u32(bytes, 4)?;
        if version != ICBX_VERSION {
            return Err(Error::format(4, format!("unsupported index version {version}")));
        }
        let jlen = read_u32(bytes, 8)? as usize;
        let start = 12 + jlen;
        if bytes.len() < start {
            return Err(Error::format(bytes.len() as u64, "metadata is truncated"));
        }
        let meta: IndexMeta = serde_json::from_slice(&bytes[12..start])
            .map_err(|e| Error::format(12, format!("bad metadata JSON: {e}")))?;
        let payload = &bytes[start..];
        let mut index = GalleryIndex {
            params: meta.block_params,
            fingerprint: meta.fingerprint,
            n_section: meta.n_section,
            latent_dim: meta.latent_dim,
            run_config: meta.run_config,
            entries: Vec::with_capacity(meta.entries.len()),
        };
        let expected_j = index.params.num_blocks(index.n_section)?;
        if expected_j != meta.blocks_per_orientation || index.vector_len() != meta.vector_len {
            return Err(Error::format(12, "block geometry in metadata is inconsistent"));
        }
        let len = index.entry_len();
        for e in meta.entries {
            let (off, count) = (e.offset as usize, e.count as usize);
            if count != len {
                return Err(Error::format(12, format!("entry {} declares {count} values, expected {len}", e.id)));
            }
            let span = payload.get(off..off + 4 * count).ok_or_else(|| {
                Error::format((start + off) as u64, format!("entry {} runs past the end of the file", e.id))
            })?;
            index.entries.push(GalleryEntry {
                id: e.id,
                label: e.label.map(|l| l.saturating_sub(1) as usize),
                blocks: f32_from_le(span),
            });
        }
        Ok(index)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(xi: f64, r: usize) -> DetectionConfig {
        DetectionConfig::uniform(2, xi, r)
    }

    #[test]
    fn single_block_covers_everything() {
        let p = BlockParams { n: 8, m: 4 };
        assert_eq!(p.num_blocks(8).unwrap(), 1);
        assert_eq!(p.slices(0), 0..8);
    }

    #[test]
    fn sixty_four_slices() {
        let p = BlockParams { n: 8, m: 4 };
        assert_eq!(p.num_blocks(64).unwrap(), 15);
        // second block covers one-based slices 5..=12
        assert_eq!(p.slices(1), 4..12);
    }

    #[test]
    fn oversize_block_is_parameter_error() {
        assert!(matches!(
            BlockParams { n: 9, m: 1 }.num_blocks(8),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn majority_vote_detects() {
        let preds = [1, 1, 1, 1, 1, 1, 0, 0, 0, 0];
        let s = detect_section(&preds, &cfg(0.5, 1)).unwrap();
        assert_eq!(s.detected, vec![1]);
    }

    #[test]
    fn all_normal_detects_nothing() {
        let s = detect_section(&[0; 7], &cfg(0.5, 1)).unwrap();
        assert!(s.detected.is_empty());
    }

    #[test]
    fn xi_one_never_detects() {
        let s = detect_section(&[1; 5], &cfg(1.0, 1)).unwrap();
        assert!(s.detected.is_empty());
    }

    #[test]
    fn block_on_second_prototype() {
        let u = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 2.0]];
        let s = classify_block(&[0.0, 0.0, 0.0, 1.0], &u, 1.0).unwrap();
        assert_eq!(s.similarities, vec![0.0, 1.0]);
        assert_eq!(s.predicted, 1);
    }

    #[test]
    fn r_rule_examples() {
        let hit = detect_section(&[1, 1, 1], &cfg(0.5, 1)).unwrap();
        let miss = detect_section(&[0, 0, 0], &cfg(0.5, 1)).unwrap();
        let one = [hit.clone(), miss.clone(), miss.clone()];
        assert_eq!(detect_volume(&one, &cfg(0.5, 1)).unwrap(), 1);
        assert_eq!(detect_volume(&one, &cfg(0.5, 2)).unwrap(), 0);
        let all = [hit.clone(), hit.clone(), hit];
        assert_eq!(detect_volume(&all, &cfg(0.5, 3)).unwrap(), 1);
        assert!(detect_volume(&one[..2], &cfg(0.5, 1)).is_err());
    }

    #[test]
    fn multi_class_tie_goes_to_largest_total_fraction() {
        let c = DetectionConfig::uniform(3, 0.3, 1);
        let a = detect_section(&[1, 1, 2, 2, 2], &c).unwrap();
        let b = detect_section(&[1, 1, 1, 1, 2], &c).unwrap();
        let n = detect_section(&[0, 0, 0, 0, 0], &c).unwrap();
        // class 1: 0.4 + 0.8, class 2: 0.6 + 0.2 (not detected in b)
        assert_eq!(detect_volume(&[a, b, n], &c).unwrap(), 1);
    }

    #[test]
    fn bad_index_magic() {
        assert!(matches!(
            GalleryIndex::from_bytes(b"ICBS...."),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
