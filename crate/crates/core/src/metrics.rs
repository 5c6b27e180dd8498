//! Confusion matrices, precision/recall/F1 and the evaluation harness.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::LabeledVolume;
use crate::retrieval::{detect_codes, encode_volume, query_blocks, volume_blocks, BlockParams, DetectionConfig, GalleryIndex};
use crate::{exec, Error, Result};

/// Rows are true classes, columns predictions; both zero-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn accumulate(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let k = self.num_classes();
        if truth >= k || predicted >= k {
            return Err(Error::Input(format!(
                "labels ({}, {}) outside 1..={k}",
                truth + 1,
                predicted + 1
            )));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::Dimension("confusion matrices differ in size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Undefined ratios (0/0) count as 0.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Input("confusion matrix is empty".into()));
    }
    let k = cm.num_classes();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let predicted: u64 = (0..k).map(|r| cm.counts[r][c]).sum();
            let actual: u64 = cm.counts[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics { precision, recall, f1 }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    Ok(MetricsReport {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        accuracy: ratio(cm.trace(), total),
        per_class,
        confusion: cm.clone(),
    })
}

/// Per-volume outcome, labels zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeOutcome {
    pub id: String,
    pub truth: usize,
    /// Axial, coronal, sagittal.
    pub orientation_labels: [usize; 3],
    pub fractions: [Vec<f64>; 3],
    pub ensemble: usize,
    pub retrieved: Option<String>,
    pub retrieval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub axial: MetricsReport,
    pub coronal: MetricsReport,
    pub sagittal: MetricsReport,
    pub ensemble: MetricsReport,
    pub retrieval: MetricsReport,
    pub warnings: Vec<String>,
    pub fingerprint: String,
    pub block_params: BlockParams,
    pub detection: DetectionConfig,
    pub volumes: Vec<VolumeOutcome>,
    #[serde(default)]
    pub run_config: serde_json::Value,
}

impl EvalReport {
    /// Tab-separated summary, one row per channel.
    pub fn summary_tsv(&self) -> String {
        let mut out = String::from("channel\tprecision\trecall\tf1\taccuracy\n");
        for (name, r) in [
            ("coronal", &self.coronal),
            ("sagittal", &self.sagittal),
            ("axial", &self.axial),
            ("ensemble", &self.ensemble),
            ("retrieval", &self.retrieval),
        ] {
            out.push_str(&format!(
                "{name}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
                r.macro_precision, r.macro_recall, r.macro_f1, r.accuracy
            ));
        }
        out
    }
}

/// Detection per orientation and ensemble, plus top-1 retrieval against the
/// gallery, over a labeled test set.
pub fn evaluate_run(
    checkpoint: &Checkpoint,
    index: &GalleryIndex,
    test: &[LabeledVolume],
    detection: &DetectionConfig,
) -> Result<EvalReport> {
    let fp = checkpoint.fingerprint();
    if fp != index.fingerprint {
        return Err(Error::Index(format!(
            "checkpoint fingerprint {fp} does not match index fingerprint {}",
            index.fingerprint
        )));
    }
    if test.is_empty() {
        return Err(Error::Input("test set is empty".into()));
    }
    let k = checkpoint.bank.num_classes();
    detection.validate(k)?;
    let params = index.params;
    let mut warnings = Vec::new();
    let gallery: BTreeSet<&str> = index.entries.iter().map(|e| e.id.as_str()).collect();
    let overlap = test.iter().filter(|v| gallery.contains(v.id.as_str())).count();
    if overlap > 0 {
        let w = format!("{overlap} test volume(s) also appear in the gallery; retrieval scores include self-matches");
        log::warn!("{w}");
        warnings.push(w);
    }
    if index.entries.iter().any(|e| e.label.is_none()) {
        warnings.push("gallery entries without labels count as misses".into());
    }

    let mut volumes = test
        .iter()
        .map(|v| {
            let codes = encode_volume(&checkpoint.model, &v.volume)?;
            let det = detect_codes(&checkpoint.bank, &codes, params, detection)?;
            let hits = query_blocks(index, &volume_blocks(&codes, params)?, 1)?;
            let top = hits.hits.first();
            let retrieval = top.and_then(|h| h.label).unwrap_or(detection.normal_class);
            Ok(VolumeOutcome {
                id: v.id.clone(),
                truth: v.class,
                orientation_labels: [0, 1, 2].map(|o| det.orientations[o].label),
                fractions: [0, 1, 2].map(|o| det.orientations[o].section.fractions.clone()),
                ensemble: det.label,
                retrieved: top.map(|h| h.id.clone()),
                retrieval,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    volumes.sort_by(|a, b| a.id.cmp(&b.id));

    let matrix = |pick: &dyn Fn(&VolumeOutcome) -> usize| -> Result<MetricsReport> {
        let mut cm = ConfusionMatrix::new(k);
        for v in &volumes {
            cm.accumulate(v.truth, pick(v))?;
        }
        compute_metrics(&cm)
    };
    Ok(EvalReport {
        class_names: checkpoint.bank.class_names().to_vec(),
        axial: matrix(&|v| v.orientation_labels[0])?,
        coronal: matrix(&|v| v.orientation_labels[1])?,
        sagittal: matrix(&|v| v.orientation_labels[2])?,
        ensemble: matrix(&|v| v.ensemble)?,
        retrieval: matrix(&|v| v.retrieval)?,
        warnings,
        fingerprint: fp,
        block_params: params,
        detection: detection.clone(),
        volumes,
        run_config: serde_json::Value::Null,
    })
}

/// Confusion matrix built in parallel chunks and merged in order.
pub fn confusion_from_pairs(num_classes: usize, pairs: &[(usize, usize)]) -> Result<ConfusionMatrix> {
    const CHUNK: usize = 1024;
    let parts = exec::try_map_indexed(pairs.len().div_ceil(CHUNK), |c| {
        let mut cm = ConfusionMatrix::new(num_classes);
        for &(t, p) in &pairs[c * CHUNK..((c + 1) * CHUNK).min(pairs.len())] {
            cm.accumulate(t, p)?;
        }
        Ok::<_, Error>(cm)
    })?;
    let mut cm = ConfusionMatrix::new(num_classes);
    for p in &parts {
        cm.merge(p)?;
    }
    Ok(cm)
}
