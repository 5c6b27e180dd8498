//! Cosine-prototype classifier.
//!
//! One trainable prototype per (orientation, slice position, class). A slice
//! code `z` is compared with every class prototype at its own position by
//! cosine similarity, the similarities go through a softmax, and the class
//! with the largest similarity wins (lowest class index on ties).
//!
//! Indices in this API are zero-based: classes `0..K`, slice positions
//! `0..n_section`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::nn::kernels;
use crate::{Error, Result};

/// Smallest vector norm accepted before normalization.
pub const NORM_FLOOR: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Axial,
    Coronal,
    Sagittal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Axial, Orientation::Coronal, Orientation::Sagittal];

    /// Volume axis held fixed by slices of this orientation.
    pub fn axis(self) -> usize {
        match self {
            Orientation::Axial => 0,
            Orientation::Coronal => 1,
            Orientation::Sagittal => 2,
        }
    }

    pub fn from_axis(axis: usize) -> Option<Self> {
        Self::ALL.get(axis).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Orientation::Axial => "axial",
            Orientation::Coronal => "coronal",
            Orientation::Sagittal => "sagittal",
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-class similarities, probabilities and the predicted class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub similarities: Vec<f32>,
    pub probabilities: Vec<f32>,
    pub predicted: usize,
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = kernels::norm(a);
    let nb = kernels::norm(b);
    if !(na >= NORM_FLOOR) || !(nb >= NORM_FLOOR) {
        return Err(Error::Degenerate(format!(
            "vector norms {na:e} and {nb:e} (floor {NORM_FLOOR:e})"
        )));
    }
    Ok((kernels::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Softmax of `logits / temperature`, shifted by the max for stability.
pub fn softmax(logits: &[f32], temperature: f32) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&s| (((s - max) / temperature) as f64).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / total) as f32).collect()
}

/// Index of the largest value, lowest index among ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Scores `z` against one reference vector per class.
pub fn score_against<'a, I>(z: &[f32], prototypes: I, temperature: f32) -> Result<ClassScores>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let similarities = prototypes
        .into_iter()
        .map(|p| cosine_similarity(z, p))
        .collect::<Result<Vec<_>>>()?;
    if similarities.len() < 2 {
        return Err(Error::Config("at least two classes are required".into()));
    }
    let probabilities = softmax(&similarities, temperature);
    let predicted = argmax(&similarities);
    Ok(ClassScores {
        similarities,
        probabilities,
        predicted,
    })
}

/// `-sum_k t_k ln(max(p_k, 1e-12))` for a one-hot `t`.
pub fn cross_entropy(p: &[f32], t: &[f32]) -> Result<f32> {
    if p.len() != t.len() {
        return Err(Error::Dimension(format!(
            "probabilities have {} classes, target {}",
            p.len(),
            t.len()
        )));
    }
    let ones = t.iter().filter(|&&v| v == 1.0).count();
    let zeros = t.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != t.len() {
        return Err(Error::Input(format!("target {t:?} is not one-hot")));
    }
    let k = t.iter().position(|&v| v == 1.0).unwrap();
    Ok(cross_entropy_label(p, k))
}

pub fn cross_entropy_label(p: &[f32], class: usize) -> f32 {
    -(p[class].max(1e-12) as f64).ln() as f32
}

pub fn one_hot(class: usize, num_classes: usize) -> Vec<f32> {
    let mut t = vec![0.0; num_classes];
    t[class] = 1.0;
    t
}

/// Cross-entropy of one slice with its gradients.
#[derive(Debug, Clone)]
pub struct ProtoGradients {
    pub loss: f32,
    pub scores: ClassScores,
    /// dC/dz
    pub grad_z: Vec<f32>,
    /// dC/dP_k for every class at the slice's position, `[K][L]`.
    pub grad_prototypes: Vec<Vec<f32>>,
}

/// Trainable prototypes laid out as `[orientation][slice][class][latent]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    n_section: usize,
    num_classes: usize,
    latent_dim: usize,
    temperature: f32,
    class_names: Vec<String>,
    protos: Vec<f32>,
}

impl PrototypeBank {
    pub fn new(
        n_section: usize,
        latent_dim: usize,
        class_names: Vec<String>,
        protos: Vec<f32>,
    ) -> Result<Self> {
        let num_classes = class_names.len();
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "prototype bank needs at least two classes, got {num_classes}"
            )));
        }
        if n_section == 0 || latent_dim == 0 {
            return Err(Error::Config("prototype bank dims must be positive".into()));
        }
        let expected = 3 * n_section * num_classes * latent_dim;
        if protos.len() != expected {
            return Err(Error::Dimension(format!(
                "prototype bank needs {expected} values, got {}",
                protos.len()
            )));
        }
        let mut bank = Self {
            n_section,
            num_classes,
            latent_dim,
            temperature: 1.0,
            class_names,
            protos,
        };
        crate::tensor::ensure_finite(&bank.protos, "prototype bank")?;
        bank.refloor();
        Ok(bank)
    }

    /// Prototypes set to the arithmetic mean of the supplied codes per cell.
    /// Every cell needs at least one code; missing cells are listed in the error.
    pub fn from_class_means<'a, I>(
        n_section: usize,
        latent_dim: usize,
        class_names: Vec<String>,
        codes: I,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = (Orientation, usize, usize, &'a [f32])>,
    {
        let k = class_names.len();
        let cells = 3 * n_section * k;
        let mut sums = vec![0.0f64; cells * latent_dim];
        let mut counts = vec![0usize; cells];
        for (o, slice, class, mu) in codes {
            if slice >= n_section || class >= k || mu.len() != latent_dim {
                return Err(Error::Init(format!(
                    "code for {o} slice {slice} class {class} (len {}) is outside the bank",
                    mu.len()
                )));
            }
            let cell = (o.axis() * n_section + slice) * k + class;
            counts[cell] += 1;
            for (s, &v) in sums[cell * latent_dim..(cell + 1) * latent_dim].iter_mut().zip(mu) {
                *s += v as f64;
            }
        }
        let missing: Vec<String> = (0..cells)
            .filter(|&c| counts[c] == 0)
            .map(|c| {
                let class = c % k;
                let slice = (c / k) % n_section;
                let o = Orientation::ALL[c / (k * n_section)];
                format!("({o}, slice {}, class {})", slice + 1, class + 1)
            })
            .collect();
        if !missing.is_empty() {
            let shown = missing.iter().take(12).cloned().collect::<Vec<_>>().join(", ");
            return Err(Error::Init(format!(
                "{} empty cells: {shown}{}",
                missing.len(),
                if missing.len() > 12 { ", ..." } else { "" }
            )));
        }
        let protos = sums
            .chunks(latent_dim)
            .zip(&counts)
            .flat_map(|(s, &n)| s.iter().map(move |v| (v / n as f64) as f32))
            .collect();
        Self::new(n_section, latent_dim, class_names, protos)
    }

    pub fn n_section(&self) -> usize {
        self.n_section
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn temperature(&self) -> f32 {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: f32) -> Result<()> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        self.temperature = temperature;
        Ok(())
    }

    pub fn values(&self) -> &[f32] {
        &self.protos
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.protos
    }

    fn check_position(&self, slice: usize) -> Result<()> {
        if slice >= self.n_section {
            return Err(Error::Config(format!(
                "slice position {} is outside the bank's {} sections",
                slice + 1,
                self.n_section
            )));
        }
        Ok(())
    }

    /// Offset of prototype (o, slice, class) in [`PrototypeBank::values`].
    pub fn offset(&self, orientation: Orientation, slice: usize, class: usize) -> usize {
        ((orientation.axis() * self.n_section + slice) * self.num_classes + class) * self.latent_dim
    }

    pub fn prototype(&self, orientation: Orientation, slice: usize, class: usize) -> &[f32] {
        let off = self.offset(orientation, slice, class);
        &self.protos[off..off + self.latent_dim]
    }

    pub fn score_slice(&self, z: &[f32], orientation: Orientation, slice: usize) -> Result<ClassScores> {
        self.check_position(slice)?;
        if z.len() != self.latent_dim {
            return Err(Error::Dimension(format!(
                "code has {} dims, bank expects {}",
                z.len(),
                self.latent_dim
            )));
        }
        score_against(
            z,
            (0..self.num_classes).map(|k| self.prototype(orientation, slice, k)),
            self.temperature,
        )
    }

    /// Cross-entropy of classifying `z` as `class`, with exact gradients
    /// through the softmax, the cosine and both normalizations.
    pub fn prototype_gradients(
        &self,
        z: &[f32],
        orientation: Orientation,
        slice: usize,
        class: usize,
    ) -> Result<ProtoGradients> {
        if class >= self.num_classes {
            return Err(Error::Input(format!(
                "class {} outside 1..={}",
                class + 1,
                self.num_classes
            )));
        }
        let scores = self.score_slice(z, orientation, slice)?;
        let loss = cross_entropy_label(&scores.probabilities, class);
        let nz = kernels::norm(z);
        let z_hat: Vec<f32> = z.iter().map(|v| v / nz).collect();

        let mut grad_zhat = vec![0.0f32; self.latent_dim];
        let mut grad_prototypes = Vec::with_capacity(self.num_classes);
        for k in 0..self.num_classes {
            let t = if k == class { 1.0 } else { 0.0 };
            let g = (scores.probabilities[k] - t) / self.temperature;
            let p = self.prototype(orientation, slice, k);
            let np = kernels::norm(p);
            let s = scores.similarities[k];
            kernels::axpy(g / np, p, &mut grad_zhat);
            // g * (z_hat - s * p_hat) / |p|
            grad_prototypes.push(
                z_hat
                    .iter()
                    .zip(p)
                    .map(|(&zh, &pv)| g * (zh - s * pv / np) / np)
                    .collect(),
            );
        }
        let radial = kernels::dot(&z_hat, &grad_zhat);
        let grad_z = grad_zhat
            .iter()
            .zip(&z_hat)
            .map(|(&g, &zh)| (g - radial * zh) / nz)
            .collect();
        Ok(ProtoGradients {
            loss,
            scores,
            grad_z,
            grad_prototypes,
        })
    }

    /// Restores the norm floor on every prototype after an update.
    pub fn refloor(&mut self) {
        for p in self.protos.chunks_mut(self.latent_dim) {
            let n = kernels::norm(p);
            if n < NORM_FLOOR {
                if n == 0.0 {
                    p[0] = NORM_FLOOR;
                } else {
                    let f = NORM_FLOOR / n;
                    p.iter_mut().for_each(|v| *v *= f);
                }
            }
        }
    }
}
