//! Every tunable of a run in one serializable record.

use serde::{Deserialize, Serialize};

use crate::probmap::{Aggregation, DEFAULT_THRESHOLD};
use crate::retrieval::{BlockParams, DetectionConfig};
use crate::train::TrainConfig;
use crate::vae::VaeDims;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub side: usize,
    pub latent: usize,
    pub hidden: usize,
    pub beta: f32,
    pub gamma: f32,
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub max_batches_per_epoch: Option<usize>,
    pub temperature: f32,
    pub class_names: Vec<String>,
    pub block_n: usize,
    pub block_m: usize,
    /// Per-class vote thresholds; a single value applies to every class.
    pub xi: Vec<f64>,
    pub r: usize,
    pub k: usize,
    pub threshold: f32,
    pub aggregation: Aggregation,
    pub manifest: Option<String>,
    pub checkpoint: Option<String>,
    pub index: Option<String>,
    pub output: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = VaeDims::default();
        let t = TrainConfig::default();
        let b = BlockParams::default();
        Self {
            side: d.side,
            latent: d.latent,
            hidden: d.hidden,
            beta: t.beta,
            gamma: t.gamma,
            lr: t.lr,
            epochs: t.epochs,
            batch: t.batch,
            seed: t.seed,
            max_batches_per_epoch: None,
            temperature: 1.0,
            class_names: vec!["CN".into(), "AD".into()],
            block_n: b.n,
            block_m: b.m,
            xi: vec![0.5],
            r: 1,
            k: 5,
            threshold: DEFAULT_THRESHOLD,
            aggregation: Aggregation::Mean,
            manifest: None,
            checkpoint: None,
            index: None,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.side < 2 || self.latent == 0 || self.hidden == 0 {
            return bad(format!(
                "side {} / latent {} / hidden {} must be positive (side ≥ 2)",
                self.side, self.latent, self.hidden
            ));
        }
        if self.num_classes() < 2 {
            return bad("at least two classes are required".into());
        }
        if !(self.beta >= 0.0) || !(self.gamma >= 0.0) || !self.beta.is_finite() || !self.gamma.is_finite() {
            return bad(format!("beta {} and gamma {} must be finite and ≥ 0", self.beta, self.gamma));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.batch == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if self.xi.len() != 1 && self.xi.len() != self.num_classes() {
            return bad(format!(
                "{} xi values for {} classes",
                self.xi.len(),
                self.num_classes()
            ));
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        self.block_params()
            .num_blocks(self.side)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.detection().validate(self.num_classes())
    }

    pub fn dims(&self) -> VaeDims {
        VaeDims {
            side: self.side,
            hidden: self.hidden,
            latent: self.latent,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            beta: self.beta,
            gamma: self.gamma,
            seed: self.seed,
            max_batches_per_epoch: self.max_batches_per_epoch,
        }
    }

    pub fn block_params(&self) -> BlockParams {
        BlockParams {
            n: self.block_n,
            m: self.block_m,
        }
    }

    pub fn detection(&self) -> DetectionConfig {
        let xi = if self.xi.len() == 1 {
            vec![self.xi[0]; self.num_classes()]
        } else {
            self.xi.clone()
        };
        DetectionConfig {
            xi,
            r: self.r,
            normal_class: 0,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}
