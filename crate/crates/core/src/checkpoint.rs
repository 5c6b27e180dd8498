//! `ICBS` checkpoint: the trained VAE plus its prototype bank.
//!
//! Layout (integers little-endian): magic `ICBS`, `u32` version, `u32` JSON
//! metadata length, the metadata, then every tensor listed in the metadata's
//! `tensors` table as raw `f32` values in that order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::DenseLayer;
use crate::protohead::PrototypeBank;
use crate::tensor::Tensor;
use crate::train::EpochLoss;
use crate::vae::{VaeDims, VaeModel, LAYER_NAMES};
use crate::volume::{f32_from_le, read_u32};
use crate::{Error, Result};

pub const ICBS_MAGIC: &[u8; 4] = b"ICBS";
pub const ICBS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BankMeta {
    orientations: usize,
    n_section: usize,
    num_classes: usize,
    latent_dim: usize,
    temperature: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    dims: VaeDims,
    beta: f32,
    gamma: f32,
    seed: u64,
    class_names: Vec<String>,
    bank: BankMeta,
    tensors: Vec<TensorEntry>,
    fingerprint: String,
    #[serde(default)]
    loss_curve: Vec<EpochLoss>,
    #[serde(default)]
    run_config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: VaeModel,
    pub bank: PrototypeBank,
    pub seed: u64,
    pub loss_curve: Vec<EpochLoss>,
    pub run_config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: VaeModel, bank: PrototypeBank, seed: u64) -> Result<Self> {
        let d = model.dims();
        if bank.n_section() != d.side || bank.latent_dim() != d.latent {
            return Err(Error::Config(format!(
                "bank ({} sections, latent {}) does not fit model {d:?}",
                bank.n_section(),
                bank.latent_dim()
            )));
        }
        Ok(Self {
            model,
            bank,
            seed,
            loss_curve: Vec::new(),
            run_config: serde_json::Value::Null,
        })
    }

    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out = Vec::new();
        for (layer, name) in self.model.layers().iter().zip(LAYER_NAMES) {
            out.push((
                format!("{name}.weight"),
                layer.weights().shape().to_vec(),
                layer.weights().data(),
            ));
            out.push((format!("{name}.bias"), layer.bias().shape().to_vec(), layer.bias().data()));
        }
        let b = &self.bank;
        out.push((
            "prototypes".into(),
            vec![3, b.n_section(), b.num_classes(), b.latent_dim()],
            b.values(),
        ));
        out
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, _, data) in self.tensors() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// 64-bit hash (leading bytes of SHA-256) of the parameter payload, as hex.
    pub fn fingerprint(&self) -> String {
        fingerprint_bytes(&self.payload())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = self.payload();
        let b = &self.bank;
        let meta = CheckpointMeta {
            dims: self.model.dims(),
            beta: self.model.beta,
            gamma: self.model.gamma,
            seed: self.seed,
            class_names: b.class_names().to_vec(),
            bank: BankMeta {
                orientations: 3,
                n_section: b.n_section(),
                num_classes: b.num_classes(),
                latent_dim: b.latent_dim(),
                temperature: b.temperature(),
            },
            tensors: self
                .tensors()
                .into_iter()
                .map(|(name, shape, _)| TensorEntry { name, shape })
                .collect(),
            fingerprint: fingerprint_bytes(&payload),
            loss_curve: self.loss_curve.clone(),
            run_config: self.run_config.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(ICBS_MAGIC);
        out.extend_from_slice(&ICBS_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != ICBS_MAGIC {
            return Err(Error::format(0, "expected magic \"ICBS\""));
        }
        let version = read_u32(bytes, 4)?;
        if version != ICBS_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let jlen = read_u32(bytes, 8)? as usize;
        let start = 12 + jlen;
        if bytes.len() < start {
            return Err(Error::format(bytes.len() as u64, "metadata is truncated"));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[12..start])
            .map_err(|e| Error::format(12, format!("bad metadata JSON: {e}")))?;

        let probe = VaeModel::with_head_init(meta.dims, meta.beta, meta.gamma, 0, crate::nn::Init::Zeros)?;
        let mut expected: Vec<TensorEntry> = Vec::new();
        for (layer, name) in probe.layers().iter().zip(LAYER_NAMES) {
            expected.push(TensorEntry {
                name: format!("{name}.weight"),
                shape: layer.weights().shape().to_vec(),
            });
            expected.push(TensorEntry {
                name: format!("{name}.bias"),
                shape: layer.bias().shape().to_vec(),
            });
        }
        expected.push(TensorEntry {
            name: "prototypes".into(),
            shape: vec![3, meta.bank.n_section, meta.bank.num_classes, meta.bank.latent_dim],
        });
        if meta.tensors != expected {
            return Err(Error::format(12, "tensor table does not match the declared architecture"));
        }
        let total: usize = expected.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let payload = &bytes[start..];
        if payload.len() != 4 * total {
            return Err(Error::format(
                (start + payload.len().min(4 * total)) as u64,
                format!("parameter payload should be {} bytes, found {}", 4 * total, payload.len()),
            ));
        }
        let values = f32_from_le(payload);
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format((start + 4 * i) as u64, "non-finite parameter"));
        }
        let mut cursor = 0usize;
        let mut take = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let t = values[cursor..cursor + n].to_vec();
            cursor += n;
            t
        };
        let mut layers = Vec::with_capacity(5);
        for (i, layer) in probe.layers().iter().enumerate() {
            let w = Tensor::new(expected[2 * i].shape.clone(), take(&expected[2 * i].shape))?;
            let b = Tensor::new(expected[2 * i + 1].shape.clone(), take(&expected[2 * i + 1].shape))?;
            layers.push(DenseLayer::from_parts(w, b, layer.activation())?);
        }
        let layers: [DenseLayer; 5] = layers.try_into().expect("five layers");
        let model = VaeModel::from_layers(meta.dims, meta.beta, meta.gamma, layers)?;
        let protos = take(&expected[10].shape);
        let mut bank = PrototypeBank::new(
            meta.bank.n_section,
            meta.bank.latent_dim,
            meta.class_names.clone(),
            protos,
        )?;
        bank.set_temperature(meta.bank.temperature)?;
        let ck = Checkpoint {
            model,
            bank,
            seed: meta.seed,
            loss_curve: meta.loss_curve,
            run_config: meta.run_config,
        };
        let fp = ck.fingerprint();
        if fp != meta.fingerprint {
            return Err(Error::format(
                start as u64,
                format!("payload fingerprint {fp} does not match recorded {}", meta.fingerprint),
            ));
        }
        Ok(ck)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) fn fingerprint_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    format!("{:016x}", u64::from_be_bytes(head))
}
