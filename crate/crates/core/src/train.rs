//! Class-mean prototype initialization and the joint training loop.
//!
//! A training step takes a fixed-size batch of slice indices, splits it into
//! chunks of [`CHUNK`] samples, accumulates each chunk's gradients
//! independently (possibly in parallel) and then sums the chunks in order.
//! The noise for every sample is drawn from its own ChaCha stream keyed by
//! (epoch, position in the epoch), so results are bit-identical for any
//! worker count.

use serde::{Deserialize, Serialize};

use crate::dataset::SliceDataset;
use crate::exec;
use crate::nn::{AdamConfig, AdamState};
use crate::protohead::PrototypeBank;
use crate::rng::Rng;
use crate::vae::{accumulate_gradients, LossBreakdown, ModelGrads, VaeModel};
use crate::{Error, Result};

/// Samples per gradient-accumulation chunk.
pub const CHUNK: usize = 8;

const NOISE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub beta: f32,
    pub gamma: f32,
    pub seed: u64,
    /// Caps the number of batches per epoch (all batches when `None`).
    #[serde(default)]
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 64,
            lr: 1e-3,
            beta: 1e-3,
            gamma: 1.0,
            seed: 0,
            max_batches_per_epoch: None,
        }
    }
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub samples: usize,
    #[serde(flatten)]
    pub mean: LossBreakdown,
}

/// Encoder means of every slice in `dataset`, `[sample][latent]`.
pub fn encode_dataset(model: &VaeModel, dataset: &SliceDataset) -> Result<Vec<Vec<f32>>> {
    let pixels = dataset.side() * dataset.side();
    exec::try_map_indexed(dataset.len(), |idx| {
        let mut buf = vec![0.0; pixels];
        let s = dataset.fill(idx, &mut buf);
        Ok(model.encode(s.pixels)?.mu)
    })
}

/// Prototypes set to the mean encoder `mu` of each (orientation, slice, class) cell.
pub fn init_prototypes(model: &VaeModel, dataset: &SliceDataset) -> Result<PrototypeBank> {
    if dataset.side() != model.dims().side && !dataset.is_empty() {
        return Err(Error::Dimension(format!(
            "dataset side {} differs from model side {}",
            dataset.side(),
            model.dims().side
        )));
    }
    let mus = encode_dataset(model, dataset)?;
    let codes = mus.iter().enumerate().map(|(idx, mu)| {
        let (v, o, slice) = dataset.locate(idx);
        (o, slice, dataset.volumes()[v].class, mu.as_slice())
    });
    PrototypeBank::from_class_means(
        model.dims().side,
        model.dims().latent,
        dataset.class_names().to_vec(),
        codes,
    )
}

fn check_compatible(model: &VaeModel, bank: &PrototypeBank, dataset: &SliceDataset) -> Result<()> {
    let d = model.dims();
    if bank.latent_dim() != d.latent || bank.n_section() != d.side {
        return Err(Error::Config(format!(
            "bank ({} sections, latent {}) does not match model (side {}, latent {})",
            bank.n_section(),
            bank.latent_dim(),
            d.side,
            d.latent
        )));
    }
    if dataset.side() != d.side {
        return Err(Error::Dimension(format!(
            "dataset side {} differs from model side {}",
            dataset.side(),
            d.side
        )));
    }
    if dataset.class_names().len() != bank.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, bank {}",
            dataset.class_names().len(),
            bank.num_classes()
        )));
    }
    Ok(())
}

/// Trains encoder, decoder and prototypes in place and returns the per-epoch
/// mean losses.
pub fn train(
    model: &mut VaeModel,
    bank: &mut PrototypeBank,
    dataset: &SliceDataset,
    config: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    if dataset.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    if config.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    check_compatible(model, bank, dataset)?;
    model.beta = config.beta;
    model.gamma = config.gamma;
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut layer_states: Vec<(AdamState, AdamState)> = model
        .layers()
        .iter()
        .map(|l| {
            (
                AdamState::new(adam, l.weights().len()),
                AdamState::new(adam, l.bias().len()),
            )
        })
        .collect();
    let mut proto_state = AdamState::new(adam, bank.values().len());

    let pixels = dataset.side() * dataset.side();
    let latent = model.dims().latent;
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        Rng::with_stream(config.seed, epoch as u64).shuffle(&mut order);
        let batches = order.chunks(config.batch).enumerate();
        let limit = config.max_batches_per_epoch.unwrap_or(usize::MAX);
        let mut epoch_sum = LossBreakdown::default();
        let mut seen = 0usize;
        for (b, batch) in batches.take(limit) {
            let base = b * config.batch;
            let chunks: Vec<(usize, &[usize])> = batch
                .chunks(CHUNK)
                .enumerate()
                .map(|(c, ch)| (base + c * CHUNK, ch))
                .collect();
            let (m, pb): (&VaeModel, &PrototypeBank) = (model, bank);
            let parts = exec::try_map_indexed(chunks.len(), |c| {
                let (start, idxs) = chunks[c];
                let mut grads = ModelGrads::zeros(m, pb);
                let mut sum = LossBreakdown::default();
                let mut buf = vec![0.0; pixels];
                let mut eps = vec![0.0; latent];
                for (off, &idx) in idxs.iter().enumerate() {
                    let pos = (start + off) as u64;
                    Rng::with_stream(config.seed ^ NOISE_SALT, ((epoch as u64) << 40) | pos)
                        .fill_standard_normal(&mut eps);
                    let sample = dataset.fill(idx, &mut buf);
                    let l = accumulate_gradients(m, pb, &sample, &eps, &mut grads).map_err(|e| {
                        Error::Numeric(format!("epoch {} batch {} sample {idx}: {e}", epoch + 1, b + 1))
                    })?;
                    sum.add(&l);
                }
                Ok::<_, Error>((grads, sum))
            })?;
            let mut parts = parts.into_iter();
            let (mut grads, mut batch_sum) = parts.next().expect("non-empty batch");
            for (g, s) in parts {
                grads.add_assign(&g);
                batch_sum.add(&s);
            }
            if !batch_sum.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite at epoch {} batch {}",
                    epoch + 1,
                    b + 1
                )));
            }
            grads.scale(1.0 / batch.len() as f32);
            for ((layer, g), (sw, sb)) in model
                .layers_mut()
                .iter_mut()
                .zip(&grads.layers)
                .zip(layer_states.iter_mut())
            {
                sw.update(layer.weights_mut(), &g.weights)?;
                sb.update(layer.bias_mut(), &g.bias)?;
            }
            proto_state.update(bank.values_mut(), &grads.prototypes)?;
            bank.refloor();
            epoch_sum.add(&batch_sum);
            seen += batch.len();
        }
        let mean = if seen == 0 {
            LossBreakdown::default()
        } else {
            epoch_sum.scaled(1.0 / seen as f64)
        };
        log::info!(
            "epoch {:>3}: total {:.5}  D {:.5}  KL {:.5}  C {:.5}",
            epoch + 1,
            mean.total,
            mean.reconstruction,
            mean.kl,
            mean.cross_entropy
        );
        curve.push(EpochLoss {
            epoch: epoch + 1,
            samples: seen,
            mean,
        });
    }
    Ok(curve)
}
