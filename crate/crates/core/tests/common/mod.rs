//! Independent f64 reference implementations shared by integration tests.
#![allow(dead_code)]

use icbir_core::dataset::LabeledVolume;
use icbir_core::protohead::{Orientation, PrototypeBank};
use icbir_core::vae::{VaeDims, VaeModel};
use icbir_core::volume::{generate_phantom, GroundTruthMask, PhantomSpec};

/// Flat f64 copy of every trainable value: five layers as (weights, bias)
/// followed by the prototype bank.
#[derive(Clone)]
pub struct RefParams {
    pub dims: VaeDims,
    pub k: usize,
    pub tensors: Vec<Vec<f64>>,
}

pub const RELU: [bool; 5] = [true, false, false, true, false];

impl RefParams {
    pub fn from_model(model: &VaeModel, bank: &PrototypeBank) -> Self {
        let mut tensors = Vec::new();
        for l in model.layers() {
            tensors.push(l.weights().data().iter().map(|&v| v as f64).collect());
            tensors.push(l.bias().data().iter().map(|&v| v as f64).collect());
        }
        tensors.push(bank.values().iter().map(|&v| v as f64).collect());
        Self {
            dims: model.dims(),
            k: bank.num_classes(),
            tensors,
        }
    }

    fn dense(&self, layer: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w = &self.tensors[2 * layer];
        let b = &self.tensors[2 * layer + 1];
        let n_in = x.len();
        let pre: Vec<f64> = (0..b.len())
            .map(|o| b[o] + (0..n_in).map(|i| w[o * n_in + i] * x[i]).sum::<f64>())
            .collect();
        let out = pre
            .iter()
            .map(|&p| match layer {
                0 | 3 => p.max(0.0),
                4 => 1.0 / (1.0 + (-p).exp()),
                _ => p,
            })
            .collect();
        (pre, out)
    }

    /// Joint loss plus the relu pre-activations and raw log-variances,
    /// for detecting kinks.
    pub fn loss(&self, sample: &RefSample, beta: f64, gamma: f64, temperature: f64) -> (f64, Vec<f64>) {
        let (h_pre, h) = self.dense(0, &sample.x);
        let (_, mu) = self.dense(1, &h);
        let (lv_raw, _) = self.dense(2, &h);
        let lv: Vec<f64> = lv_raw.iter().map(|v| v.clamp(-10.0, 10.0)).collect();
        let z: Vec<f64> = (0..mu.len())
            .map(|i| mu[i] + (0.5 * lv[i]).exp() * sample.eps[i])
            .collect();
        let (d_pre, d) = self.dense(3, &z);
        let (_, xhat) = self.dense(4, &d);
        let rec = sample
            .x
            .iter()
            .zip(&xhat)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / sample.x.len() as f64;
        let kl = 0.5
            * mu
                .iter()
                .zip(&lv)
                .map(|(m, l)| l.exp() + m * m - 1.0 - l)
                .sum::<f64>();
        let protos = &self.tensors[10];
        let l = self.dims.latent;
        let n = self.dims.side;
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let logits: Vec<f64> = (0..self.k)
            .map(|c| {
                let off = ((sample.orientation * n + sample.slice) * self.k + c) * l;
                cos(&z, &protos[off..off + l]) / temperature
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let ce = lse - logits[sample.class];
        let mut kinks = h_pre;
        kinks.extend(d_pre);
        kinks.extend(lv_raw.iter().map(|v| v.abs() - 10.0));
        (rec + beta * kl + gamma * ce, kinks)
    }
}

pub struct RefSample {
    pub x: Vec<f64>,
    pub eps: Vec<f64>,
    pub orientation: usize,
    pub slice: usize,
    pub class: usize,
}

pub fn phantom_set(
    count_per_class: usize,
    classes: usize,
    side: usize,
    seed_base: u64,
) -> Vec<(LabeledVolume, GroundTruthMask)> {
    (0..count_per_class * classes)
        .map(|i| {
            let class = i % classes;
            let (v, mask) = generate_phantom(&PhantomSpec {
                side,
                seed: seed_base + i as u64,
                class,
                noise_sigma: 0.05,
                jitter: 2.0,
                anomaly_scale: 1.5,
            })
            .unwrap();
            (
                LabeledVolume {
                    id: v.id.clone(),
                    class,
                    volume: v,
                },
                mask,
            )
        })
        .collect()
}

pub fn orientation_index(o: Orientation) -> usize {
    o.axis()
}
