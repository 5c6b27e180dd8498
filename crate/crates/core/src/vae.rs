//! Per-slice variational autoencoder and the joint training objective
//! `D(x, x̂) + β·KL(q(z|x) ‖ N(0, I)) + γ·C`, where `C` is the prototype
//! cross-entropy from [`crate::protohead`].
//!
//! Encoder: `S² → H` (relu) feeding two linear heads for `mu` and `logvar`.
//! Decoder: `L → H` (relu) `→ S²` (sigmoid).

use serde::{Deserialize, Serialize};

use crate::dataset::SliceSample;
use crate::nn::{Activation, DenseGrads, DenseLayer, Init};
use crate::protohead::PrototypeBank;
use crate::rng::Rng;
use crate::tensor::ensure_finite;
use crate::{Error, Result};

pub const LOGVAR_MIN: f32 = -10.0;
pub const LOGVAR_MAX: f32 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeDims {
    /// Slice side length `S`; inputs have `S²` pixels.
    pub side: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl VaeDims {
    pub fn pixels(&self) -> usize {
        self.side * self.side
    }
}

impl Default for VaeDims {
    fn default() -> Self {
        Self {
            side: 64,
            hidden: 512,
            latent: 32,
        }
    }
}

/// Encoder mean/log-variance and the code used downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f32>,
    /// Clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub logvar: Vec<f32>,
    pub z: Vec<f32>,
    /// Noise used for `z = mu + exp(logvar / 2)·eps`; `None` at inference,
    /// where `z == mu`.
    pub eps: Option<Vec<f32>>,
}

/// Layer names in checkpoint order.
pub const LAYER_NAMES: [&str; 5] = ["enc.hidden", "enc.mu", "enc.logvar", "dec.hidden", "dec.out"];

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    dims: VaeDims,
    pub beta: f32,
    pub gamma: f32,
    layers: [DenseLayer; 5],
}

const ENC_HIDDEN: usize = 0;
const ENC_MU: usize = 1;
const ENC_LOGVAR: usize = 2;
const DEC_HIDDEN: usize = 3;
const DEC_OUT: usize = 4;

impl VaeModel {
    /// Randomly initialized model (He for relu layers, Xavier elsewhere).
    pub fn new(dims: VaeDims, beta: f32, gamma: f32, seed: u64) -> Result<Self> {
        Self::with_head_init(dims, beta, gamma, seed, Init::Xavier)
    }

    /// Like [`VaeModel::new`] but with an explicit init for the `mu`/`logvar` heads.
    pub fn with_head_init(dims: VaeDims, beta: f32, gamma: f32, seed: u64, head: Init) -> Result<Self> {
        if dims.side == 0 || dims.hidden == 0 || dims.latent == 0 {
            return Err(Error::Config(format!("invalid model dims {dims:?}")));
        }
        check_weight("beta", beta)?;
        check_weight("gamma", gamma)?;
        let mut rng = Rng::new(seed);
        let p = dims.pixels();
        let layers = [
            DenseLayer::new(p, dims.hidden, Activation::Relu, Init::He, &mut rng)?,
            DenseLayer::new(dims.hidden, dims.latent, Activation::Identity, head, &mut rng)?,
            DenseLayer::new(dims.hidden, dims.latent, Activation::Identity, head, &mut rng)?,
            DenseLayer::new(dims.latent, dims.hidden, Activation::Relu, Init::He, &mut rng)?,
            DenseLayer::new(dims.hidden, p, Activation::Sigmoid, Init::Xavier, &mut rng)?,
        ];
        Ok(Self {
            dims,
            beta,
            gamma,
            layers,
        })
    }

    /// Rebuilds a model from layers in [`LAYER_NAMES`] order.
    pub fn from_layers(dims: VaeDims, beta: f32, gamma: f32, layers: [DenseLayer; 5]) -> Result<Self> {
        let p = dims.pixels();
        let expected = [
            (p, dims.hidden),
            (dims.hidden, dims.latent),
            (dims.hidden, dims.latent),
            (dims.latent, dims.hidden),
            (dims.hidden, p),
        ];
        for ((l, (i, o)), name) in layers.iter().zip(expected).zip(LAYER_NAMES) {
            if l.in_dim() != i || l.out_dim() != o {
                return Err(Error::Dimension(format!(
                    "layer {name} is {}→{}, expected {i}→{o}",
                    l.in_dim(),
                    l.out_dim()
                )));
            }
        }
        Ok(Self {
            dims,
            beta,
            gamma,
            layers,
        })
    }

    pub fn dims(&self) -> VaeDims {
        self.dims
    }

    pub fn layers(&self) -> &[DenseLayer; 5] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer; 5] {
        &mut self.layers
    }

    fn check_pixels(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.dims.pixels() {
            return Err(Error::Dimension(format!(
                "slice has {} pixels, model expects {}",
                x.len(),
                self.dims.pixels()
            )));
        }
        Ok(())
    }

    fn heads(&self, x: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
        self.check_pixels(x)?;
        let h = self.layers[ENC_HIDDEN].trace(x)?.output;
        let mu = self.layers[ENC_MU].trace(&h)?.output;
        let logvar = self.layers[ENC_LOGVAR]
            .trace(&h)?
            .output
            .into_iter()
            .map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
            .collect();
        Ok((mu, logvar))
    }

    /// Inference-mode encoding: `z == mu`.
    pub fn encode(&self, x: &[f32]) -> Result<LatentCode> {
        let (mu, logvar) = self.heads(x)?;
        Ok(LatentCode {
            z: mu.clone(),
            mu,
            logvar,
            eps: None,
        })
    }

    /// Training-mode encoding with a caller-supplied noise draw.
    pub fn encode_with_noise(&self, x: &[f32], eps: &[f32]) -> Result<LatentCode> {
        if eps.len() != self.dims.latent {
            return Err(Error::Dimension(format!(
                "noise has {} entries, latent is {}",
                eps.len(),
                self.dims.latent
            )));
        }
        let (mu, logvar) = self.heads(x)?;
        let z: Vec<f32> = mu
            .iter()
            .zip(&logvar)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        ensure_finite(&z, "latent sample")?;
        Ok(LatentCode {
            mu,
            logvar,
            z,
            eps: Some(eps.to_vec()),
        })
    }

    /// Training-mode encoding drawing the noise from `rng`.
    pub fn encode_sampled(&self, x: &[f32], rng: &mut Rng) -> Result<LatentCode> {
        let mut eps = vec![0.0; self.dims.latent];
        rng.fill_standard_normal(&mut eps);
        self.encode_with_noise(x, &eps)
    }

    pub fn decode(&self, z: &[f32]) -> Result<Vec<f32>> {
        if z.len() != self.dims.latent {
            return Err(Error::Dimension(format!(
                "code has {} entries, latent is {}",
                z.len(),
                self.dims.latent
            )));
        }
        ensure_finite(z, "decoder input")?;
        let h = self.layers[DEC_HIDDEN].trace(z)?.output;
        Ok(self.layers[DEC_OUT].trace(&h)?.output)
    }
}

fn check_weight(name: &str, v: f32) -> Result<()> {
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
    }
    Ok(())
}

/// Mean squared error.
pub fn reconstruction_loss(x: &[f32], xhat: &[f32]) -> Result<f32> {
    if x.len() != xhat.len() || x.is_empty() {
        return Err(Error::Dimension(format!(
            "reconstruction of {} pixels against {}",
            xhat.len(),
            x.len()
        )));
    }
    let sum: f64 = x
        .iter()
        .zip(xhat)
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum();
    Ok((sum / x.len() as f64) as f32)
}

/// `KL(N(mu, exp(logvar)) ‖ N(0, I))` in closed form.
pub fn kl_divergence(mu: &[f32], logvar: &[f32]) -> Result<f32> {
    if mu.len() != logvar.len() {
        return Err(Error::Dimension(format!(
            "mu has {} entries, logvar {}",
            mu.len(),
            logvar.len()
        )));
    }
    let kl: f64 = mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            lv.exp() + m * m - 1.0 - lv
        })
        .sum::<f64>()
        * 0.5;
    if !kl.is_finite() {
        return Err(Error::Numeric("KL divergence overflowed".into()));
    }
    Ok(kl.max(0.0) as f32)
}

/// Loss terms of one slice; `total = reconstruction + β·kl + γ·cross_entropy`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub cross_entropy: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn combine(reconstruction: f32, kl: f32, cross_entropy: f32, beta: f32, gamma: f32) -> Self {
        let (d, k, c) = (reconstruction as f64, kl as f64, cross_entropy as f64);
        Self {
            reconstruction: d,
            kl: k,
            cross_entropy: c,
            total: d + beta as f64 * k + gamma as f64 * c,
        }
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.reconstruction += other.reconstruction;
        self.kl += other.kl;
        self.cross_entropy += other.cross_entropy;
        self.total += other.total;
    }

    pub fn scaled(&self, f: f64) -> Self {
        Self {
            reconstruction: self.reconstruction * f,
            kl: self.kl * f,
            cross_entropy: self.cross_entropy * f,
            total: self.total * f,
        }
    }
}

/// Joint loss of one slice with `eps` drawn from `rng`.
pub fn total_loss(
    model: &VaeModel,
    bank: &PrototypeBank,
    sample: &SliceSample<'_>,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let mut eps = vec![0.0; model.dims.latent];
    rng.fill_standard_normal(&mut eps);
    loss_with_noise(model, bank, sample, &eps)
}

/// Joint loss of one slice for a fixed noise draw.
pub fn loss_with_noise(
    model: &VaeModel,
    bank: &PrototypeBank,
    sample: &SliceSample<'_>,
    eps: &[f32],
) -> Result<LossBreakdown> {
    let code = model.encode_with_noise(sample.pixels, eps)?;
    let xhat = model.decode(&code.z)?;
    let d = reconstruction_loss(sample.pixels, &xhat)?;
    let kl = kl_divergence(&code.mu, &code.logvar)?;
    let c = bank
        .prototype_gradients(&code.z, sample.orientation, sample.slice, sample.class)?
        .loss;
    Ok(LossBreakdown::combine(d, kl, c, model.beta, model.gamma))
}

/// Gradients of the joint loss for every model layer and the prototype bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub layers: [DenseGrads; 5],
    pub prototypes: Vec<f32>,
}

impl ModelGrads {
    pub fn zeros(model: &VaeModel, bank: &PrototypeBank) -> Self {
        Self {
            layers: std::array::from_fn(|i| DenseGrads::zeros_like(&model.layers[i])),
            prototypes: vec![0.0; bank.values().len()],
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
        crate::nn::kernels::axpy(1.0, &other.prototypes, &mut self.prototypes);
    }

    pub fn scale(&mut self, f: f32) {
        self.layers.iter_mut().for_each(|g| g.scale(f));
        self.prototypes.iter_mut().for_each(|v| *v *= f);
    }
}

/// Accumulates the gradient of the joint loss of one slice into `grads` and
/// returns its loss terms.
pub fn accumulate_gradients(
    model: &VaeModel,
    bank: &PrototypeBank,
    sample: &SliceSample<'_>,
    eps: &[f32],
    grads: &mut ModelGrads,
) -> Result<LossBreakdown> {
    let dims = model.dims;
    model.check_pixels(sample.pixels)?;
    if eps.len() != dims.latent {
        return Err(Error::Dimension("noise length differs from latent size".into()));
    }
    let x = sample.pixels;
    let [enc_h, enc_mu, enc_lv, dec_h, dec_out] = &model.layers;
    let (hid, lat, pix) = (dims.hidden, dims.latent, dims.pixels());

    // forward
    let mut h_pre = vec![0.0; hid];
    let mut h = vec![0.0; hid];
    enc_h.forward_into(x, &mut h_pre, &mut h);
    let mut mu = vec![0.0; lat];
    let mut lv_raw = vec![0.0; lat];
    let mut scratch = vec![0.0; lat];
    enc_mu.forward_into(&h, &mut scratch, &mut mu);
    enc_lv.forward_into(&h, &mut scratch, &mut lv_raw);
    let lv: Vec<f32> = lv_raw.iter().map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)).collect();
    let std: Vec<f32> = lv.iter().map(|v| (0.5 * v).exp()).collect();
    let z: Vec<f32> = (0..lat).map(|i| mu[i] + std[i] * eps[i]).collect();
    ensure_finite(&z, "latent sample")?;
    let mut d_pre = vec![0.0; hid];
    let mut d = vec![0.0; hid];
    dec_h.forward_into(&z, &mut d_pre, &mut d);
    let mut o_pre = vec![0.0; pix];
    let mut xhat = vec![0.0; pix];
    dec_out.forward_into(&d, &mut o_pre, &mut xhat);

    let rec = reconstruction_loss(x, &xhat)?;
    let kl = kl_divergence(&mu, &lv)?;
    let proto = bank.prototype_gradients(&z, sample.orientation, sample.slice, sample.class)?;
    let loss = LossBreakdown::combine(rec, kl, proto.loss, model.beta, model.gamma);
    if !loss.total.is_finite() {
        return Err(Error::Numeric("slice loss is not finite".into()));
    }

    // backward
    let inv_n = 2.0 / pix as f32;
    let g_xhat: Vec<f32> = xhat.iter().zip(x).map(|(a, b)| (a - b) * inv_n).collect();
    let mut g_d = vec![0.0; hid];
    dec_out.backward_accumulate(&d, &o_pre, &xhat, &g_xhat, &mut grads.layers[DEC_OUT], Some(&mut g_d));
    let mut g_z = vec![0.0; lat];
    dec_h.backward_accumulate(&z, &d_pre, &d, &g_d, &mut grads.layers[DEC_HIDDEN], Some(&mut g_z));
    let (beta, gamma) = (model.beta, model.gamma);
    for i in 0..lat {
        g_z[i] += gamma * proto.grad_z[i];
    }
    let g_mu: Vec<f32> = (0..lat).map(|i| g_z[i] + beta * mu[i]).collect();
    let g_lv: Vec<f32> = (0..lat)
        .map(|i| {
            if lv_raw[i] < LOGVAR_MIN || lv_raw[i] > LOGVAR_MAX {
                0.0
            } else {
                g_z[i] * eps[i] * 0.5 * std[i] + beta * 0.5 * (lv[i].exp() - 1.0)
            }
        })
        .collect();
    let mut g_h = vec![0.0; hid];
    let mut g_h2 = vec![0.0; hid];
    enc_mu.backward_accumulate(&h, &mu, &mu, &g_mu, &mut grads.layers[ENC_MU], Some(&mut g_h));
    enc_lv.backward_accumulate(&h, &lv_raw, &lv_raw, &g_lv, &mut grads.layers[ENC_LOGVAR], Some(&mut g_h2));
    for (a, b) in g_h.iter_mut().zip(&g_h2) {
        *a += b;
    }
    enc_h.backward_accumulate(x, &h_pre, &h, &g_h, &mut grads.layers[ENC_HIDDEN], None);

    for (k, gp) in proto.grad_prototypes.iter().enumerate() {
        let off = bank.offset(sample.orientation, sample.slice, k);
        for (dst, &g) in grads.prototypes[off..off + lat].iter_mut().zip(gp) {
            *dst += gamma * g;
        }
    }
    Ok(loss)
}
