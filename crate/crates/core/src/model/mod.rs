//! Spatial-attention CNN encoder and MLP Gaussian decoder.
//!
//! The encoder maps a `B × P × P` patch to Dirichlet concentrations for its
//! center pixel; the decoder maps an abundance vector to a diagonal Gaussian
//! over the pixel spectrum.

mod checkpoint;

pub use checkpoint::{load_checkpoint, model_from_bytes, model_to_bytes, save_checkpoint, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{patch_batch, AbundanceMap, EndmemberMatrix, HsiCube};
use crate::error::{Error, Result};
use crate::stats::{ALPHA_FLOOR, SIGMA_FLOOR};
use crate::tensor::{RunningStats, Tape, Tensor, Var};

/// Number of conv/BN/ReLU blocks after the stem.
pub const BODY_BLOCKS: usize = 6;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Endmembers.
    pub k: usize,
    /// Spectral bands.
    pub bands: usize,
    /// Encoder hidden channels.
    pub hidden_channels: usize,
    /// Odd patch side.
    pub patch_size: usize,
    /// Concentrations sum to this.
    pub concentration_scale: f64,
    /// Decoder hidden width.
    pub decoder_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, why: &str| Err(Error::Config(format!("{f}: {why}")));
        if self.k == 0 {
            return bad("k", "must be >= 1");
        }
        if self.bands == 0 {
            return bad("bands", "must be >= 1");
        }
        if self.hidden_channels == 0 {
            return bad("hidden_channels", "must be >= 1");
        }
        if self.patch_size % 2 == 0 {
            return bad("patch_size", "must be odd");
        }
        if !(self.concentration_scale > 0.0) || !self.concentration_scale.is_finite() {
            return bad("concentration_scale", "must be finite and > 0");
        }
        if self.decoder_hidden == 0 {
            return bad("decoder_hidden", "must be >= 1");
        }
        Ok(())
    }
}

/// A 3×3 convolution followed by batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub stem: ConvBn,
    pub body: Vec<ConvBn>,
    /// `[K, C, 1, 1]`.
    pub head_kernel: Tensor,
    pub head_bias: Tensor,
    /// `[1, 2, 3, 3]` over the stacked channel-average and channel-max maps.
    pub attention_kernel: Tensor,
    pub attention_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    /// `[D, K]`.
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[D, D]`.
    pub w2: Tensor,
    pub b2: Tensor,
    /// `[B, D]`.
    pub mu_w: Tensor,
    pub mu_b: Tensor,
    /// `[B, D]`, raw scale before the positivity map.
    pub sigma_w: Tensor,
    pub sigma_b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound))
}

fn conv_bn(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> ConvBn {
    let bound = 1.0 / ((c_in * 9) as f64).sqrt();
    ConvBn {
        kernel: uniform(&[c_out, c_in, 3, 3], bound, rng),
        bias: uniform(&[c_out], bound, rng),
        gamma: Tensor::full([c_out], 1.0),
        beta: Tensor::zeros([c_out]),
        stats: RunningStats::new(c_out),
    }
}

impl EncoderParams {
    /// Kernels and biases uniform in `±1/√fan_in`; BN scale 1, shift 0.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.hidden_channels;
        let stem = conv_bn(cfg.bands, c, rng);
        let body = (0..BODY_BLOCKS).map(|_| conv_bn(c, c, rng)).collect();
        let hb = 1.0 / (c as f64).sqrt();
        let ab = 1.0 / 18f64.sqrt();
        EncoderParams {
            stem,
            body,
            head_kernel: uniform(&[cfg.k, c, 1, 1], hb, rng),
            head_bias: uniform(&[cfg.k], hb, rng),
            attention_kernel: uniform(&[1, 2, 3, 3], ab, rng),
            attention_bias: uniform(&[1], ab, rng),
        }
    }

    fn blocks(&self) -> impl Iterator<Item = &ConvBn> {
        std::iter::once(&self.stem).chain(self.body.iter())
    }

    /// Learnable tensors in a fixed order, with their checkpoint names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks().enumerate() {
            let p = block_name(i);
            out.push((format!("{p}.kernel"), &b.kernel));
            out.push((format!("{p}.bias"), &b.bias));
            out.push((format!("{p}.gamma"), &b.gamma));
            out.push((format!("{p}.beta"), &b.beta));
        }
        out.push(("enc.head.kernel".into(), &self.head_kernel));
        out.push(("enc.head.bias".into(), &self.head_bias));
        out.push(("enc.attention.kernel".into(), &self.attention_kernel));
        out.push(("enc.attention.bias".into(), &self.attention_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in std::iter::once(&mut self.stem).chain(self.body.iter_mut()) {
            out.push(&mut b.kernel);
            out.push(&mut b.bias);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        out.push(&mut self.head_kernel);
        out.push(&mut self.head_bias);
        out.push(&mut self.attention_kernel);
        out.push(&mut self.attention_bias);
        out
    }

    pub fn stats_mut(&mut self) -> Vec<&mut RunningStats> {
        std::iter::once(&mut self.stem)
            .chain(self.body.iter_mut())
            .map(|b| &mut b.stats)
            .collect()
    }

    pub fn stats(&self) -> Vec<&RunningStats> {
        self.blocks().map(|b| &b.stats).collect()
    }

    pub fn bands(&self) -> usize {
        self.stem.kernel.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.head_kernel.shape()[0]
    }
}

pub(crate) fn block_name(i: usize) -> String {
    if i == 0 {
        "enc.stem".into()
    } else {
        format!("enc.body{}", i - 1)
    }
}

impl DecoderParams {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (k, d, b) = (cfg.k, cfg.decoder_hidden, cfg.bands);
        let b1 = 1.0 / (k as f64).sqrt();
        let b2 = 1.0 / (d as f64).sqrt();
        DecoderParams {
            w1: uniform(&[d, k], b1, rng),
            b1: uniform(&[d], b1, rng),
            w2: uniform(&[d, d], b2, rng),
            b2: uniform(&[d], b2, rng),
            mu_w: uniform(&[b, d], b2, rng),
            mu_b: uniform(&[b], b2, rng),
            sigma_w: uniform(&[b, d], b2, rng),
            sigma_b: uniform(&[b], b2, rng),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("dec.w1".into(), &self.w1),
            ("dec.b1".into(), &self.b1),
            ("dec.w2".into(), &self.w2),
            ("dec.b2".into(), &self.b2),
            ("dec.mu.w".into(), &self.mu_w),
            ("dec.mu.b".into(), &self.mu_b),
            ("dec.sigma.w".into(), &self.sigma_w),
            ("dec.sigma.b".into(), &self.sigma_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.mu_w,
            &mut self.mu_b,
            &mut self.sigma_w,
            &mut self.sigma_b,
        ]
    }

    pub fn k(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn bands(&self) -> usize {
        self.mu_w.shape()[0]
    }
}

impl Model {
    /// Fresh weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let encoder = EncoderParams::init(&config, &mut rng);
        let decoder = DecoderParams::init(&config, &mut rng);
        Ok(Model {
            config,
            encoder,
            decoder,
        })
    }

    /// Encoder then decoder tensors, the order used by the optimizer.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.encoder.named_tensors();
        v.extend(self.decoder.named_tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.decoder.tensors_mut());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Tape handles for one conv/BN block.
#[derive(Clone, Copy, Debug)]
pub struct ConvBnVars {
    pub kernel: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Tape handles for all encoder tensors, in [`EncoderParams::named_tensors`] order.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub blocks: Vec<ConvBnVars>,
    pub head_kernel: Var,
    pub head_bias: Var,
    pub attention_kernel: Var,
    pub attention_bias: Var,
}

impl EncoderVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend([b.kernel, b.bias, b.gamma, b.beta]);
        }
        v.extend([self.head_kernel, self.head_bias, self.attention_kernel, self.attention_bias]);
        v
    }

    /// Inverse of [`EncoderVars::all`].
    pub fn from_slice(vars: &[Var]) -> Result<Self> {
        if vars.len() < 8 || (vars.len() - 4) % 4 != 0 {
            return Err(Error::shape(format!("{} encoder handles do not form whole blocks", vars.len())));
        }
        let nb = (vars.len() - 4) / 4;
        let blocks = vars[..4 * nb]
            .chunks(4)
            .map(|c| ConvBnVars {
                kernel: c[0],
                bias: c[1],
                gamma: c[2],
                beta: c[3],
            })
            .collect();
        let t = &vars[4 * nb..];
        Ok(EncoderVars {
            blocks,
            head_kernel: t[0],
            head_bias: t[1],
            attention_kernel: t[2],
            attention_bias: t[3],
        })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub mu_w: Var,
    pub mu_b: Var,
    pub sigma_w: Var,
    pub sigma_b: Var,
}

impl DecoderVars {
    pub fn all(&self) -> Vec<Var> {
        vec![
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.mu_w,
            self.mu_b,
            self.sigma_w,
            self.sigma_b,
        ]
    }

    /// Inverse of [`DecoderVars::all`].
    pub fn from_slice(v: &[Var]) -> Result<Self> {
        match *v {
            [w1, b1, w2, b2, mu_w, mu_b, sigma_w, sigma_b] => Ok(DecoderVars {
                w1,
                b1,
                w2,
                b2,
                mu_w,
                mu_b,
                sigma_w,
                sigma_b,
            }),
            _ => Err(Error::shape(format!("decoder needs 8 handles, got {}", v.len()))),
        }
    }
}

fn leaf(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

/// Intermediate encoder outputs.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[N, K]` concentrations.
    pub alpha: Var,
    /// `[N, 1, P, P]` spatial attention.
    pub attention: Var,
    /// `[N, K, P, P]` head features.
    pub features: Var,
}

impl EncoderParams {
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let blocks = self
            .blocks()
            .map(|b| ConvBnVars {
                kernel: leaf(tape, &b.kernel, trainable),
                bias: leaf(tape, &b.bias, trainable),
                gamma: leaf(tape, &b.gamma, trainable),
                beta: leaf(tape, &b.beta, trainable),
            })
            .collect();
        EncoderVars {
            blocks,
            head_kernel: leaf(tape, &self.head_kernel, trainable),
            head_bias: leaf(tape, &self.head_bias, trainable),
            attention_kernel: leaf(tape, &self.attention_kernel, trainable),
            attention_bias: leaf(tape, &self.attention_bias, trainable),
        }
    }

    /// Records the encoder on `tape`. In training mode batch statistics are
    /// used and the running statistics updated; otherwise the running
    /// statistics normalize.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        vars: &EncoderVars,
        x: Var,
        training: bool,
        concentration_scale: f64,
    ) -> Result<EncoderOutput> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.bands() {
            return Err(Error::shape(format!(
                "encoder expects [N, {}, P, P] patches, got {shape:?}",
                self.bands()
            )));
        }
        if shape[2] != shape[3] || shape[2] % 2 == 0 {
            return Err(Error::shape(format!("patches must be square with odd side, got {shape:?}")));
        }
        let mut h = x;
        let stats = self.stats_mut();
        for (bv, st) in vars.blocks.iter().zip(stats) {
            let c = tape.conv2d(h, bv.kernel, bv.bias)?;
            let n = tape.batchnorm2d(c, bv.gamma, bv.beta, st, training)?;
            h = tape.relu(n);
        }
        let features = tape.conv2d(h, vars.head_kernel, vars.head_bias)?;
        let avg = tape.channel_avg_pool(features)?;
        let max = tape.channel_max_pool(features)?;
        let pooled = tape.concat_channels(avg, max)?;
        let logits = tape.conv2d(pooled, vars.attention_kernel, vars.attention_bias)?;
        let attention = tape.sigmoid(logits);
        let z = tape.spatial_weighted_sum(features, attention)?;
        let sm = tape.softmax_lastdim(z)?;
        let scaled = tape.scale(sm, concentration_scale);
        let alpha = tape.clamp_min(scaled, ALPHA_FLOOR);
        Ok(EncoderOutput {
            alpha,
            attention,
            features,
        })
    }
}

impl DecoderParams {
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> DecoderVars {
        DecoderVars {
            w1: leaf(tape, &self.w1, trainable),
            b1: leaf(tape, &self.b1, trainable),
            w2: leaf(tape, &self.w2, trainable),
            b2: leaf(tape, &self.b2, trainable),
            mu_w: leaf(tape, &self.mu_w, trainable),
            mu_b: leaf(tape, &self.mu_b, trainable),
            sigma_w: leaf(tape, &self.sigma_w, trainable),
            sigma_b: leaf(tape, &self.sigma_b, trainable),
        }
    }

    /// Records the decoder on `tape`: `z [N, K]` to `(μ, σ)`, each `[N, B]`,
    /// with `σ = softplus(raw) + 1e-4`.
    pub fn forward(&self, tape: &mut Tape, vars: &DecoderVars, z: Var) -> Result<(Var, Var)> {
        let h1 = tape.linear(z, vars.w1, vars.b1)?;
        let h1 = tape.relu(h1);
        let h2 = tape.linear(h1, vars.w2, vars.b2)?;
        let h2 = tape.relu(h2);
        let mu = tape.linear(h2, vars.mu_w, vars.mu_b)?;
        let raw = tape.linear(h2, vars.sigma_w, vars.sigma_b)?;
        let sp = tape.softplus(raw);
        let sigma = tape.add_scalar(sp, SIGMA_FLOOR);
        Ok((mu, sigma))
    }
}

/// Dirichlet concentrations `[N, K]` for a batch of patches `[N, B, P, P]`,
/// using BN running statistics.
pub fn encode(params: &EncoderParams, batch: &Tensor, concentration_scale: f64) -> Result<Tensor> {
    let mut p = params.clone();
    encode_in_place(&mut p, batch, concentration_scale)
}

// eval mode leaves the running statistics untouched, so a scratch copy is
// only needed to satisfy the `&mut` signature of `forward`
fn encode_in_place(params: &mut EncoderParams, batch: &Tensor, s: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.constant(batch.clone());
    let out = params.forward(&mut tape, &vars, x, false, s)?;
    Ok(tape.value(out.alpha).clone())
}

/// Gaussian mean and scale `[N, B]` for abundance rows `z [N, K]`.
pub fn decode(params: &DecoderParams, z: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, k) = z.dims2()?;
    if k != params.k() {
        return Err(Error::shape(format!("decoder expects K={}, got z of shape {:?}", params.k(), z.shape())));
    }
    if let Some(v) = z.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::contract(format!("abundance component {v} is negative")));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let zv = tape.constant(z.clone());
    let (mu, sigma) = params.forward(&mut tape, &vars, zv)?;
    Ok((tape.value(mu).clone(), tape.value(sigma).clone()))
}

/// Row `k` is the decoded mean spectrum of the one-hot abundance `e_k`.
pub fn extract_endmembers(params: &DecoderParams) -> Result<EndmemberMatrix> {
    let k = params.k();
    // one row at a time: batched products may round differently
    let mut data = Vec::with_capacity(k * params.bands());
    for j in 0..k {
        let one_hot = Tensor::from_fn([1, k], |i| if i == j { 1.0 } else { 0.0 });
        data.extend_from_slice(decode(params, &one_hot)?.0.data());
    }
    EndmemberMatrix::new(k, params.bands(), data)
}

/// Pixels per forward pass when encoding a whole scene.
pub const UNMIX_CHUNK: usize = 256;

/// Encodes every pixel of `cube` from its reflect-padded `P × P`
/// neighbourhood and returns the Dirichlet means. Chunks are encoded on the
/// current rayon pool; the result does not depend on the thread count.
pub fn unmix_scene(params: &EncoderParams, cube: &HsiCube, patch_size: usize, concentration_scale: f64) -> Result<AbundanceMap> {
    if cube.bands() != params.bands() {
        return Err(Error::shape(format!(
            "cube has {} bands, encoder expects {}",
            cube.bands(),
            params.bands()
        )));
    }
    let n = cube.n_pixels();
    let k = params.k();
    let chunks: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(UNMIX_CHUNK).map(<[usize]>::to_vec).collect();
    let parts: Vec<Vec<f64>> = chunks
        .par_iter()
        .map(|idx| -> Result<Vec<f64>> {
            let batch = patch_batch(cube, patch_size, idx)?;
            let alpha = encode(params, &batch, concentration_scale)?;
            let mut out = alpha.into_data();
            for row in out.chunks_exact_mut(k) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    AbundanceMap::new(cube.height(), cube.width(), k, parts.concat())
}

#[cfg(test)]
mod tests;
