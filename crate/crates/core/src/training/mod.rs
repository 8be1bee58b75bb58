//! Loss assembly, Adam and the epoch loop.
//!
//! Each training example is a `P × P` patch; the reconstruction target is
//! its center spectrum and the supervised target its ground-truth
//! abundance vector.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{patch_batch, split, AbundanceMap, HsiCube};
use crate::error::{Error, Result};
use crate::model::{DecoderParams, DecoderVars, EncoderParams, EncoderVars, Model, ModelConfig};
use crate::stats::{uniform_open, DirichletParams};
use crate::tensor::{Tape, Tensor, Var};


const STREAM_SHUFFLE: u64 = 11;
const STREAM_NOISE: u64 = 12;

/// Dirichlet prior over abundances: one concentration for every component
/// or an explicit vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prior {
    Symmetric(f64),
    Full(Vec<f64>),
}

impl Default for Prior {
    fn default() -> Self {
        Prior::Symmetric(1.0)
    }
}

impl Prior {
    pub fn dirichlet(&self, k: usize) -> Result<DirichletParams> {
        match self {
            Prior::Symmetric(c) => {
                if !(*c > 0.0 && c.is_finite()) {
                    return Err(Error::Config(format!("prior: concentration must be > 0, got {c}")));
                }
                DirichletParams::symmetric(k, *c)
            }
            Prior::Full(v) => {
                if v.len() != k {
                    return Err(Error::Config(format!("prior: {} concentrations for k={k}", v.len())));
                }
                if let Some(c) = v.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
                    return Err(Error::Config(format!("prior: concentration must be > 0, got {c}")));
                }
                DirichletParams::new(v.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub kl_weight: f64,
    pub abundance_loss_weight: f64,
    /// Model initialization, shuffle order and sampling noise.
    pub seed: u64,
    pub patch_size: usize,
    pub concentration_scale: f64,
    pub prior: Prior,
    pub hidden_channels: usize,
    pub decoder_hidden: usize,
    /// Monte-Carlo samples per example for the reconstruction term.
    pub mc_samples: usize,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            epochs: 200,
            batch_size: 256,
            kl_weight: 1.0,
            abundance_loss_weight: 1.0,
            seed: 0,
            patch_size: 7,
            concentration_scale: 10.0,
            prior: Prior::default(),
            hidden_channels: 64,
            decoder_hidden: 128,
            mc_samples: 1,
            train_fraction: 0.8,
            split_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be > 0, got {}", self.learning_rate));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return bad("kl_weight", format!("must be >= 0, got {}", self.kl_weight));
        }
        if !(self.abundance_loss_weight >= 0.0 && self.abundance_loss_weight.is_finite()) {
            return bad(
                "abundance_loss_weight",
                format!("must be >= 0, got {}", self.abundance_loss_weight),
            );
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if self.mc_samples == 0 {
            return bad("mc_samples", "must be >= 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction", format!("must be in (0, 1), got {}", self.train_fraction));
        }
        Ok(())
    }

    pub fn model_config(&self, k: usize, bands: usize) -> ModelConfig {
        ModelConfig {
            k,
            bands,
            hidden_channels: self.hidden_channels,
            patch_size: self.patch_size,
            concentration_scale: self.concentration_scale,
            decoder_hidden: self.decoder_hidden,
        }
    }
}

// ---- Adam -----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_tensors<'a>(ts: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = ts.into_iter().map(Tensor::len).collect();
        Self::new(&sizes)
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::shape(format!(
                "adam: parameter {i} has {} values, grad {}, buffer {}",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *x -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

// ---- losses ---------------------------------------------------------------

/// Mean squared error over components and batch rows.
pub fn loss_supervised(tape: &mut Tape, z_true: &Tensor, z_hat: Var) -> Result<Var> {
    if tape.value(z_hat).shape() != z_true.shape() {
        return Err(Error::shape(format!(
            "abundance targets {:?} vs estimates {:?}",
            z_true.shape(),
            tape.value(z_hat).shape()
        )));
    }
    let t = tape.constant(z_true.clone());
    let d = tape.sub(z_hat, t)?;
    let sq = tape.square(d);
    tape.mean_all(sq)
}

/// Batch-mean terms of the negative ELBO.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    /// `−log N(x | μ, σ)`.
    pub recon: Var,
    /// `KL(Dir(α) ‖ prior)`.
    pub kl: Var,
    /// `recon + λ_KL · kl`.
    pub total: Var,
}

/// Negative ELBO from decoded Gaussians `(μ, σ)` of shape `[N, B]`, the
/// concentrations `α [N, K]` and the prior.
pub fn loss_elbo(
    tape: &mut Tape,
    x_center: &Tensor,
    mu: Var,
    sigma: Var,
    alpha: Var,
    prior: &DirichletParams,
    kl_weight: f64,
) -> Result<ElboTerms> {
    let ll = tape.gaussian_log_likelihood(x_center, mu, sigma)?;
    let ll = tape.mean_all(ll)?;
    let recon = tape.scale(ll, -1.0);
    let kl = tape.dirichlet_kl(alpha, prior.alpha())?;
    let kl = tape.mean_all(kl)?;
    let wkl = tape.scale(kl, kl_weight);
    let total = tape.add(recon, wkl)?;
    Ok(ElboTerms { recon, kl, total })
}

/// One training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[N, B, P, P]`.
    pub patches: Tensor,
    /// `[N, B]` center spectra.
    pub centers: Tensor,
    /// `[N, K]` ground-truth abundances, when available.
    pub abundances: Option<Tensor>,
}

impl Batch {
    pub fn from_pixels(cube: &HsiCube, abundances: Option<&AbundanceMap>, p: usize, pixels: &[usize]) -> Result<Self> {
        let patches = patch_batch(cube, p, pixels)?;
        let b = cube.bands();
        let mut centers = Vec::with_capacity(pixels.len() * b);
        for &px in pixels {
            centers.extend_from_slice(cube.pixel(px));
        }
        let centers = Tensor::new([pixels.len(), b], centers)?;
        let abundances = abundances
            .map(|a| Tensor::new([pixels.len(), a.k()], a.rows(pixels)))
            .transpose()?;
        Ok(Batch {
            patches,
            centers,
            abundances,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss weights and prior shared by every batch.
#[derive(Clone, Debug)]
pub struct Objective {
    pub kl_weight: f64,
    pub abundance_loss_weight: f64,
    pub prior: DirichletParams,
    pub concentration_scale: f64,
}

impl Objective {
    pub fn from_config(cfg: &TrainConfig, k: usize) -> Result<Self> {
        Ok(Objective {
            kl_weight: cfg.kl_weight,
            abundance_loss_weight: cfg.abundance_loss_weight,
            prior: cfg.prior.dirichlet(k)?,
            concentration_scale: cfg.concentration_scale,
        })
    }
}

/// Tape handles of all loss terms for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub abundance_mse: Var,
}

/// Records the full objective `negative ELBO + λ_ab · MSE(α/Σα, z)` for a
/// batch. `noise` holds one `[N, K]` tensor of uniforms per Monte-Carlo
/// sample; the reconstruction term is averaged over them. The supervised
/// term compares the Dirichlet mean with the labels and is recorded as a
/// constant zero when the batch has none.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    tape: &mut Tape,
    encoder: &mut EncoderParams,
    enc_vars: &EncoderVars,
    decoder: &DecoderParams,
    dec_vars: &DecoderVars,
    batch: &Batch,
    noise: &[Tensor],
    objective: &Objective,
    training: bool,
) -> Result<LossVars> {
    if noise.is_empty() {
        return Err(Error::contract("batch_loss needs at least one noise sample"));
    }
    let x = tape.constant(batch.patches.clone());
    let out = encoder.forward(tape, enc_vars, x, training, objective.concentration_scale)?;
    let mut recon: Option<Var> = None;
    let mut kl = None;
    for u in noise {
        let z = tape.dirichlet_rsample(out.alpha, u)?;
        let (mu, sigma) = decoder.forward(tape, dec_vars, z)?;
        let terms = loss_elbo(tape, &batch.centers, mu, sigma, out.alpha, &objective.prior, objective.kl_weight)?;
        recon = Some(match recon {
            None => terms.recon,
            Some(r) => tape.add(r, terms.recon)?,
        });
        kl.get_or_insert(terms.kl);
    }
    let recon = tape.scale(recon.expect("non-empty noise"), 1.0 / noise.len() as f64);
    let kl = kl.expect("non-empty noise");
    let abundance_mse = match &batch.abundances {
        Some(z) => {
            let zhat = tape.normalize_lastdim(out.alpha)?;
            loss_supervised(tape, z, zhat)?
        }
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let wkl = tape.scale(kl, objective.kl_weight);
    let elbo = tape.add(recon, wkl)?;
    let wab = tape.scale(abundance_mse, objective.abundance_loss_weight);
    let total = tape.add(elbo, wab)?;
    Ok(LossVars {
        total,
        recon,
        kl,
        abundance_mse,
    })
}

/// Scalar loss values for one batch or epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub abundance_mse: f64,
}

impl LossValues {
    fn read(tape: &Tape, v: &LossVars) -> Self {
        LossValues {
            total: tape.value(v.total).item(),
            recon: tape.value(v.recon).item(),
            kl: tape.value(v.kl).item(),
            abundance_mse: tape.value(v.abundance_mse).item(),
        }
    }

    fn check_finite(&self, step: usize) -> Result<()> {
        for (term, v) in [
            ("recon", self.recon),
            ("kl", self.kl),
            ("abundance_mse", self.abundance_mse),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    term: format!("{term} = {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Loss values and gradients (in [`Model::tensors_mut`] order) for one
/// batch. Training mode updates the BN running statistics. The gradient
/// list is empty when the total loss is not finite.
pub fn loss_and_grads(
    model: &mut Model,
    batch: &Batch,
    noise: &[Tensor],
    objective: &Objective,
    training: bool,
) -> Result<(LossValues, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let ev = model.encoder.register(&mut tape, true);
    let dv = model.decoder.register(&mut tape, true);
    let lv = batch_loss(
        &mut tape,
        &mut model.encoder,
        &ev,
        &model.decoder,
        &dv,
        batch,
        noise,
        objective,
        training,
    )?;
    let values = LossValues::read(&tape, &lv);
    if !values.total.is_finite() {
        return Ok((values, Vec::new()));
    }
    tape.backward(lv.total)?;
    let grads = ev
        .all()
        .into_iter()
        .chain(dv.all())
        .map(|v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::contract("parameter without gradient"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((values, grads))
}

/// `count` uniforms tensors of shape `[n, k]`.
pub fn draw_noise(rng: &mut ChaCha8Rng, count: usize, n: usize, k: usize) -> Vec<Tensor> {
    (0..count)
        .map(|_| Tensor::from_fn([n, k], |_| uniform_open(rng)))
        .collect()
}

// ---- loss trace -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub values: LossValues,
}

/// Per-epoch example-weighted means of the loss terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub epochs: Vec<EpochLoss>,
}

pub const TRACE_HEADER: &str = "epoch,total,recon,kl,abundance_mse";

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for e in &self.epochs {
            let v = e.values;
            let _ = writeln!(s, "{},{:?},{:?},{:?},{:?}", e.epoch, v.total, v.recon, v.kl, v.abundance_mse);
        }
        s
    }

    pub fn first(&self) -> Option<&LossValues> {
        self.epochs.first().map(|e| &e.values)
    }

    pub fn last(&self) -> Option<&LossValues> {
        self.epochs.last().map(|e| &e.values)
    }
}

// ---- training loop --------------------------------------------------------

/// Pixels used for training and where their patches come from.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub cube: &'a HsiCube,
    /// Required when the abundance loss weight is positive.
    pub abundances: Option<&'a AbundanceMap>,
    pub indices: &'a [usize],
}

fn check_compat(model: &Model, data: &TrainData, cfg: &TrainConfig) -> Result<()> {
    let mc = &model.config;
    if mc.patch_size != cfg.patch_size || mc.concentration_scale != cfg.concentration_scale {
        return Err(Error::Config(format!(
            "model was built with patch_size={} concentration_scale={}, config has {} and {}",
            mc.patch_size, mc.concentration_scale, cfg.patch_size, cfg.concentration_scale
        )));
    }
    if data.cube.bands() != mc.bands {
        return Err(Error::shape(format!(
            "scene has {} bands, model expects {}",
            data.cube.bands(),
            mc.bands
        )));
    }
    match data.abundances {
        Some(a) if a.k() != mc.k || a.n_pixels() != data.cube.n_pixels() => Err(Error::shape(format!(
            "abundance map is {}x{}x{}, model has K={} and the cube {}x{}",
            a.height(),
            a.width(),
            a.k(),
            mc.k,
            data.cube.height(),
            data.cube.width()
        ))),
        None if cfg.abundance_loss_weight > 0.0 => Err(Error::Config(
            "abundance_loss_weight > 0 needs ground-truth abundances".into(),
        )),
        _ => Ok(()),
    }
}

/// Trains `model` in place with Adam. Returns the per-epoch loss trace.
///
/// The shuffle order and the sampling noise come from two separate streams
/// of `cfg.seed`, so a run is a pure function of its inputs. A batch too
/// small for batch statistics (one pixel with `P = 1`) is skipped. Any
/// non-finite loss term aborts with [`Error::NonFinite`], carrying the
/// zero-based optimizer step.
pub fn train(model: &mut Model, data: &TrainData, cfg: &TrainConfig) -> Result<LossTrace> {
    cfg.validate()?;
    check_compat(model, data, cfg)?;
    let k = model.config.k;
    let p = cfg.patch_size;
    let objective = Objective::from_config(cfg, k)?;
    let labels = if cfg.abundance_loss_weight > 0.0 { data.abundances } else { None };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(STREAM_SHUFFLE);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(STREAM_NOISE);

    let mut adam = AdamState::for_tensors(model.tensors_mut().into_iter().map(|t| &*t));
    let mut order = data.indices.to_vec();
    let mut trace = LossTrace::default();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossValues::default();
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() * p * p < 2 {
                continue;
            }
            let batch = Batch::from_pixels(data.cube, labels, p, chunk)?;
            let noise = draw_noise(&mut noise_rng, cfg.mc_samples, chunk.len(), k);
            let (values, grads) = loss_and_grads(model, &batch, &noise, &objective, true)?;
            values.check_finite(step)?;
            adam_step(&mut model.tensors_mut(), &grads, &mut adam, cfg.learning_rate)?;
            step += 1;
            let w = chunk.len() as f64;
            sum.total += w * values.total;
            sum.recon += w * values.recon;
            sum.kl += w * values.kl;
            sum.abundance_mse += w * values.abundance_mse;
            seen += chunk.len();
        }
        if seen > 0 {
            let n = seen as f64;
            let values = LossValues {
                total: sum.total / n,
                recon: sum.recon / n,
                kl: sum.kl / n,
                abundance_mse: sum.abundance_mse / n,
            };
            log::info!(
                "epoch {epoch}: total {:.6} recon {:.6} kl {:.6} abundance_mse {:.6}",
                values.total,
                values.recon,
                values.kl,
                values.abundance_mse
            );
            trace.epochs.push(EpochLoss { epoch, values });
        }
    }
    Ok(trace)
}

/// Result of [`train_scene`].
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub model: Model,
    pub trace: LossTrace,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Splits the scene pixels, initializes a model from `cfg.seed` and trains
/// on the training part.
pub fn train_scene(cube: &HsiCube, abundances: Option<&AbundanceMap>, k: usize, cfg: &TrainConfig) -> Result<TrainedRun> {
    cfg.validate()?;
    let (train_idx, test_idx) = split(cube.n_pixels(), cfg.train_fraction, cfg.split_seed)?;
    let mut model = Model::new(cfg.model_config(k, cube.bands()), cfg.seed)?;
    let data = TrainData {
        cube,
        abundances,
        indices: &train_idx,
    };
    let trace = train(&mut model, &data, cfg)?;
    Ok(TrainedRun {
        model,
        trace,
        train_indices: train_idx,
        test_indices: test_idx,
    })
}
