//! DDPM co-speech gesture generator: forward noising, denoiser training
//! with condition masking, and ancestral sampling with classifier-free
//! guidance, over 2D or 3D pose sequences.
//!
//! The denoiser is a small attention stack over frames. Per-frame input is
//! the noisy pose concatenated with the encoded speech condition and a
//! sinusoidal embedding of the diffusion step. During training the
//! condition is replaced with a learned null embedding with probability
//! `p_uncond`; at sampling time the same null embedding drives the
//! unconditional branch of the guidance formula
//! `eps_hat = (1 + w) * eps_cond - w * eps_uncond`.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    adam_step, params_from_bytes, params_to_bytes, AdamConfig, AdamState, Activation, GradStore,
    LayerSpec, ModelParams, Network, NnError, PaddingMode, Tensor,
};
use crate::seeds::{self, domain};
use crate::skeleton::PoseSequence;
use crate::synth::{GestureDataset, SpeechTrack};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("diffusion step {t} out of range for {total} steps")]
    StepOutOfRange { t: usize, total: usize },
    #[error("sampling noise must be zero at the final step")]
    NoiseAtFinalStep,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("generator dims {config} do not match dataset dims {data}")]
    DimensionMismatch { config: usize, data: usize },
    #[error("speech track has {got} frames, generator expects {expected}")]
    FrameMismatch { expected: usize, got: usize },
    #[error("training loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Noise-schedule constants for `T` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Builds a schedule from raw per-step betas, validating the type
    /// invariants: every beta in (0,1), strictly decreasing alpha_bar, and
    /// a terminal marginal close to the standard normal
    /// (`alpha_bar[T-1] < 0.01`).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self, DiffusionError> {
        if beta.is_empty() {
            return Err(DiffusionError::InvalidSchedule("empty beta list".into()));
        }
        let mut alpha = Vec::with_capacity(beta.len());
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for (t, &b) in beta.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(DiffusionError::InvalidSchedule(format!(
                    "beta[{t}] = {b} outside (0,1)"
                )));
            }
            let a = 1.0 - b;
            prod *= a;
            alpha.push(a);
            alpha_bar.push(prod);
        }
        let last = *alpha_bar.last().expect("non-empty");
        if last >= 0.01 {
            return Err(DiffusionError::InvalidSchedule(format!(
                "terminal alpha_bar {last:.4} >= 0.01; add steps or enlarge betas"
            )));
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    /// Linear schedule between explicit endpoints.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if t_steps == 0 {
            return Err(DiffusionError::InvalidSchedule("t_steps must be >= 1".into()));
        }
        let beta = (0..t_steps)
            .map(|t| {
                let frac = if t_steps == 1 { 0.0 } else { t as f64 / (t_steps - 1) as f64 };
                beta_start + (beta_end - beta_start) * frac
            })
            .collect();
        Self::from_betas(beta)
    }

    /// The reference linear schedule (1e-4 to 0.02 over 1000 steps) with
    /// endpoints scaled by `1000 / t_steps`, so shorter desk-scale chains
    /// keep a near-standard-normal terminal marginal.
    pub fn linear_scaled(t_steps: usize) -> Result<Self, DiffusionError> {
        let scale = 1000.0 / t_steps as f64;
        let beta_end = 0.02 * scale;
        if beta_end >= 1.0 {
            return Err(DiffusionError::InvalidSchedule(format!(
                "t_steps = {t_steps} too small for the scaled linear schedule"
            )));
        }
        Self::linear(t_steps, 1e-4 * scale, beta_end)
    }

    /// Betas linear in sqrt space (quadratic ramp), calibrated per `T` so
    /// the terminal marginal stays near standard normal while the
    /// low-noise end of the chain injects far less per-step noise than a
    /// plain scaled-linear ramp. With the fixed `sigma_t = sqrt(beta_t)`
    /// sampler this keeps short chains from leaving high-frequency jitter
    /// in the final samples.
    pub fn quadratic_scaled(t_steps: usize) -> Result<Self, DiffusionError> {
        let t = t_steps as f64;
        let beta_lo = 1e-4 * (100.0 / t) * (100.0 / t);
        let beta_hi = 36.0 / t;
        if beta_hi >= 1.0 {
            return Err(DiffusionError::InvalidSchedule(format!(
                "t_steps = {t_steps} too small for the quadratic schedule"
            )));
        }
        let lo = beta_lo.sqrt();
        let hi = beta_hi.sqrt();
        let beta = (0..t_steps)
            .map(|i| {
                let frac = if t_steps == 1 { 0.0 } else { i as f64 / (t_steps - 1) as f64 };
                let root = lo + (hi - lo) * frac;
                root * root
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t >= self.len() {
            return Err(DiffusionError::StepOutOfRange { t, total: self.len() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Quadratic beta ramp calibrated per `T` (default).
    QuadraticScaled,
    /// Reference linear endpoints scaled by `1000 / T`.
    LinearScaled,
    Linear { beta_start: f64, beta_end: f64 },
}

impl ScheduleKind {
    pub fn build(&self, t_steps: usize) -> Result<DiffusionSchedule, DiffusionError> {
        match *self {
            ScheduleKind::QuadraticScaled => DiffusionSchedule::quadratic_scaled(t_steps),
            ScheduleKind::LinearScaled => DiffusionSchedule::linear_scaled(t_steps),
            ScheduleKind::Linear { beta_start, beta_end } => {
                DiffusionSchedule::linear(t_steps, beta_start, beta_end)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Output dimensionality: 2 or 3.
    pub dims: usize,
    /// Probability of masking the speech condition during training.
    /// 1.0 trains the fully unconditional ablation.
    pub p_uncond: f64,
    /// Classifier-free guidance weight `w` used at sampling time.
    pub guidance_weight: f64,
    pub t_steps: usize,
    pub schedule: ScheduleKind,
    pub model_dim: usize,
    pub attention_blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Kernel size of the temporal conv stages flanking the attention
    /// stack; 0 disables them.
    pub conv_kernel: usize,
    pub cond_dim: usize,
    pub time_embed_dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_steps: usize,
    /// Renormalize generated 3D bone vectors to unit length.
    pub renormalize_3d: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            dims: 3,
            p_uncond: 0.1,
            guidance_weight: 1.0,
            t_steps: 100,
            schedule: ScheduleKind::LinearScaled,
            model_dim: 32,
            attention_blocks: 2,
            heads: 2,
            mlp_hidden: 64,
            conv_kernel: 5,
            cond_dim: 8,
            time_embed_dim: 8,
            lr: 2e-3,
            batch_size: 16,
            train_steps: 2500,
            renormalize_3d: true,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.dims != 2 && self.dims != 3 {
            return Err(DiffusionError::InvalidConfig(format!(
                "dims must be 2 or 3, got {}",
                self.dims
            )));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(DiffusionError::InvalidConfig(format!(
                "p_uncond must lie in [0,1], got {}",
                self.p_uncond
            )));
        }
        if self.guidance_weight < 0.0 {
            return Err(DiffusionError::InvalidConfig(format!(
                "guidance_weight must be >= 0, got {}",
                self.guidance_weight
            )));
        }
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(DiffusionError::InvalidConfig(
                "model_dim must be positive and divisible by heads".into(),
            ));
        }
        if self.cond_dim == 0 || self.time_embed_dim == 0 || self.batch_size == 0 {
            return Err(DiffusionError::InvalidConfig(
                "cond_dim, time_embed_dim and batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn denoiser_specs(&self, pose_width: usize) -> Vec<LayerSpec> {
        let in_width = pose_width + self.cond_dim + self.time_embed_dim;
        let d = self.model_dim;
        let mut specs = vec![LayerSpec::Dense { in_width, out_width: d }];
        // temporal conv stages give the denoiser direct access to
        // frame-to-frame differences, which carry most of the low-noise
        // signal in smooth motion data
        if self.conv_kernel > 0 {
            specs.push(LayerSpec::Conv1d {
                in_channels: d,
                out_channels: d,
                kernel_size: self.conv_kernel,
                dilation: 1,
                padding: PaddingMode::Edge,
            });
            specs.push(LayerSpec::Activation { function: Activation::Gelu });
        }
        for _ in 0..self.attention_blocks {
            specs.push(LayerSpec::AttentionBlock {
                model_dim: d,
                heads: self.heads,
                mlp_hidden: self.mlp_hidden,
            });
        }
        if self.conv_kernel > 0 {
            specs.push(LayerSpec::Conv1d {
                in_channels: d,
                out_channels: d,
                kernel_size: self.conv_kernel,
                dilation: 1,
                padding: PaddingMode::Edge,
            });
            specs.push(LayerSpec::Activation { function: Activation::Gelu });
        }
        specs.push(LayerSpec::LayerNorm { width: d });
        specs.push(LayerSpec::Dense { in_width: d, out_width: pose_width });
        specs
    }

    fn cond_specs(&self, feature_dim: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv1d {
                in_channels: feature_dim,
                out_channels: self.cond_dim,
                kernel_size: 3,
                dilation: 1,
                padding: PaddingMode::Zero,
            },
            LayerSpec::Activation { function: Activation::Relu },
            LayerSpec::Conv1d {
                in_channels: self.cond_dim,
                out_channels: self.cond_dim,
                kernel_size: 3,
                dilation: 1,
                padding: PaddingMode::Zero,
            },
        ]
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub heldout_initial: f64,
    pub heldout_final: f64,
    pub masked_fraction: f64,
}

/// A trained DDPM gesture generator.
#[derive(Debug, Clone)]
pub struct TrainedGenerator {
    pub config: GeneratorConfig,
    pub params: ModelParams,
    pub schedule: DiffusionSchedule,
    pub seq_len: usize,
    pub bone_count: usize,
    pub feature_dim: usize,
    pub fps: f64,
    pub training_log: TrainingSummary,
}

const NULL_EMBED: &str = "null_embed";

fn build_networks(
    config: &GeneratorConfig,
    pose_width: usize,
    feature_dim: usize,
) -> Result<(Network, Network), DiffusionError> {
    let denoiser = Network::new(
        "denoiser",
        pose_width + config.cond_dim + config.time_embed_dim,
        config.denoiser_specs(pose_width),
    )?;
    let cond = Network::new("cond", feature_dim, config.cond_specs(feature_dim))?;
    Ok((denoiser, cond))
}

/// Sinusoidal embedding of the diffusion step index.
fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (j, slot) in out.iter_mut().enumerate() {
        let pair = (j / 2) as f64;
        let freq = (10_000.0f64).powf(-2.0 * pair / dim as f64);
        let angle = t as f64 * freq;
        *slot = if j % 2 == 0 { angle.sin() } else { angle.cos() };
    }
    out
}

fn assemble_input(x_t: &Tensor, cond: &Tensor, t_embed: &[f64]) -> Tensor {
    let frames = x_t.shape()[0];
    let pose_w = x_t.shape()[1];
    let cond_w = cond.shape()[1];
    let total = pose_w + cond_w + t_embed.len();
    let mut data = Vec::with_capacity(frames * total);
    for f in 0..frames {
        data.extend_from_slice(x_t.row(f));
        data.extend_from_slice(cond.row(f));
        data.extend_from_slice(t_embed);
    }
    Tensor::new(vec![frames, total], data).expect("assembled shape consistent")
}

fn broadcast_null(params: &ModelParams, frames: usize) -> Result<Tensor, DiffusionError> {
    let null = params.get(NULL_EMBED)?;
    let dim = null.len();
    let mut data = Vec::with_capacity(frames * dim);
    for _ in 0..frames {
        data.extend_from_slice(null.data());
    }
    Ok(Tensor::new(vec![frames, dim], data)?)
}

fn speech_tensor(speech: &SpeechTrack) -> Tensor {
    Tensor::new(
        vec![speech.frames(), speech.feature_dim()],
        speech.features().to_vec(),
    )
    .expect("speech track layout consistent")
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("randn shape consistent")
}

/// Closed-form forward noising: `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_sample(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &DiffusionSchedule,
) -> Result<Tensor, DiffusionError> {
    schedule.check_step(t)?;
    if !x0.same_shape(eps) {
        return Err(DiffusionError::ShapeMismatch(format!(
            "x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let s0 = ab.sqrt();
    let s1 = (1.0 - ab).sqrt();
    let data = x0
        .data()
        .iter()
        .zip(eps.data().iter())
        .map(|(x, e)| s0 * x + s1 * e)
        .collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// Classifier-free guidance: `(1 + w) eps_cond - w eps_uncond`.
pub fn guided_eps(
    eps_cond: &Tensor,
    eps_uncond: &Tensor,
    w: f64,
) -> Result<Tensor, DiffusionError> {
    if !eps_cond.same_shape(eps_uncond) {
        return Err(DiffusionError::ShapeMismatch(format!(
            "eps_cond {:?} vs eps_uncond {:?}",
            eps_cond.shape(),
            eps_uncond.shape()
        )));
    }
    let data = eps_cond
        .data()
        .iter()
        .zip(eps_uncond.data().iter())
        .map(|(c, u)| (1.0 + w) * c - w * u)
        .collect();
    Ok(Tensor::new(eps_cond.shape().to_vec(), data)?)
}

/// One ancestral sampling step with fixed posterior variance
/// `sigma_t^2 = beta_t`. `z` must be identically zero at `t = 0`.
pub fn sample_step(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    schedule: &DiffusionSchedule,
    z: &Tensor,
) -> Result<Tensor, DiffusionError> {
    schedule.check_step(t)?;
    if !x_t.same_shape(eps_hat) || !x_t.same_shape(z) {
        return Err(DiffusionError::ShapeMismatch(format!(
            "x_t {:?}, eps_hat {:?}, z {:?}",
            x_t.shape(),
            eps_hat.shape(),
            z.shape()
        )));
    }
    if t == 0 && z.data().iter().any(|&v| v != 0.0) {
        return Err(DiffusionError::NoiseAtFinalStep);
    }
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let sigma = schedule.beta(t).sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data().iter())
        .zip(z.data().iter())
        .map(|((x, e), zz)| inv_sqrt_alpha * (x - coef * e) + sigma * zz)
        .collect();
    Ok(Tensor::new(x_t.shape().to_vec(), data)?)
}

fn mse(pred: &Tensor, target: &Tensor) -> f64 {
    debug_assert!(pred.same_shape(target));
    let n = pred.len() as f64;
    pred.data()
        .iter()
        .zip(target.data().iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

struct HeldoutDraw {
    t: usize,
    eps: Tensor,
}

fn heldout_draws(
    indices: &[usize],
    frames: usize,
    pose_width: usize,
    t_steps: usize,
    seed: u64,
) -> Vec<HeldoutDraw> {
    indices
        .iter()
        .map(|&i| {
            let mut rng = seeds::substream(seed, domain::HELDOUT, i as u64);
            let t = rng.gen_range(0..t_steps);
            let eps = randn(&[frames, pose_width], &mut rng);
            HeldoutDraw { t, eps }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn heldout_loss(
    denoiser: &Network,
    cond_net: &Network,
    params: &ModelParams,
    config: &GeneratorConfig,
    schedule: &DiffusionSchedule,
    dataset: &GestureDataset,
    indices: &[usize],
    draws: &[HeldoutDraw],
) -> Result<f64, DiffusionError> {
    let mut total = 0.0;
    for (&i, draw) in indices.iter().zip(draws.iter()) {
        let (pose, speech) = &dataset.pairs[i];
        let x0 = Tensor::new(
            vec![pose.frames(), pose.bone_count() * pose.dims()],
            pose.data().to_vec(),
        )?;
        let x_t = forward_sample(&x0, draw.t, &draw.eps, schedule)?;
        let cond = if config.p_uncond >= 1.0 {
            broadcast_null(params, pose.frames())?
        } else {
            cond_net.forward(params, &speech_tensor(speech))?
        };
        let input = assemble_input(&x_t, &cond, &time_embedding(draw.t, config.time_embed_dim));
        let pred = denoiser.forward(params, &input)?;
        total += mse(&pred, &draw.eps);
    }
    Ok(total / indices.len().max(1) as f64)
}

/// Trains a generator on a corpus whose dims match the config.
pub fn train(
    dataset: &GestureDataset,
    config: &GeneratorConfig,
) -> Result<TrainedGenerator, DiffusionError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    if dataset.dims != config.dims {
        return Err(DiffusionError::DimensionMismatch { config: config.dims, data: dataset.dims });
    }
    let pose_width = dataset.bone_count * dataset.dims;
    let feature_dim = dataset.pairs[0].1.feature_dim();
    let frames = dataset.seq_len;
    let (denoiser, cond_net) = build_networks(config, pose_width, feature_dim)?;

    let mut params = ModelParams::new(config.seed);
    let mut rng_init = seeds::substream(config.seed, domain::INIT, 0);
    denoiser.init_params(&mut params, &mut rng_init)?;
    cond_net.init_params(&mut params, &mut rng_init)?;
    let bound = (1.0 / config.cond_dim as f64).sqrt();
    let null = Tensor::new(
        vec![config.cond_dim],
        (0..config.cond_dim).map(|_| rng_init.gen_range(-bound..bound)).collect(),
    )?;
    params.insert(NULL_EMBED, null)?;

    let schedule = config.schedule.build(config.t_steps)?;

    // Held-out tail for before/after denoising loss, when the corpus is
    // large enough to spare it.
    let n = dataset.len();
    let held_n = (n / 10).clamp(1, 64);
    let (train_indices, held_indices): (Vec<usize>, Vec<usize>) = if n >= 4 {
        ((0..n - held_n).collect(), (n - held_n..n).collect())
    } else {
        ((0..n).collect(), (0..n).collect())
    };
    let draws = heldout_draws(&held_indices, frames, pose_width, config.t_steps, config.seed);
    let heldout_initial = heldout_loss(
        &denoiser, &cond_net, &params, config, &schedule, dataset, &held_indices, &draws,
    )?;

    let mut rng_train = seeds::substream(config.seed, domain::TRAIN, 0);
    let mut adam = AdamState::new();
    let adam_cfg = AdamConfig::with_lr(config.lr);
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut masked_count = 0usize;
    let mut element_count = 0usize;

    for step in 0..config.train_steps {
        let mut grads = GradStore::new();
        let mut batch_loss = 0.0;
        for _ in 0..config.batch_size {
            let idx = train_indices[rng_train.gen_range(0..train_indices.len())];
            let (pose, speech) = &dataset.pairs[idx];
            let t = rng_train.gen_range(0..config.t_steps);
            let eps = randn(&[frames, pose_width], &mut rng_train);
            let x0 = Tensor::new(vec![frames, pose_width], pose.data().to_vec())?;
            let x_t = forward_sample(&x0, t, &eps, &schedule)?;

            let masked = rng_train.gen::<f64>() < config.p_uncond;
            let (cond, cond_trace) = if masked {
                masked_count += 1;
                (broadcast_null(&params, frames)?, None)
            } else {
                let (c, tr) = cond_net.forward_traced(&params, &speech_tensor(speech))?;
                (c, Some(tr))
            };
            element_count += 1;

            let input = assemble_input(&x_t, &cond, &time_embedding(t, config.time_embed_dim));
            let (pred, trace) = denoiser.forward_traced(&params, &input)?;
            batch_loss += mse(&pred, &eps);

            // d(MSE)/d(pred), averaged over the batch
            let scale = 2.0 / (pred.len() as f64 * config.batch_size as f64);
            let dpred = Tensor::new(
                pred.shape().to_vec(),
                pred.data()
                    .iter()
                    .zip(eps.data().iter())
                    .map(|(p, e)| scale * (p - e))
                    .collect(),
            )?;
            let dinput = denoiser.backward(&params, &trace, &dpred, &mut grads)?;

            // Condition gradient: columns [pose_width, pose_width + cond_dim)
            let mut dcond = Tensor::zeros(&[frames, config.cond_dim]);
            for f in 0..frames {
                let src = &dinput.row(f)[pose_width..pose_width + config.cond_dim];
                dcond.row_mut(f).copy_from_slice(src);
            }
            match cond_trace {
                Some(tr) => {
                    cond_net.backward(&params, &tr, &dcond, &mut grads)?;
                }
                None => {
                    let mut dnull = Tensor::zeros(&[config.cond_dim]);
                    for f in 0..frames {
                        for (j, &g) in dcond.row(f).iter().enumerate() {
                            dnull.data_mut()[j] += g;
                        }
                    }
                    grads.accumulate(NULL_EMBED, dnull)?;
                }
            }
        }
        batch_loss /= config.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(DiffusionError::NonFiniteLoss { step });
        }
        if step == 0 {
            initial_loss = batch_loss;
        }
        final_loss = batch_loss;
        adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
    }

    let heldout_final = heldout_loss(
        &denoiser, &cond_net, &params, config, &schedule, dataset, &held_indices, &draws,
    )?;
    let masked_fraction =
        if element_count == 0 { 0.0 } else { masked_count as f64 / element_count as f64 };

    Ok(TrainedGenerator {
        config: config.clone(),
        params,
        schedule,
        seq_len: frames,
        bone_count: dataset.bone_count,
        feature_dim,
        fps: dataset.fps,
        training_log: TrainingSummary {
            steps: config.train_steps,
            initial_loss,
            final_loss,
            heldout_initial,
            heldout_final,
            masked_fraction,
        },
    })
}

impl TrainedGenerator {
    fn networks(&self) -> Result<(Network, Network), DiffusionError> {
        build_networks(&self.config, self.bone_count * self.config.dims, self.feature_dim)
    }

    /// Generates `count` pose sequences conditioned on `speech`. Each
    /// sequence runs its own seeded noise chain, so results do not depend
    /// on evaluation order. With `p_uncond = 1` the condition pathway is
    /// replaced by the null embedding and outputs are independent of the
    /// speech input.
    pub fn generate(
        &self,
        speech: &SpeechTrack,
        count: usize,
        seed: u64,
    ) -> Result<Vec<PoseSequence>, DiffusionError> {
        if speech.frames() != self.seq_len {
            return Err(DiffusionError::FrameMismatch {
                expected: self.seq_len,
                got: speech.frames(),
            });
        }
        if speech.feature_dim() != self.feature_dim {
            return Err(DiffusionError::ShapeMismatch(format!(
                "speech feature_dim {} does not match generator {}",
                speech.feature_dim(),
                self.feature_dim
            )));
        }
        let (denoiser, cond_net) = self.networks()?;
        let unconditional = self.config.p_uncond >= 1.0;
        let cond = if unconditional {
            broadcast_null(&self.params, self.seq_len)?
        } else {
            cond_net.forward(&self.params, &speech_tensor(speech))?
        };
        let use_guidance = !unconditional && self.config.guidance_weight > 0.0;
        let null_cond = if use_guidance {
            Some(broadcast_null(&self.params, self.seq_len)?)
        } else {
            None
        };
        let mut out = Vec::with_capacity(count);
        for chain in 0..count as u64 {
            out.push(self.sample_chain(&denoiser, &cond, null_cond.as_ref(), seed, chain)?);
        }
        Ok(out)
    }

    fn sample_chain(
        &self,
        denoiser: &Network,
        cond: &Tensor,
        null_cond: Option<&Tensor>,
        seed: u64,
        chain: u64,
    ) -> Result<PoseSequence, DiffusionError> {
        let pose_width = self.bone_count * self.config.dims;
        let mut rng = seeds::substream(seed, domain::SAMPLE, chain);
        let mut x = randn(&[self.seq_len, pose_width], &mut rng);
        for t in (0..self.schedule.len()).rev() {
            let t_embed = time_embedding(t, self.config.time_embed_dim);
            let input = assemble_input(&x, cond, &t_embed);
            let eps_cond = denoiser.forward(&self.params, &input)?;
            let eps_hat = match null_cond {
                Some(null) => {
                    let input_u = assemble_input(&x, null, &t_embed);
                    let eps_uncond = denoiser.forward(&self.params, &input_u)?;
                    guided_eps(&eps_cond, &eps_uncond, self.config.guidance_weight)?
                }
                None => eps_cond,
            };
            let z = if t > 0 {
                randn(&[self.seq_len, pose_width], &mut rng)
            } else {
                Tensor::zeros(&[self.seq_len, pose_width])
            };
            x = sample_step(&x, t, &eps_hat, &self.schedule, &z)?;
        }
        let mut pose = PoseSequence::new(
            self.seq_len,
            self.bone_count,
            self.config.dims,
            self.fps,
            x.into_data(),
        )
        .map_err(|e| DiffusionError::ShapeMismatch(e.to_string()))?;
        if self.config.dims == 3 && self.config.renormalize_3d {
            pose.renormalize();
        }
        Ok(pose)
    }

    /// Serialized parameter bytes (checkpoint payload).
    pub fn params_bytes(&self) -> Result<Vec<u8>, DiffusionError> {
        Ok(params_to_bytes(&self.params)?)
    }

    /// Writes `<base>.ckpt` plus a `<base>.json` sidecar with the config
    /// and schedule constants.
    pub fn save(&self, base: &Path) -> Result<(), DiffusionError> {
        fs::write(base.with_extension("ckpt"), self.params_bytes()?)?;
        let sidecar = GeneratorSidecar {
            config: self.config.clone(),
            seq_len: self.seq_len,
            bone_count: self.bone_count,
            feature_dim: self.feature_dim,
            fps: self.fps,
            beta: self.schedule.betas().to_vec(),
            training_log: self.training_log.clone(),
        };
        let text = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| DiffusionError::Checkpoint(e.to_string()))?;
        fs::write(base.with_extension("json"), text + "\n")?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self, DiffusionError> {
        let bytes = fs::read(base.with_extension("ckpt"))?;
        let mut params = params_from_bytes(&bytes)?;
        let text = fs::read_to_string(base.with_extension("json"))?;
        let sidecar: GeneratorSidecar =
            serde_json::from_str(&text).map_err(|e| DiffusionError::Checkpoint(e.to_string()))?;
        params.set_init_seed(sidecar.config.seed);
        Ok(Self {
            schedule: DiffusionSchedule::from_betas(sidecar.beta)?,
            config: sidecar.config,
            params,
            seq_len: sidecar.seq_len,
            bone_count: sidecar.bone_count,
            feature_dim: sidecar.feature_dim,
            fps: sidecar.fps,
            training_log: sidecar.training_log,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GeneratorSidecar {
    config: GeneratorConfig,
    seq_len: usize,
    bone_count: usize,
    feature_dim: usize,
    fps: f64,
    beta: Vec<f64>,
    training_log: TrainingSummary,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::SkeletonTopology;
    use crate::synth::{self, SynthConfig};

    fn tiny_dataset(dims: usize, n: usize, seed: u64) -> GestureDataset {
        let topo = SkeletonTopology::new(vec![None, Some(0)]).unwrap(); // 1 bone
        let config = SynthConfig { num_sequences: n, seq_len: 8, ..SynthConfig::default() };
        let data = synth::generate(&config, &topo, seed).unwrap();
        if dims == 2 {
            data.project_2d().unwrap()
        } else {
            data
        }
    }

    fn tiny_config(dims: usize, steps: usize) -> GeneratorConfig {
        GeneratorConfig {
            dims,
            t_steps: 30,
            model_dim: 8,
            attention_blocks: 1,
            heads: 2,
            mlp_hidden: 16,
            cond_dim: 4,
            time_embed_dim: 4,
            batch_size: 4,
            train_steps: steps,
            seed: 7,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn schedule_invariants_hold() {
        let s = DiffusionSchedule::linear_scaled(100).unwrap();
        assert_eq!(s.len(), 100);
        for t in 1..s.len() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(99) < 0.01);
        // the unscaled endpoints over a short chain fail the terminal invariant
        assert!(matches!(
            DiffusionSchedule::linear(100, 1e-4, 0.02),
            Err(DiffusionError::InvalidSchedule(_))
        ));
        assert!(DiffusionSchedule::linear(1000, 1e-4, 0.02).is_ok());
    }

    #[test]
    fn forward_sample_matches_closed_form() {
        // beta_0 = 0.75 makes alpha_bar(0) = 0.25
        let s = DiffusionSchedule::from_betas(vec![0.75, 0.9, 0.9, 0.9]).unwrap();
        assert!((s.alpha_bar(0) - 0.25).abs() < 1e-15);
        let x0 = Tensor::from_vec(vec![1.0]);
        let eps = Tensor::from_vec(vec![2.0]);
        let xt = forward_sample(&x0, 0, &eps, &s).unwrap();
        assert!((xt.data()[0] - (0.5 + 0.75f64.sqrt() * 2.0)).abs() < 1e-12);

        // eps = 0 gives exactly sqrt(alpha_bar) * x0
        let zero = Tensor::from_vec(vec![0.0]);
        let xt = forward_sample(&x0, 1, &zero, &s).unwrap();
        assert_eq!(xt.data()[0], s.alpha_bar(1).sqrt());

        assert!(matches!(
            forward_sample(&x0, 4, &eps, &s),
            Err(DiffusionError::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn guided_eps_anchors() {
        let c = Tensor::from_vec(vec![1.0, -0.5]);
        let u = Tensor::from_vec(vec![0.0, -0.5]);
        // w = 0 returns eps_cond
        assert_eq!(guided_eps(&c, &u, 0.0).unwrap().data(), c.data());
        // agreement case: identical inputs for any w
        assert_eq!(guided_eps(&c, &c, 3.7).unwrap().data(), c.data());
        // formula evaluation
        let g = guided_eps(&c, &u, 2.0).unwrap();
        assert!((g.data()[0] - 3.0).abs() < 1e-15);
        let bad = Tensor::from_vec(vec![1.0]);
        assert!(matches!(
            guided_eps(&c, &bad, 1.0),
            Err(DiffusionError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn sample_step_formula_and_final_step_guard() {
        let s = DiffusionSchedule::from_betas(vec![0.01, 0.9, 0.9, 0.9]).unwrap();
        let x = Tensor::from_vec(vec![1.0]);
        let eps0 = Tensor::from_vec(vec![0.0]);
        let z0 = Tensor::from_vec(vec![0.0]);
        let prev = sample_step(&x, 0, &eps0, &s, &z0).unwrap();
        assert!((prev.data()[0] - 1.0 / 0.99f64.sqrt()).abs() < 1e-12);

        // beta -> 0 limit leaves x unchanged
        let s_small = DiffusionSchedule::from_betas(vec![1e-12, 0.9, 0.9, 0.9]).unwrap();
        let prev = sample_step(&x, 0, &eps0, &s_small, &z0).unwrap();
        assert!((prev.data()[0] - 1.0).abs() < 1e-9);

        let z_bad = Tensor::from_vec(vec![0.5]);
        assert!(matches!(
            sample_step(&x, 0, &eps0, &s, &z_bad),
            Err(DiffusionError::NoiseAtFinalStep)
        ));
        assert!(sample_step(&x, 1, &eps0, &s, &z_bad).is_ok());
    }

    #[test]
    fn forward_marginal_moments_at_terminal_step() {
        // At t = T-1 with alpha_bar ~ 0 the marginal is ~ N(0,1).
        let s = DiffusionSchedule::linear_scaled(50).unwrap();
        let t = s.len() - 1;
        let x0 = Tensor::from_vec(vec![0.7]); // fixed data point
        let mut rng = seeds::substream(1, domain::SAMPLE, 0);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let eps = randn(&[1], &mut rng);
            let xt = forward_sample(&x0, t, &eps, &s).unwrap();
            sum += xt.data()[0];
            sumsq += xt.data()[0] * xt.data()[0];
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let se_mean = (1.0 / n as f64).sqrt();
        let se_var = (2.0 / n as f64).sqrt();
        let mean_shift = s.alpha_bar(t).sqrt() * 0.7;
        assert!((mean - mean_shift).abs() < 4.0 * se_mean, "mean {mean}");
        assert!((var - 1.0).abs() < 4.0 * se_var + s.alpha_bar(t), "var {var}");
    }

    #[test]
    fn perfect_eps_prediction_has_zero_loss() {
        let eps = Tensor::from_vec(vec![0.3, -0.7, 1.2]);
        assert_eq!(mse(&eps, &eps), 0.0);
    }

    #[test]
    fn p_uncond_one_masks_every_batch_element() {
        let data = tiny_dataset(3, 6, 1);
        let config = GeneratorConfig { p_uncond: 1.0, ..tiny_config(3, 20) };
        let gen = train(&data, &config).unwrap();
        assert_eq!(gen.training_log.masked_fraction, 1.0);
    }

    #[test]
    fn training_reduces_heldout_loss() {
        let data = tiny_dataset(3, 12, 3);
        let gen = train(&data, &tiny_config(3, 400)).unwrap();
        assert!(
            gen.training_log.heldout_final < gen.training_log.heldout_initial,
            "held-out loss did not improve: {} -> {}",
            gen.training_log.heldout_initial,
            gen.training_log.heldout_final
        );
    }

    #[test]
    fn dims_mismatch_is_rejected() {
        let data = tiny_dataset(2, 4, 1);
        assert!(matches!(
            train(&data, &tiny_config(3, 5)),
            Err(DiffusionError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn unconditional_generation_ignores_speech() {
        let data = tiny_dataset(3, 6, 5);
        let config = GeneratorConfig { p_uncond: 1.0, ..tiny_config(3, 30) };
        let gen = train(&data, &config).unwrap();
        let speech_a = &data.pairs[0].1;
        let speech_b = &data.pairs[1].1;
        assert_ne!(speech_a.features(), speech_b.features());
        let out_a = gen.generate(speech_a, 3, 99).unwrap();
        let out_b = gen.generate(speech_b, 3, 99).unwrap();
        assert_eq!(out_a, out_b);
    }

    #[test]
    fn generation_is_deterministic_and_respects_count() {
        let data = tiny_dataset(3, 6, 8);
        let gen = train(&data, &tiny_config(3, 30)).unwrap();
        let speech = &data.pairs[0].1;
        assert!(gen.generate(speech, 0, 1).unwrap().is_empty());
        let a = gen.generate(speech, 2, 42).unwrap();
        let b = gen.generate(speech, 2, 42).unwrap();
        assert_eq!(a, b);
        // frame mismatch is rejected
        let bad = SpeechTrack::new(
            9,
            speech.feature_dim(),
            vec![0.0; 9 * speech.feature_dim()],
            vec![],
            15.0,
        )
        .unwrap();
        assert!(matches!(
            gen.generate(&bad, 1, 0),
            Err(DiffusionError::FrameMismatch { .. })
        ));
    }

    #[test]
    fn uncond_sampling_path_matches_manual_ancestral_oracle() {
        // For a p_uncond = 1 generator, generate() must equal a hand-rolled
        // unconditional ancestral DDPM loop over the same substreams.
        let data = tiny_dataset(3, 4, 11);
        let config = GeneratorConfig { p_uncond: 1.0, ..tiny_config(3, 10) };
        let gen = train(&data, &config).unwrap();
        let speech = &data.pairs[0].1;
        let ours = gen.generate(speech, 1, 123).unwrap();

        let (denoiser, _) = build_networks(&config, 3, gen.feature_dim).unwrap();
        let mut rng = seeds::substream(123, domain::SAMPLE, 0);
        let mut x = randn(&[gen.seq_len, 3], &mut rng);
        let null = broadcast_null(&gen.params, gen.seq_len).unwrap();
        for t in (0..gen.schedule.len()).rev() {
            let input = assemble_input(&x, &null, &time_embedding(t, config.time_embed_dim));
            let eps = denoiser.forward(&gen.params, &input).unwrap();
            let z = if t > 0 {
                randn(&[gen.seq_len, 3], &mut rng)
            } else {
                Tensor::zeros(&[gen.seq_len, 3])
            };
            x = sample_step(&x, t, &eps, &gen.schedule, &z).unwrap();
        }
        let mut expected =
            PoseSequence::new(gen.seq_len, 1, 3, gen.fps, x.into_data()).unwrap();
        expected.renormalize();
        assert_eq!(ours[0], expected);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(3, 4, 2);
        let gen = train(&data, &tiny_config(3, 10)).unwrap();
        let base = dir.path().join("gen3d");
        gen.save(&base).unwrap();
        let loaded = TrainedGenerator::load(&base).unwrap();
        assert_eq!(loaded.config, gen.config);
        assert_eq!(loaded.schedule, gen.schedule);
        // f32 storage rounds parameters; sampling must still be deterministic
        let speech = &data.pairs[0].1;
        let a = loaded.generate(speech, 1, 5).unwrap();
        let b = loaded.generate(speech, 1, 5).unwrap();
        assert_eq!(a, b);
    }
}
