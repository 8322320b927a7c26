//! Deterministic 2D-to-3D lifting network: a temporal convolutional stack
//! with dilated kernels, run over an upsampled copy of the input sequence
//! so the receptive field fits inside the window, plus MPJPE evaluation.
//!
//! Lifting is a pure function of the 2D input. Two distinct 3D sequences
//! that share a 2D projection are lifted to the same output, which is the
//! collapse this pipeline is built to measure.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    adam_step, params_from_bytes, params_to_bytes, receptive_field, AdamConfig, AdamState,
    Activation, GradStore, LayerSpec, ModelParams, Network, NnError, PaddingMode, Tensor,
};
use crate::seeds::{self, domain};
use crate::skeleton::{project_2d, PoseSequence, SkeletonError};
use crate::synth::GestureDataset;

use rand::Rng;

#[derive(Debug, Error)]
pub enum LifterError {
    #[error("expected dims={expected}, got dims={got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sequence has {got} bones, lifter expects {expected}")]
    BoneMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid lifter config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// Repeat each frame `factor` times.
    #[default]
    Repeat,
    /// Linear interpolation between consecutive frames.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifterConfig {
    /// (kernel_size, dilation) per temporal conv layer.
    pub conv_stack: Vec<(usize, usize)>,
    pub channels: usize,
    /// Temporal upsampling factor applied before the network.
    pub upsample_factor: usize,
    pub upsample_mode: UpsampleMode,
    pub lr: f64,
    pub batch_size: usize,
    pub train_steps: usize,
    pub seed: u64,
}

impl Default for LifterConfig {
    fn default() -> Self {
        Self {
            conv_stack: vec![(3, 1), (3, 3), (3, 9)],
            channels: 32,
            upsample_factor: 8,
            upsample_mode: UpsampleMode::Repeat,
            lr: 2e-3,
            batch_size: 8,
            train_steps: 1200,
            seed: 0,
        }
    }
}

impl LifterConfig {
    pub fn validate(&self, seq_len: usize) -> Result<(), LifterError> {
        if self.conv_stack.is_empty() {
            return Err(LifterError::InvalidConfig("conv_stack must be non-empty".into()));
        }
        if self.conv_stack.iter().any(|&(k, d)| k == 0 || d == 0) {
            return Err(LifterError::InvalidConfig(
                "kernel sizes and dilations must be >= 1".into(),
            ));
        }
        if self.channels == 0 || self.upsample_factor == 0 || self.batch_size == 0 {
            return Err(LifterError::InvalidConfig(
                "channels, upsample_factor and batch_size must be >= 1".into(),
            ));
        }
        let rf = receptive_field(&self.conv_stack);
        if rf > self.upsample_factor * seq_len {
            log::warn!(
                "lifter receptive field {rf} exceeds upsampled window {}; edge padding will dominate",
                self.upsample_factor * seq_len
            );
        }
        Ok(())
    }

    fn network(&self, bone_count: usize) -> Result<Network, LifterError> {
        let mut specs = Vec::new();
        let mut in_c = bone_count * 2;
        for &(kernel_size, dilation) in &self.conv_stack {
            specs.push(LayerSpec::Conv1d {
                in_channels: in_c,
                out_channels: self.channels,
                kernel_size,
                dilation,
                padding: PaddingMode::Edge,
            });
            specs.push(LayerSpec::Activation { function: Activation::Relu });
            in_c = self.channels;
        }
        specs.push(LayerSpec::Dense { in_width: self.channels, out_width: bone_count * 3 });
        Ok(Network::new("lifter", bone_count * 2, specs)?)
    }
}

/// A trained lifter. The mapping has no sampling path: equal inputs give
/// bitwise-equal outputs.
#[derive(Debug, Clone)]
pub struct TrainedLifter {
    pub config: LifterConfig,
    pub params: ModelParams,
    pub bone_count: usize,
    pub seq_len: usize,
    /// Held-out MPJPE measured through the full lift path.
    pub validation_mpjpe: f64,
}

fn upsample(data: &Tensor, factor: usize, mode: UpsampleMode) -> Tensor {
    let frames = data.shape()[0];
    let width = data.shape()[1];
    if factor == 1 {
        return data.clone();
    }
    let mut out = Tensor::zeros(&[frames * factor, width]);
    match mode {
        UpsampleMode::Repeat => {
            for f in 0..frames {
                for r in 0..factor {
                    out.row_mut(f * factor + r).copy_from_slice(data.row(f));
                }
            }
        }
        UpsampleMode::Linear => {
            for of in 0..frames * factor {
                let pos = of as f64 / factor as f64;
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(frames - 1);
                let frac = pos - lo as f64;
                let row = out.row_mut(of);
                for j in 0..width {
                    row[j] = data.row(lo)[j] * (1.0 - frac) + data.row(hi)[j] * frac;
                }
            }
        }
    }
    out
}

/// Takes the center frame of each upsampled block.
fn downsample(data: &Tensor, factor: usize, frames: usize) -> Tensor {
    if factor == 1 {
        return data.clone();
    }
    let width = data.shape()[1];
    let mut out = Tensor::zeros(&[frames, width]);
    for f in 0..frames {
        out.row_mut(f).copy_from_slice(data.row(f * factor + factor / 2));
    }
    out
}

fn pose_tensor(seq: &PoseSequence) -> Tensor {
    Tensor::new(
        vec![seq.frames(), seq.bone_count() * seq.dims()],
        seq.data().to_vec(),
    )
    .expect("pose layout consistent")
}

/// Mean per-joint positional error: the average Euclidean distance between
/// corresponding directional vectors.
pub fn mpjpe(pred: &PoseSequence, gt: &PoseSequence) -> Result<f64, LifterError> {
    if pred.frames() != gt.frames() || pred.bone_count() != gt.bone_count() || pred.dims() != gt.dims()
    {
        return Err(LifterError::ShapeMismatch(format!(
            "pred {}x{}x{} vs gt {}x{}x{}",
            pred.frames(),
            pred.bone_count(),
            pred.dims(),
            gt.frames(),
            gt.bone_count(),
            gt.dims()
        )));
    }
    let dims = pred.dims();
    let mut total = 0.0;
    let count = pred.frames() * pred.bone_count();
    for f in 0..pred.frames() {
        for b in 0..pred.bone_count() {
            let p = pred.vector(f, b);
            let g = gt.vector(f, b);
            let mut d2 = 0.0;
            for k in 0..dims {
                d2 += (p[k] - g[k]) * (p[k] - g[k]);
            }
            total += d2.sqrt();
        }
    }
    Ok(total / count as f64)
}

/// Trains a lifter on a 3D corpus; 2D inputs are formed internally as
/// `project_2d(seq)`. The loss is the mean squared error between predicted
/// and true 3D directional vectors, so under a one-to-many 2D-to-3D
/// ambiguity the optimum is the conditional mean of the 3D variants.
pub fn train_lifter(
    dataset3d: &GestureDataset,
    config: &LifterConfig,
) -> Result<TrainedLifter, LifterError> {
    if dataset3d.is_empty() {
        return Err(LifterError::EmptyDataset);
    }
    if dataset3d.dims != 3 {
        return Err(LifterError::DimensionMismatch { expected: 3, got: dataset3d.dims });
    }
    config.validate(dataset3d.seq_len)?;
    let bone_count = dataset3d.bone_count;
    let net = config.network(bone_count)?;

    let mut params = ModelParams::new(config.seed);
    let mut rng_init = seeds::substream(config.seed, domain::INIT, 0);
    net.init_params(&mut params, &mut rng_init)?;

    // Upsampled training pairs.
    let inputs: Vec<Tensor> = dataset3d
        .poses()
        .map(|pose| {
            let flat = project_2d(pose)?;
            Ok(upsample(&pose_tensor(&flat), config.upsample_factor, config.upsample_mode))
        })
        .collect::<Result<_, LifterError>>()?;
    let targets: Vec<Tensor> = dataset3d
        .poses()
        .map(|pose| upsample(&pose_tensor(pose), config.upsample_factor, config.upsample_mode))
        .collect();

    let n = dataset3d.len();
    let held_n = (n / 10).clamp(1, 64);
    let (train_idx, held_idx): (Vec<usize>, Vec<usize>) = if n >= 4 {
        ((0..n - held_n).collect(), (n - held_n..n).collect())
    } else {
        ((0..n).collect(), (0..n).collect())
    };

    let mut rng_train = seeds::substream(config.seed, domain::TRAIN, 0);
    let mut adam = AdamState::new();
    let adam_cfg = AdamConfig::with_lr(config.lr);
    for step in 0..config.train_steps {
        let mut grads = GradStore::new();
        let mut batch_loss = 0.0;
        for _ in 0..config.batch_size {
            let idx = train_idx[rng_train.gen_range(0..train_idx.len())];
            let (pred, trace) = net.forward_traced(&params, &inputs[idx])?;
            let target = &targets[idx];
            let numel = pred.len() as f64;
            batch_loss += pred
                .data()
                .iter()
                .zip(target.data().iter())
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / numel;
            let scale = 2.0 / (numel * config.batch_size as f64);
            let dpred = Tensor::new(
                pred.shape().to_vec(),
                pred.data()
                    .iter()
                    .zip(target.data().iter())
                    .map(|(p, t)| scale * (p - t))
                    .collect(),
            )?;
            net.backward(&params, &trace, &dpred, &mut grads)?;
        }
        batch_loss /= config.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(LifterError::NonFiniteLoss { step });
        }
        adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
    }

    let mut lifter = TrainedLifter {
        config: config.clone(),
        params,
        bone_count,
        seq_len: dataset3d.seq_len,
        validation_mpjpe: f64::NAN,
    };
    // Held-out MPJPE through the public lift path.
    let mut total = 0.0;
    for &i in &held_idx {
        let gt = &dataset3d.pairs[i].0;
        let lifted = lifter.lift(&project_2d(gt)?)?;
        total += mpjpe(&lifted, gt)?;
    }
    lifter.validation_mpjpe = total / held_idx.len() as f64;
    Ok(lifter)
}

impl TrainedLifter {
    /// Lifts a 2D sequence to 3D: upsample, run the TCN with edge padding,
    /// downsample back, renormalize bone vectors to unit length.
    pub fn lift(&self, seq2d: &PoseSequence) -> Result<PoseSequence, LifterError> {
        if seq2d.dims() != 2 {
            return Err(LifterError::DimensionMismatch { expected: 2, got: seq2d.dims() });
        }
        if seq2d.bone_count() != self.bone_count {
            return Err(LifterError::BoneMismatch {
                expected: self.bone_count,
                got: seq2d.bone_count(),
            });
        }
        let net = self.config.network(self.bone_count)?;
        let up = upsample(&pose_tensor(seq2d), self.config.upsample_factor, self.config.upsample_mode);
        let out_up = net.forward(&self.params, &up)?;
        let out = downsample(&out_up, self.config.upsample_factor, seq2d.frames());
        let mut pose = PoseSequence::new(
            seq2d.frames(),
            self.bone_count,
            3,
            seq2d.fps(),
            out.into_data(),
        )
        .map_err(LifterError::Skeleton)?;
        pose.renormalize();
        Ok(pose)
    }

    /// Lifts every pose of a 2D dataset, keeping the speech tracks.
    pub fn lift_dataset(&self, dataset2d: &GestureDataset) -> Result<GestureDataset, LifterError> {
        if dataset2d.dims != 2 {
            return Err(LifterError::DimensionMismatch { expected: 2, got: dataset2d.dims });
        }
        let mut pairs = Vec::with_capacity(dataset2d.len());
        for (pose, speech) in &dataset2d.pairs {
            pairs.push((self.lift(pose)?, speech.clone()));
        }
        Ok(GestureDataset {
            dims: 3,
            pairs,
            generator_config: dataset2d.generator_config.clone(),
            ..*dataset2d
        })
    }

    pub fn params_bytes(&self) -> Result<Vec<u8>, LifterError> {
        Ok(params_to_bytes(&self.params)?)
    }

    pub fn save(&self, base: &Path) -> Result<(), LifterError> {
        fs::write(base.with_extension("ckpt"), self.params_bytes()?)?;
        let sidecar = LifterSidecar {
            config: self.config.clone(),
            bone_count: self.bone_count,
            seq_len: self.seq_len,
            validation_mpjpe: self.validation_mpjpe,
        };
        let text = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| LifterError::Checkpoint(e.to_string()))?;
        fs::write(base.with_extension("json"), text + "\n")?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self, LifterError> {
        let bytes = fs::read(base.with_extension("ckpt"))?;
        let mut params = params_from_bytes(&bytes)?;
        let text = fs::read_to_string(base.with_extension("json"))?;
        let sidecar: LifterSidecar =
            serde_json::from_str(&text).map_err(|e| LifterError::Checkpoint(e.to_string()))?;
        params.set_init_seed(sidecar.config.seed);
        Ok(Self {
            config: sidecar.config,
            params,
            bone_count: sidecar.bone_count,
            seq_len: sidecar.seq_len,
            validation_mpjpe: sidecar.validation_mpjpe,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LifterSidecar {
    config: LifterConfig,
    bone_count: usize,
    seq_len: usize,
    validation_mpjpe: f64,
}
