//! Layer kinds and their forward/backward rules. Every layer maps a
//! rank-2 `[frames, width]` tensor to another, so sequences thread through
//! a stack without reshaping.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{GradStore, ModelParams};
use super::tensor::{matmul, matmul_a_bt, matmul_at_b_acc, Tensor};
use super::NnError;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    /// Out-of-range taps read zero.
    #[default]
    Zero,
    /// Out-of-range taps read the nearest edge frame.
    Edge,
}

/// Declarative layer description; parameters are created by
/// [`super::Network::init_params`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_width: usize,
        out_width: usize,
    },
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
        #[serde(default)]
        padding: PaddingMode,
    },
    LayerNorm {
        width: usize,
    },
    Activation {
        function: Activation,
    },
    /// Pre-norm self-attention followed by a pre-norm MLP, both with
    /// residual connections; sinusoidal positional encoding is added to
    /// the block input so attention is position-aware.
    AttentionBlock {
        model_dim: usize,
        heads: usize,
        mlp_hidden: usize,
    },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        match *self {
            LayerSpec::Dense { in_width, out_width } => {
                if in_width == 0 || out_width == 0 {
                    return Err(NnError::InvalidSpec("dense widths must be >= 1".into()));
                }
            }
            LayerSpec::Conv1d { in_channels, out_channels, kernel_size, dilation, .. } => {
                if in_channels == 0 || out_channels == 0 || kernel_size == 0 || dilation == 0 {
                    return Err(NnError::InvalidSpec(
                        "conv1d channels, kernel and dilation must be >= 1".into(),
                    ));
                }
            }
            LayerSpec::LayerNorm { width } => {
                if width == 0 {
                    return Err(NnError::InvalidSpec("layer_norm width must be >= 1".into()));
                }
            }
            LayerSpec::Activation { .. } => {}
            LayerSpec::AttentionBlock { model_dim, heads, mlp_hidden } => {
                if model_dim == 0 || heads == 0 || mlp_hidden == 0 {
                    return Err(NnError::InvalidSpec(
                        "attention dims and heads must be >= 1".into(),
                    ));
                }
                if model_dim % heads != 0 {
                    return Err(NnError::InvalidSpec(format!(
                        "model_dim {model_dim} not divisible by heads {heads}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Output width given `input_width`, or an error if incompatible.
    pub fn output_width(&self, input_width: usize) -> Result<usize, NnError> {
        match *self {
            LayerSpec::Dense { in_width, out_width } => {
                if in_width != input_width {
                    return Err(NnError::ShapeMismatch(format!(
                        "dense expects width {in_width}, got {input_width}"
                    )));
                }
                Ok(out_width)
            }
            LayerSpec::Conv1d { in_channels, out_channels, .. } => {
                if in_channels != input_width {
                    return Err(NnError::ShapeMismatch(format!(
                        "conv1d expects {in_channels} channels, got {input_width}"
                    )));
                }
                Ok(out_channels)
            }
            LayerSpec::LayerNorm { width } => {
                if width != input_width {
                    return Err(NnError::ShapeMismatch(format!(
                        "layer_norm expects width {width}, got {input_width}"
                    )));
                }
                Ok(width)
            }
            LayerSpec::Activation { .. } => Ok(input_width),
            LayerSpec::AttentionBlock { model_dim, .. } => {
                if model_dim != input_width {
                    return Err(NnError::ShapeMismatch(format!(
                        "attention block expects width {model_dim}, got {input_width}"
                    )));
                }
                Ok(model_dim)
            }
        }
    }

    /// Creates this layer's parameters under `prefix` with the standard
    /// init: weights uniform in ±sqrt(1/fan_in), biases zero, norm gains
    /// one.
    pub fn init_params(
        &self,
        prefix: &str,
        params: &mut ModelParams,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), NnError> {
        match *self {
            LayerSpec::Dense { in_width, out_width } => {
                params.insert(
                    format!("{prefix}.weight"),
                    uniform_init(&[in_width, out_width], in_width, rng),
                )?;
                params.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_width]))?;
            }
            LayerSpec::Conv1d { in_channels, out_channels, kernel_size, .. } => {
                let fan_in = in_channels * kernel_size;
                params.insert(
                    format!("{prefix}.weight"),
                    uniform_init(&[out_channels, in_channels, kernel_size], fan_in, rng),
                )?;
                params.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_channels]))?;
            }
            LayerSpec::LayerNorm { width } => {
                params.insert(format!("{prefix}.gamma"), Tensor::filled(&[width], 1.0))?;
                params.insert(format!("{prefix}.beta"), Tensor::zeros(&[width]))?;
            }
            LayerSpec::Activation { .. } => {}
            LayerSpec::AttentionBlock { model_dim, mlp_hidden, .. } => {
                let d = model_dim;
                params.insert(format!("{prefix}.ln1.gamma"), Tensor::filled(&[d], 1.0))?;
                params.insert(format!("{prefix}.ln1.beta"), Tensor::zeros(&[d]))?;
                for name in ["wq", "wk", "wv", "wo"] {
                    params.insert(format!("{prefix}.{name}"), uniform_init(&[d, d], d, rng))?;
                }
                for name in ["bq", "bk", "bv", "bo"] {
                    params.insert(format!("{prefix}.{name}"), Tensor::zeros(&[d]))?;
                }
                params.insert(format!("{prefix}.ln2.gamma"), Tensor::filled(&[d], 1.0))?;
                params.insert(format!("{prefix}.ln2.beta"), Tensor::zeros(&[d]))?;
                params.insert(
                    format!("{prefix}.mlp.w1"),
                    uniform_init(&[d, mlp_hidden], d, rng),
                )?;
                params.insert(format!("{prefix}.mlp.b1"), Tensor::zeros(&[mlp_hidden]))?;
                params.insert(
                    format!("{prefix}.mlp.w2"),
                    uniform_init(&[mlp_hidden, d], mlp_hidden, rng),
                )?;
                params.insert(format!("{prefix}.mlp.b2"), Tensor::zeros(&[d]))?;
            }
        }
        Ok(())
    }
}

pub(crate) fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape consistent")
}

/// Per-layer forward intermediates, consumed by backward.
#[derive(Debug, Clone)]
pub(crate) enum LayerCache {
    Dense { input: Tensor },
    Conv1d { input: Tensor },
    LayerNorm { xhat: Tensor, inv_sigma: Vec<f64> },
    Activation { input: Tensor },
    Attention(Box<AttentionCache>),
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    ln1_xhat: Tensor,
    ln1_inv_sigma: Vec<f64>,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Softmax probabilities, one [frames, frames] matrix per head.
    probs: Vec<Tensor>,
    /// Concatenated per-head context.
    context: Tensor,
    ln2_xhat: Tensor,
    ln2_inv_sigma: Vec<f64>,
    mlp_pre: Tensor,
    mlp_act: Tensor,
}

fn activation_forward(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::Tanh => x.tanh(),
        Activation::Gelu => gelu(x),
    }
}

fn activation_grad(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Tanh => {
            let t = x.tanh();
            1.0 - t * t
        }
        Activation::Gelu => gelu_grad(x),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Sinusoidal positional encoding over `frames` positions of width `dim`.
pub(crate) fn positional_encoding(frames: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[frames, dim]);
    for f in 0..frames {
        let row = pe.row_mut(f);
        for (j, slot) in row.iter_mut().enumerate() {
            let pair = (j / 2) as f64;
            let freq = (10_000.0f64).powf(-2.0 * pair / dim as f64);
            let angle = f as f64 * freq;
            *slot = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

fn layer_norm_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> (Tensor, Tensor, Vec<f64>) {
    let frames = input.shape()[0];
    let width = input.shape()[1];
    let mut out = Tensor::zeros(&[frames, width]);
    let mut xhat = Tensor::zeros(&[frames, width]);
    let mut inv_sigma = vec![0.0; frames];
    for f in 0..frames {
        let row = input.row(f);
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_sigma[f] = inv;
        let xh = xhat.row_mut(f);
        for (j, &v) in row.iter().enumerate() {
            xh[j] = (v - mean) * inv;
        }
        let o = out.row_mut(f);
        for j in 0..width {
            o[j] = gamma.data()[j] * xhat.row(f)[j] + beta.data()[j];
        }
    }
    (out, xhat, inv_sigma)
}

/// Returns the input gradient; accumulates gamma/beta gradients.
fn layer_norm_backward(
    upstream: &Tensor,
    xhat: &Tensor,
    inv_sigma: &[f64],
    gamma: &Tensor,
    dgamma: &mut Tensor,
    dbeta: &mut Tensor,
) -> Tensor {
    let frames = upstream.shape()[0];
    let width = upstream.shape()[1];
    let mut dx = Tensor::zeros(&[frames, width]);
    for f in 0..frames {
        let dy = upstream.row(f);
        let xh = xhat.row(f);
        for j in 0..width {
            dgamma.data_mut()[j] += dy[j] * xh[j];
            dbeta.data_mut()[j] += dy[j];
        }
        // dxhat = dy * gamma; dx = inv_sigma * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..width {
            let dxh = dy[j] * gamma.data()[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
        }
        mean_dxhat /= width as f64;
        mean_dxhat_xhat /= width as f64;
        let out = dx.row_mut(f);
        for j in 0..width {
            let dxh = dy[j] * gamma.data()[j];
            out[j] = inv_sigma[f] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let frames = input.shape()[0];
    let in_w = input.shape()[1];
    let out_w = weight.shape()[1];
    let mut out = Tensor::zeros(&[frames, out_w]);
    matmul(out.data_mut(), input.data(), weight.data(), frames, in_w, out_w);
    for f in 0..frames {
        let row = out.row_mut(f);
        for (o, b) in row.iter_mut().zip(bias.data().iter()) {
            *o += b;
        }
    }
    out
}

/// Resolves the source frame for conv tap `offset` under a padding mode.
/// Returns `None` when the tap reads a zero (zero padding, out of range).
fn conv_src(frame: isize, frames: usize, padding: PaddingMode) -> Option<usize> {
    if frame >= 0 && (frame as usize) < frames {
        return Some(frame as usize);
    }
    match padding {
        PaddingMode::Zero => None,
        PaddingMode::Edge => Some(if frame < 0 { 0 } else { frames - 1 }),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    kernel_size: usize,
    dilation: usize,
    padding: PaddingMode,
) -> Tensor {
    let frames = input.shape()[0];
    let in_c = input.shape()[1];
    let out_c = weight.shape()[0];
    let pad_left = ((kernel_size - 1) * dilation / 2) as isize;
    let mut out = Tensor::zeros(&[frames, out_c]);
    for f in 0..frames {
        let orow = out.row_mut(f);
        orow.copy_from_slice(bias.data());
        for tap in 0..kernel_size {
            let src = f as isize + (tap * dilation) as isize - pad_left;
            let Some(s) = conv_src(src, frames, padding) else { continue };
            let xrow = input.row(s);
            for (o, oslot) in orow.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (i, &xv) in xrow.iter().enumerate() {
                    acc += weight.data()[(o * in_c + i) * kernel_size + tap] * xv;
                }
                *oslot += acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward(
    upstream: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    kernel_size: usize,
    dilation: usize,
    padding: PaddingMode,
    dweight: &mut Tensor,
    dbias: &mut Tensor,
) -> Tensor {
    let frames = input.shape()[0];
    let in_c = input.shape()[1];
    let pad_left = ((kernel_size - 1) * dilation / 2) as isize;
    let mut dx = Tensor::zeros(&[frames, in_c]);
    for f in 0..frames {
        let dy = upstream.row(f);
        for (o, &dyv) in dy.iter().enumerate() {
            dbias.data_mut()[o] += dyv;
        }
        for tap in 0..kernel_size {
            let src = f as isize + (tap * dilation) as isize - pad_left;
            let Some(s) = conv_src(src, frames, padding) else { continue };
            let xrow = input.row(s);
            let dxrow = dx.row_mut(s);
            for (o, &dyv) in dy.iter().enumerate() {
                for i in 0..in_c {
                    let widx = (o * in_c + i) * kernel_size + tap;
                    dweight.data_mut()[widx] += dyv * xrow[i];
                    dxrow[i] += dyv * weight.data()[widx];
                }
            }
        }
    }
    dx
}

/// Runs one layer forward, returning output and cache.
pub(crate) fn layer_forward(
    spec: &LayerSpec,
    prefix: &str,
    params: &ModelParams,
    input: &Tensor,
) -> Result<(Tensor, LayerCache), NnError> {
    if input.rank() != 2 {
        return Err(NnError::ShapeMismatch(format!(
            "layers expect [frames, width] input, got rank {}",
            input.rank()
        )));
    }
    spec.output_width(input.shape()[1])?;
    match spec {
        LayerSpec::Dense { .. } => {
            let w = params.get(&format!("{prefix}.weight"))?;
            let b = params.get(&format!("{prefix}.bias"))?;
            let out = dense_forward(input, w, b);
            Ok((out, LayerCache::Dense { input: input.clone() }))
        }
        LayerSpec::Conv1d { kernel_size, dilation, padding, .. } => {
            let w = params.get(&format!("{prefix}.weight"))?;
            let b = params.get(&format!("{prefix}.bias"))?;
            let out = conv1d_forward(input, w, b, *kernel_size, *dilation, *padding);
            Ok((out, LayerCache::Conv1d { input: input.clone() }))
        }
        LayerSpec::LayerNorm { .. } => {
            let gamma = params.get(&format!("{prefix}.gamma"))?;
            let beta = params.get(&format!("{prefix}.beta"))?;
            let (out, xhat, inv_sigma) = layer_norm_forward(input, gamma, beta);
            Ok((out, LayerCache::LayerNorm { xhat, inv_sigma }))
        }
        LayerSpec::Activation { function } => {
            let mut out = input.clone();
            for v in out.data_mut() {
                *v = activation_forward(*function, *v);
            }
            Ok((out, LayerCache::Activation { input: input.clone() }))
        }
        LayerSpec::AttentionBlock { model_dim, heads, .. } => {
            attention_forward(prefix, params, input, *model_dim, *heads)
        }
    }
}

/// Runs one layer backward. Accumulates parameter gradients into `grads`
/// and returns the gradient with respect to the layer input.
pub(crate) fn layer_backward(
    spec: &LayerSpec,
    prefix: &str,
    params: &ModelParams,
    cache: &LayerCache,
    upstream: &Tensor,
    grads: &mut GradStore,
) -> Result<Tensor, NnError> {
    match (spec, cache) {
        (LayerSpec::Dense { in_width, out_width }, LayerCache::Dense { input }) => {
            let frames = input.shape()[0];
            let w = params.get(&format!("{prefix}.weight"))?;
            let mut dw = Tensor::zeros(&[*in_width, *out_width]);
            matmul_at_b_acc(dw.data_mut(), input.data(), upstream.data(), frames, *in_width, *out_width);
            let mut db = Tensor::zeros(&[*out_width]);
            for f in 0..frames {
                for (j, &g) in upstream.row(f).iter().enumerate() {
                    db.data_mut()[j] += g;
                }
            }
            let mut dx = Tensor::zeros(&[frames, *in_width]);
            matmul_a_bt(dx.data_mut(), upstream.data(), w.data(), frames, *out_width, *in_width);
            grads.accumulate(&format!("{prefix}.weight"), dw)?;
            grads.accumulate(&format!("{prefix}.bias"), db)?;
            Ok(dx)
        }
        (
            LayerSpec::Conv1d { in_channels, out_channels, kernel_size, dilation, padding },
            LayerCache::Conv1d { input },
        ) => {
            let w = params.get(&format!("{prefix}.weight"))?;
            let mut dw = Tensor::zeros(&[*out_channels, *in_channels, *kernel_size]);
            let mut db = Tensor::zeros(&[*out_channels]);
            let dx = conv1d_backward(
                upstream,
                input,
                w,
                *kernel_size,
                *dilation,
                *padding,
                &mut dw,
                &mut db,
            );
            grads.accumulate(&format!("{prefix}.weight"), dw)?;
            grads.accumulate(&format!("{prefix}.bias"), db)?;
            Ok(dx)
        }
        (LayerSpec::LayerNorm { width }, LayerCache::LayerNorm { xhat, inv_sigma }) => {
            let gamma = params.get(&format!("{prefix}.gamma"))?;
            let mut dgamma = Tensor::zeros(&[*width]);
            let mut dbeta = Tensor::zeros(&[*width]);
            let dx = layer_norm_backward(upstream, xhat, inv_sigma, gamma, &mut dgamma, &mut dbeta);
            grads.accumulate(&format!("{prefix}.gamma"), dgamma)?;
            grads.accumulate(&format!("{prefix}.beta"), dbeta)?;
            Ok(dx)
        }
        (LayerSpec::Activation { function }, LayerCache::Activation { input }) => {
            let mut dx = upstream.clone();
            for (g, &x) in dx.data_mut().iter_mut().zip(input.data().iter()) {
                *g *= activation_grad(*function, x);
            }
            Ok(dx)
        }
        (LayerSpec::AttentionBlock { model_dim, heads, .. }, LayerCache::Attention(cache)) => {
            attention_backward(prefix, params, cache, upstream, *model_dim, *heads, grads)
        }
        _ => Err(NnError::NoForwardState),
    }
}

fn attention_forward(
    prefix: &str,
    params: &ModelParams,
    input: &Tensor,
    d: usize,
    heads: usize,
) -> Result<(Tensor, LayerCache), NnError> {
    let frames = input.shape()[0];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut xp = input.clone();
    let pe = positional_encoding(frames, d);
    xp.add_assign(&pe)?;

    let ln1_gamma = params.get(&format!("{prefix}.ln1.gamma"))?;
    let ln1_beta = params.get(&format!("{prefix}.ln1.beta"))?;
    let (h, ln1_xhat, ln1_inv_sigma) = layer_norm_forward(&xp, ln1_gamma, ln1_beta);

    let q = dense_forward(&h, params.get(&format!("{prefix}.wq"))?, params.get(&format!("{prefix}.bq"))?);
    let k = dense_forward(&h, params.get(&format!("{prefix}.wk"))?, params.get(&format!("{prefix}.bk"))?);
    let v = dense_forward(&h, params.get(&format!("{prefix}.wv"))?, params.get(&format!("{prefix}.bv"))?);

    let mut probs = Vec::with_capacity(heads);
    let mut context = Tensor::zeros(&[frames, d]);
    for hh in 0..heads {
        let off = hh * dh;
        // scores[i,j] = q_i . k_j * scale over this head's slice
        let mut p = Tensor::zeros(&[frames, frames]);
        for i in 0..frames {
            let qrow = &q.row(i)[off..off + dh];
            let prow = p.row_mut(i);
            for j in 0..frames {
                let krow = &k.row(j)[off..off + dh];
                let mut acc = 0.0;
                for t in 0..dh {
                    acc += qrow[t] * krow[t];
                }
                prow[j] = acc * scale;
            }
            // stable softmax over keys
            let maxv = prow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for slot in prow.iter_mut() {
                *slot = (*slot - maxv).exp();
                sum += *slot;
            }
            for slot in prow.iter_mut() {
                *slot /= sum;
            }
        }
        for i in 0..frames {
            let prow = p.row(i);
            let crow = &mut context.row_mut(i)[off..off + dh];
            for (j, &pv) in prow.iter().enumerate() {
                let vrow = &v.row(j)[off..off + dh];
                for t in 0..dh {
                    crow[t] += pv * vrow[t];
                }
            }
        }
        probs.push(p);
    }

    let attn_out = dense_forward(
        &context,
        params.get(&format!("{prefix}.wo"))?,
        params.get(&format!("{prefix}.bo"))?,
    );
    let mut a = xp.clone();
    a.add_assign(&attn_out)?;

    let ln2_gamma = params.get(&format!("{prefix}.ln2.gamma"))?;
    let ln2_beta = params.get(&format!("{prefix}.ln2.beta"))?;
    let (h2, ln2_xhat, ln2_inv_sigma) = layer_norm_forward(&a, ln2_gamma, ln2_beta);

    let mlp_pre = dense_forward(
        &h2,
        params.get(&format!("{prefix}.mlp.w1"))?,
        params.get(&format!("{prefix}.mlp.b1"))?,
    );
    let mut mlp_act = mlp_pre.clone();
    for vv in mlp_act.data_mut() {
        *vv = gelu(*vv);
    }
    let mlp_out = dense_forward(
        &mlp_act,
        params.get(&format!("{prefix}.mlp.w2"))?,
        params.get(&format!("{prefix}.mlp.b2"))?,
    );
    let mut out = a.clone();
    out.add_assign(&mlp_out)?;

    let cache = AttentionCache {
        ln1_xhat,
        ln1_inv_sigma,
        q,
        k,
        v,
        probs,
        context,
        ln2_xhat,
        ln2_inv_sigma,
        mlp_pre,
        mlp_act,
    };
    Ok((out, LayerCache::Attention(Box::new(cache))))
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    prefix: &str,
    params: &ModelParams,
    cache: &AttentionCache,
    upstream: &Tensor,
    d: usize,
    heads: usize,
    grads: &mut GradStore,
) -> Result<Tensor, NnError> {
    let frames = upstream.shape()[0];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let hidden = cache.mlp_pre.shape()[1];

    // out = a + mlp(ln2(a)); upstream flows to both branches.
    // MLP branch
    let dmlp_out = upstream;
    let w2 = params.get(&format!("{prefix}.mlp.w2"))?;
    let mut dw2 = Tensor::zeros(&[hidden, d]);
    matmul_at_b_acc(dw2.data_mut(), cache.mlp_act.data(), dmlp_out.data(), frames, hidden, d);
    let mut db2 = Tensor::zeros(&[d]);
    for f in 0..frames {
        for (j, &g) in dmlp_out.row(f).iter().enumerate() {
            db2.data_mut()[j] += g;
        }
    }
    let mut dact = Tensor::zeros(&[frames, hidden]);
    matmul_a_bt(dact.data_mut(), dmlp_out.data(), w2.data(), frames, d, hidden);
    for (g, &x) in dact.data_mut().iter_mut().zip(cache.mlp_pre.data().iter()) {
        *g *= gelu_grad(x);
    }
    let w1 = params.get(&format!("{prefix}.mlp.w1"))?;
    let mut dw1 = Tensor::zeros(&[d, hidden]);
    // h2 = ln2(a) output; recompute from xhat and gamma/beta (cached xhat is enough:
    // h2 = gamma*xhat+beta). We cached h2 implicitly via mlp input = h2; rebuild it.
    let ln2_gamma = params.get(&format!("{prefix}.ln2.gamma"))?;
    let ln2_beta = params.get(&format!("{prefix}.ln2.beta"))?;
    let mut h2 = cache.ln2_xhat.clone();
    for f in 0..frames {
        let row = h2.row_mut(f);
        for j in 0..d {
            row[j] = ln2_gamma.data()[j] * row[j] + ln2_beta.data()[j];
        }
    }
    matmul_at_b_acc(dw1.data_mut(), h2.data(), dact.data(), frames, d, hidden);
    let mut db1 = Tensor::zeros(&[hidden]);
    for f in 0..frames {
        for (j, &g) in dact.row(f).iter().enumerate() {
            db1.data_mut()[j] += g;
        }
    }
    let mut dh2 = Tensor::zeros(&[frames, d]);
    matmul_a_bt(dh2.data_mut(), dact.data(), w1.data(), frames, hidden, d);

    let mut dgamma2 = Tensor::zeros(&[d]);
    let mut dbeta2 = Tensor::zeros(&[d]);
    let dln2_in =
        layer_norm_backward(&dh2, &cache.ln2_xhat, &cache.ln2_inv_sigma, ln2_gamma, &mut dgamma2, &mut dbeta2);

    // da = upstream (residual) + gradient through ln2
    let mut da = upstream.clone();
    da.add_assign(&dln2_in)?;

    // a = xp + attn_out
    let dattn_out = &da;
    let wo = params.get(&format!("{prefix}.wo"))?;
    let mut dwo = Tensor::zeros(&[d, d]);
    matmul_at_b_acc(dwo.data_mut(), cache.context.data(), dattn_out.data(), frames, d, d);
    let mut dbo = Tensor::zeros(&[d]);
    for f in 0..frames {
        for (j, &g) in dattn_out.row(f).iter().enumerate() {
            dbo.data_mut()[j] += g;
        }
    }
    let mut dcontext = Tensor::zeros(&[frames, d]);
    matmul_a_bt(dcontext.data_mut(), dattn_out.data(), wo.data(), frames, d, d);

    let mut dq = Tensor::zeros(&[frames, d]);
    let mut dk = Tensor::zeros(&[frames, d]);
    let mut dv = Tensor::zeros(&[frames, d]);
    for hh in 0..heads {
        let off = hh * dh;
        let p = &cache.probs[hh];
        // dV_h = P^T dC_h ; dP = dC_h V_h^T
        for i in 0..frames {
            let dcrow = &dcontext.row(i)[off..off + dh];
            let prow = p.row(i);
            for j in 0..frames {
                let pv = prow[j];
                let dvrow = &mut dv.row_mut(j)[off..off + dh];
                for t in 0..dh {
                    dvrow[t] += pv * dcrow[t];
                }
            }
        }
        for i in 0..frames {
            let dcrow = &dcontext.row(i)[off..off + dh];
            let prow = p.row(i);
            // dP_row[j] = dC_i . V_j
            let mut dprow = vec![0.0; frames];
            for (j, slot) in dprow.iter_mut().enumerate() {
                let vrow = &cache.v.row(j)[off..off + dh];
                let mut acc = 0.0;
                for t in 0..dh {
                    acc += dcrow[t] * vrow[t];
                }
                *slot = acc;
            }
            // softmax backward: dS = P .* (dP - sum(dP .* P))
            let dot: f64 = dprow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
            // dQ_i += sum_j dS_ij * K_j * scale ; dK_j += dS_ij * Q_i * scale
            let qrow_i: Vec<f64> = cache.q.row(i)[off..off + dh].to_vec();
            let dqrow = &mut dq.row_mut(i)[off..off + dh];
            for j in 0..frames {
                let ds = prow[j] * (dprow[j] - dot) * scale;
                if ds != 0.0 {
                    let krow = &cache.k.row(j)[off..off + dh];
                    for t in 0..dh {
                        dqrow[t] += ds * krow[t];
                    }
                    let dkrow = &mut dk.row_mut(j)[off..off + dh];
                    for t in 0..dh {
                        dkrow[t] += ds * qrow_i[t];
                    }
                }
            }
        }
    }

    // back through the three projections into h
    let mut dh = Tensor::zeros(&[frames, d]);
    let h = {
        let ln1_gamma = params.get(&format!("{prefix}.ln1.gamma"))?;
        let ln1_beta = params.get(&format!("{prefix}.ln1.beta"))?;
        let mut h = cache.ln1_xhat.clone();
        for f in 0..frames {
            let row = h.row_mut(f);
            for j in 0..d {
                row[j] = ln1_gamma.data()[j] * row[j] + ln1_beta.data()[j];
            }
        }
        h
    };
    for (wname, bname, dproj) in [("wq", "bq", &dq), ("wk", "bk", &dk), ("wv", "bv", &dv)] {
        let w = params.get(&format!("{prefix}.{wname}"))?;
        let mut dw = Tensor::zeros(&[d, d]);
        matmul_at_b_acc(dw.data_mut(), h.data(), dproj.data(), frames, d, d);
        let mut db = Tensor::zeros(&[d]);
        for f in 0..frames {
            for (j, &g) in dproj.row(f).iter().enumerate() {
                db.data_mut()[j] += g;
            }
        }
        let mut dh_part = Tensor::zeros(&[frames, d]);
        matmul_a_bt(dh_part.data_mut(), dproj.data(), w.data(), frames, d, d);
        dh.add_assign(&dh_part)?;
        grads.accumulate(&format!("{prefix}.{wname}"), dw)?;
        grads.accumulate(&format!("{prefix}.{bname}"), db)?;
    }

    let ln1_gamma = params.get(&format!("{prefix}.ln1.gamma"))?;
    let mut dgamma1 = Tensor::zeros(&[d]);
    let mut dbeta1 = Tensor::zeros(&[d]);
    let dln1_in =
        layer_norm_backward(&dh, &cache.ln1_xhat, &cache.ln1_inv_sigma, ln1_gamma, &mut dgamma1, &mut dbeta1);

    // dxp = da (residual into a) + gradient through ln1; PE is constant so dx = dxp.
    let mut dx = da;
    dx.add_assign(&dln1_in)?;

    grads.accumulate(&format!("{prefix}.mlp.w2"), dw2)?;
    grads.accumulate(&format!("{prefix}.mlp.b2"), db2)?;
    grads.accumulate(&format!("{prefix}.mlp.w1"), dw1)?;
    grads.accumulate(&format!("{prefix}.mlp.b1"), db1)?;
    grads.accumulate(&format!("{prefix}.ln2.gamma"), dgamma2)?;
    grads.accumulate(&format!("{prefix}.ln2.beta"), dbeta2)?;
    grads.accumulate(&format!("{prefix}.ln1.gamma"), dgamma1)?;
    grads.accumulate(&format!("{prefix}.ln1.beta"), dbeta1)?;
    grads.accumulate(&format!("{prefix}.wo"), dwo)?;
    grads.accumulate(&format!("{prefix}.bo"), dbo)?;
    Ok(dx)
}
