//! Sequential composition of layers with an explicit forward trace for
//! reverse-mode gradients.

use rand_chacha::ChaCha8Rng;

use super::layers::{layer_backward, layer_forward, LayerCache, LayerSpec};
use super::params::{GradStore, ModelParams};
use super::tensor::Tensor;
use super::NnError;

/// A named stack of layers. Parameters live in a shared [`ModelParams`]
/// under `"{prefix}.{layer_index}.*"`, so several networks (for example a
/// denoiser and a condition encoder) can share one parameter store and one
/// optimizer state.
#[derive(Debug, Clone)]
pub struct Network {
    prefix: String,
    specs: Vec<LayerSpec>,
    in_width: usize,
    out_width: usize,
}

/// Recorded intermediates from [`Network::forward_traced`].
#[derive(Debug)]
pub struct NetworkTrace {
    caches: Vec<LayerCache>,
    input_frames: usize,
}

impl Network {
    pub fn new(
        prefix: impl Into<String>,
        in_width: usize,
        specs: Vec<LayerSpec>,
    ) -> Result<Self, NnError> {
        if specs.is_empty() {
            return Err(NnError::InvalidSpec("network needs at least one layer".into()));
        }
        let mut width = in_width;
        for spec in &specs {
            spec.validate()?;
            width = spec.output_width(width)?;
        }
        Ok(Self { prefix: prefix.into(), specs, in_width, out_width: width })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn in_width(&self) -> usize {
        self.in_width
    }

    pub fn out_width(&self) -> usize {
        self.out_width
    }

    fn layer_prefix(&self, idx: usize) -> String {
        format!("{}.{}", self.prefix, idx)
    }

    /// Creates all parameters for this network in `params`.
    pub fn init_params(
        &self,
        params: &mut ModelParams,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), NnError> {
        for (i, spec) in self.specs.iter().enumerate() {
            spec.init_params(&self.layer_prefix(i), params, rng)?;
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor) -> Result<(), NnError> {
        if input.rank() != 2 || input.shape()[1] != self.in_width {
            return Err(NnError::ShapeMismatch(format!(
                "network `{}` expects [frames, {}], got {:?}",
                self.prefix,
                self.in_width,
                input.shape()
            )));
        }
        Ok(())
    }

    /// Inference pass. Deterministic: equal params and input give a
    /// bitwise-equal output.
    pub fn forward(&self, params: &ModelParams, input: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(input)?;
        let mut x = input.clone();
        for (i, spec) in self.specs.iter().enumerate() {
            let (out, _) = layer_forward(spec, &self.layer_prefix(i), params, &x)?;
            x = out;
        }
        Ok(x)
    }

    /// Forward pass that records the intermediates backward needs.
    pub fn forward_traced(
        &self,
        params: &ModelParams,
        input: &Tensor,
    ) -> Result<(Tensor, NetworkTrace), NnError> {
        self.check_input(input)?;
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.specs.len());
        let frames = input.shape()[0];
        for (i, spec) in self.specs.iter().enumerate() {
            let (out, cache) = layer_forward(spec, &self.layer_prefix(i), params, &x)?;
            caches.push(cache);
            x = out;
        }
        Ok((x, NetworkTrace { caches, input_frames: frames }))
    }

    /// Backpropagates `out_grad` through the trace, accumulating parameter
    /// gradients into `grads` and returning the input gradient.
    pub fn backward(
        &self,
        params: &ModelParams,
        trace: &NetworkTrace,
        out_grad: &Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor, NnError> {
        if trace.caches.len() != self.specs.len() {
            return Err(NnError::NoForwardState);
        }
        if out_grad.rank() != 2
            || out_grad.shape()[1] != self.out_width
            || out_grad.shape()[0] != trace.input_frames
        {
            return Err(NnError::ShapeMismatch(format!(
                "loss gradient {:?} does not match network output [{}, {}]",
                out_grad.shape(),
                trace.input_frames,
                self.out_width
            )));
        }
        let mut g = out_grad.clone();
        for i in (0..self.specs.len()).rev() {
            g = layer_backward(
                &self.specs[i],
                &self.layer_prefix(i),
                params,
                &trace.caches[i],
                &g,
                grads,
            )?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{Activation, PaddingMode};
    use crate::seeds;

    fn rng(seed: u64) -> ChaCha8Rng {
        seeds::substream(seed, seeds::domain::INIT, 0)
    }

    #[test]
    fn dense_identity_passes_input_through() {
        let net = Network::new(
            "t",
            3,
            vec![LayerSpec::Dense { in_width: 3, out_width: 3 }],
        )
        .unwrap();
        let mut params = ModelParams::new(0);
        net.init_params(&mut params, &mut rng(0)).unwrap();
        // overwrite with identity weights, zero bias
        let w = params.get_mut("t.0.weight").unwrap();
        w.data_mut().fill(0.0);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.25, -0.125]).unwrap();
        let y = net.forward(&params, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn pointwise_conv_scales_input() {
        let net = Network::new(
            "c",
            1,
            vec![LayerSpec::Conv1d {
                in_channels: 1,
                out_channels: 1,
                kernel_size: 1,
                dilation: 1,
                padding: PaddingMode::Zero,
            }],
        )
        .unwrap();
        let mut params = ModelParams::new(0);
        net.init_params(&mut params, &mut rng(1)).unwrap();
        params.get_mut("c.0.weight").unwrap().data_mut()[0] = 2.0;
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = net.forward(&params, &x).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let net = Network::new(
            "d",
            4,
            vec![
                LayerSpec::Dense { in_width: 4, out_width: 8 },
                LayerSpec::Activation { function: Activation::Gelu },
                LayerSpec::AttentionBlock { model_dim: 8, heads: 2, mlp_hidden: 16 },
                LayerSpec::Dense { in_width: 8, out_width: 2 },
            ],
        )
        .unwrap();
        let mut params = ModelParams::new(7);
        net.init_params(&mut params, &mut rng(7)).unwrap();
        let x = Tensor::new(
            vec![5, 4],
            (0..20).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let a = net.forward(&params, &x).unwrap();
        let b = net.forward(&params, &x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn two_layer_net_matches_hand_rolled_forward_oracle() {
        // Independent oracle: explicit loops for dense+tanh+dense.
        let net = Network::new(
            "o",
            2,
            vec![
                LayerSpec::Dense { in_width: 2, out_width: 3 },
                LayerSpec::Activation { function: Activation::Tanh },
                LayerSpec::Dense { in_width: 3, out_width: 1 },
            ],
        )
        .unwrap();
        let mut params = ModelParams::new(3);
        net.init_params(&mut params, &mut rng(3)).unwrap();
        let x = Tensor::new(vec![3, 2], vec![0.1, -0.4, 0.9, 0.2, -0.7, 0.3]).unwrap();
        let y = net.forward(&params, &x).unwrap();

        let w1 = params.get("o.0.weight").unwrap();
        let b1 = params.get("o.0.bias").unwrap();
        let w2 = params.get("o.2.weight").unwrap();
        let b2 = params.get("o.2.bias").unwrap();
        for f in 0..3 {
            let mut hidden = [0.0f64; 3];
            for (j, h) in hidden.iter_mut().enumerate() {
                let mut acc = b1.data()[j];
                for i in 0..2 {
                    acc += x.data()[f * 2 + i] * w1.data()[i * 3 + j];
                }
                *h = acc.tanh();
            }
            let mut out = b2.data()[0];
            for (j, h) in hidden.iter().enumerate() {
                out += h * w2.data()[j];
            }
            assert!((y.data()[f] - out).abs() < 1e-6, "frame {f}: {} vs {out}", y.data()[f]);
        }
    }

    #[test]
    fn backward_without_matching_trace_is_rejected() {
        let net1 = Network::new("a", 2, vec![LayerSpec::Dense { in_width: 2, out_width: 2 }]).unwrap();
        let net2 = Network::new(
            "b",
            2,
            vec![
                LayerSpec::Dense { in_width: 2, out_width: 2 },
                LayerSpec::Activation { function: Activation::Relu },
            ],
        )
        .unwrap();
        let mut params = ModelParams::new(0);
        net1.init_params(&mut params, &mut rng(0)).unwrap();
        net2.init_params(&mut params, &mut rng(1)).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let (_, trace1) = net1.forward_traced(&params, &x).unwrap();
        let g = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let mut grads = GradStore::new();
        assert!(matches!(
            net2.backward(&params, &trace1, &g, &mut grads),
            Err(NnError::NoForwardState)
        ));
    }

    #[test]
    fn dense_bias_gradient_equals_upstream_sum() {
        let net = Network::new("g", 2, vec![LayerSpec::Dense { in_width: 2, out_width: 2 }]).unwrap();
        let mut params = ModelParams::new(0);
        net.init_params(&mut params, &mut rng(5)).unwrap();
        let x = Tensor::filled(&[4, 2], 1.0);
        let (_, trace) = net.forward_traced(&params, &x).unwrap();
        let upstream = Tensor::new(
            vec![4, 2],
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
        )
        .unwrap();
        let mut grads = GradStore::new();
        net.backward(&params, &trace, &upstream, &mut grads).unwrap();
        let db = grads.get("g.0.bias").unwrap();
        assert!((db.data()[0] - 1.6).abs() < 1e-12);
        assert!((db.data()[1] - 2.0).abs() < 1e-12);
    }
}
