//! Adam with bias correction. Moments are kept per parameter name and
//! created lazily, so parameters that never receive a gradient are never
//! touched.

use std::collections::BTreeMap;

use super::params::{GradStore, ModelParams};
use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over every gradient in `grads`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradStore,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), NnError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, grad) in grads.iter() {
        let param = params.get_mut(name)?;
        if !param.same_shape(grad) {
            return Err(NnError::ShapeMismatch(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        let p = param.data_mut();
        for i in 0..grad.len() {
            let g = grad.data()[i];
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(value: f64) -> ModelParams {
        let mut p = ModelParams::new(0);
        p.insert("w", Tensor::from_vec(vec![value])).unwrap();
        p
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut params = scalar_params(1.5);
        let mut grads = GradStore::new();
        grads.accumulate("w", Tensor::from_vec(vec![0.0])).unwrap();
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(params.get("w").unwrap().data()[0], 1.5);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_lr_times_sign() {
        // After bias correction the first update is lr * g / (|g| + eps').
        for &g in &[0.3f64, -2.0, 17.5] {
            let mut params = scalar_params(0.0);
            let mut grads = GradStore::new();
            grads.accumulate("w", Tensor::from_vec(vec![g])).unwrap();
            let mut state = AdamState::new();
            let cfg = AdamConfig::with_lr(0.05);
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
            let w = params.get("w").unwrap().data()[0];
            assert!(
                (w + 0.05 * g.signum()).abs() < 1e-6,
                "first step for g={g}: got {w}"
            );
        }
    }

    #[test]
    fn quadratic_converges_to_minimum() {
        // f(w) = (w - 3)^2, grad = 2(w - 3)
        let mut params = scalar_params(0.0);
        let mut state = AdamState::new();
        let cfg = AdamConfig::with_lr(0.1);
        for _ in 0..500 {
            let w = params.get("w").unwrap().data()[0];
            let mut grads = GradStore::new();
            grads
                .accumulate("w", Tensor::from_vec(vec![2.0 * (w - 3.0)]))
                .unwrap();
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        }
        let w = params.get("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 1e-3, "w = {w}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = scalar_params(0.0);
        let mut grads = GradStore::new();
        grads
            .accumulate("w", Tensor::from_vec(vec![1.0, 2.0]))
            .unwrap();
        let mut state = AdamState::new();
        assert!(matches!(
            adam_step(&mut params, &grads, &mut state, &AdamConfig::default()),
            Err(NnError::ShapeMismatch(_))
        ));
    }
}
