//! Adam optimizer over named parameter tensors.

use super::{Tensor, TensorError};

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, mut value: Tensor) -> Self {
        value.requires_grad = true;
        Param { name: name.into(), value }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &[Param]) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        AdamState { cfg, step: 0, m, v }
    }

    /// One update. `grads` must be aligned with `params`; a non-finite
    /// gradient aborts and names the offending parameter.
    pub fn step(&mut self, params: &mut [Param], grads: &[Vec<f32>]) -> Result<(), TensorError> {
        assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
        for (p, g) in params.iter().zip(grads) {
            assert_eq!(p.value.numel(), g.len(), "gradient size mismatch for `{}`", p.name);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NanGradient { name: p.name.clone() });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - (beta1 as f64).powf(t);
        let bc2 = 1.0 - (beta2 as f64).powf(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let data = p.value.data_mut();
            for i in 0..data.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = (m[i] as f64 / bc1) as f32;
                let vhat = (v[i] as f64 / bc2) as f32;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f32) -> Vec<Param> {
        vec![Param::new("theta", Tensor::scalar(v))]
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = scalar_param(0.7);
        let mut st = AdamState::new(AdamConfig::default(), &params);
        st.step(&mut params, &[vec![0.0]]).unwrap();
        assert_eq!(params[0].value.data()[0], 0.7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // lr=0.1, g=1, fresh state: m=0.1, v=0.001, mhat=1, vhat=1,
        // delta = -0.1 / (1 + 1e-8) ~= -0.1.
        let mut params = scalar_param(0.0);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut st = AdamState::new(cfg, &params);
        st.step(&mut params, &[vec![1.0]]).unwrap();
        let expect = -0.1f32 / (1.0 + 1e-8f32);
        assert!((params[0].value.data()[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut params = scalar_param(0.0);
        let mut st = AdamState::new(AdamConfig::default(), &params);
        for _ in 0..50 {
            st.step(&mut params, &[vec![2.5]]).unwrap();
        }
        assert!(params[0].value.data()[0] < 0.0);

        let mut params = scalar_param(0.0);
        let mut st = AdamState::new(AdamConfig::default(), &params);
        for _ in 0..50 {
            st.step(&mut params, &[vec![-2.5]]).unwrap();
        }
        assert!(params[0].value.data()[0] > 0.0);
    }

    #[test]
    fn nan_gradient_is_rejected_with_parameter_name() {
        let mut params = scalar_param(0.0);
        let mut st = AdamState::new(AdamConfig::default(), &params);
        let err = st.step(&mut params, &[vec![f32::NAN]]).unwrap_err();
        assert_eq!(err, TensorError::NanGradient { name: "theta".into() });
    }
}
