use super::ParamTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over `params` (in a fixed order).
pub fn adam_step(params: &mut [&mut ParamTensor], state: &mut AdamState) -> Result<()> {
    if state.first.is_empty() {
        state.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len() || state.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
        return Err(Error::Dimension("optimizer state does not mirror parameters".into()));
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        let (values, grad) = p.values_and_grad_mut();
        for i in 0..values.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            values[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        if !values.iter().all(|x| x.is_finite()) {
            return Err(Error::Divergence("non-finite parameter after Adam update".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = ParamTensor::from_values(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut [&mut p], &mut st).unwrap();
        assert_eq!(p.values(), before.values());
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 after bias correction -> update = lr / (1 + eps).
        let mut p = ParamTensor::from_values(&[1], vec![0.0]).unwrap();
        p.grad_mut()[0] = 1.0;
        let mut st = AdamState::new(AdamConfig::with_lr(0.1));
        adam_step(&mut [&mut p], &mut st).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.values()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut p = ParamTensor::from_values(&[2], vec![0.3, -0.7]).unwrap();
            let mut st = AdamState::new(AdamConfig::with_lr(0.01));
            for k in 0..50 {
                p.grad_mut()[0] = (k as f64).sin();
                p.grad_mut()[1] = p.values()[1] * 2.0;
                adam_step(&mut [&mut p], &mut st).unwrap();
            }
            p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut a = ParamTensor::zeros(&[2]);
        let mut b = ParamTensor::zeros(&[3]);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut [&mut a], &mut st).unwrap();
        assert!(adam_step(&mut [&mut b], &mut st).is_err());
    }
}
