use serde::{Deserialize, Serialize};

use super::network::ConvNetParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

/// First and second moments, shaped like the parameters, plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: ConvNetParams,
    v: ConvNetParams,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ConvNetParams) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ConvNetParams,
    grads: &ConvNetParams,
    state: &mut AdamState,
    config: &AdamConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().into_iter().zip(state.v.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        for i in 0..p.len() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(value: f64) -> ConvNetParams {
        let mut p = ConvNetParams::zeros(1, 1);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v = value);
        }
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = ConvNetParams::init(2, 2, 3);
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let zero = params.zeros_like();
        adam_step(&mut params, &zero, &mut state, &AdamConfig::default());
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        for g in [0.5, -3.0, 1e-3] {
            let mut params = filled(1.0);
            let mut state = AdamState::new(&params);
            adam_step(&mut params, &filled(g), &mut state, &cfg);
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
            let expected = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
            for t in params.tensors() {
                assert!(t.iter().all(|&v| (v - expected).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn repeated_steps_move_monotonically_against_gradient() {
        let cfg = AdamConfig::default();
        let mut params = filled(0.0);
        let mut state = AdamState::new(&params);
        let grads = filled(2.0);
        adam_step(&mut params, &grads, &mut state, &cfg);
        let first = params.conv1_bias[0];
        adam_step(&mut params, &grads, &mut state, &cfg);
        let second = params.conv1_bias[0];
        assert!(first < 0.0 && second < first);
        assert_eq!(state.step(), 2);
    }
}
