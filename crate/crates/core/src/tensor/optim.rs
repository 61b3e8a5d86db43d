use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
            .unzip();
        AdamState { step: 0, m, v }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Tensors without a gradient are treated
/// as having a zero gradient.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState, hp: &AdamConfig) -> Result<()> {
    if !(hp.lr > 0.0) {
        return Err(Error::invalid(format!(
            "adam: learning rate must be > 0, got {}",
            hp.lr
        )));
    }
    if state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("state for {} tensors, got {}", state.m.len(), params.len()),
        ));
    }
    for (i, p) in params.iter().enumerate() {
        if state.m[i].len() != p.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "tensor {i}: state {} vs param {}",
                    state.m[i].len(),
                    p.len()
                ),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad().map(<[f64]>::to_vec);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = p.data_mut();
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[j]);
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            data[j] -= hp.lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * data[j]);
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> Tensor {
        Tensor::scalar(v).requiring_grad()
    }

    #[test]
    fn zero_gradient_leaves_params_and_advances_timestep() {
        let mut p = param(1.25);
        p.accumulate_grad(&[0.0]).unwrap();
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p.data(), &[1.25]);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = param(0.0);
        p.accumulate_grad(&[1.0]).unwrap();
        let mut st = AdamState::new([&p]);
        let hp = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        adam_step(&mut [&mut p], &mut st, &hp).unwrap();
        // m_hat = v_hat = 1 at t = 1
        assert!((p.data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn constant_gradient_descends() {
        for g in [2.0, -0.5] {
            let mut p = param(0.0);
            let mut st = AdamState::new([&p]);
            for _ in 0..50 {
                p.zero_grad();
                p.accumulate_grad(&[g]).unwrap();
                adam_step(&mut [&mut p], &mut st, &AdamConfig::default()).unwrap();
            }
            assert!(p.data()[0] * g < 0.0);
        }
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = Tensor::zeros(&[3]).requiring_grad();
        let other = Tensor::zeros(&[2]);
        let mut st = AdamState::new([&other]);
        assert!(adam_step(&mut [&mut p], &mut st, &AdamConfig::default()).is_err());
        let mut st = AdamState::new([&p]);
        let bad = AdamConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(adam_step(&mut [&mut p], &mut st, &bad).is_err());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut a = Tensor::zeros(&[2]).requiring_grad();
        a.accumulate_grad(&[3.0, 4.0]).unwrap();
        let n = clip_grad_norm(&mut [&mut a], 1.0);
        assert_eq!(n, 5.0);
        assert!((a.grad().unwrap()[0] - 0.6).abs() < 1e-12);
    }
}
