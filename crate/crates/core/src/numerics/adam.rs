use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// Per-parameter moment estimates for Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            first_moment: params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
            step_count: 0,
        }
    }

    /// One update of every parameter in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if !p.same_shape(g) || !p.same_shape(&self.first_moment[i]) {
                return Err(Error::Shape(format!(
                    "adam: parameter {i} is {:?}, gradient {:?}",
                    p.dims(),
                    g.dims()
                )));
            }
        }
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        state.step(&mut [&mut p], &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn unit_gradient_first_step() {
        let mut p = Tensor::scalar(1.0);
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(cfg, &[&p]);
        state.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        // m_hat = v_hat = 1 after bias correction
        let expected = 1.0 - cfg.lr * (1.0 / (1.0 + cfg.eps));
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn step_count_increments() {
        let mut p = Tensor::scalar(0.0);
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        for k in 1..=5 {
            state.step(&mut [&mut p], &[Tensor::scalar(0.3)]).unwrap();
            assert_eq!(state.step_count, k);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        let err = state.step(&mut [&mut p], &[Tensor::zeros(&[3])]);
        assert!(matches!(err, Err(Error::Shape(_))));
    }
}
