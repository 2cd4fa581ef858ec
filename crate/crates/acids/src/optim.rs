//! Adaptive-moment first-order optimizer.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam state over a fixed list of parameter tensors.
///
/// Parameters whose gradient is identically zero are treated as not
/// participating in the step: their moments and step counts stay put.
/// This is what keeps the inactive head bank frozen during alternating
/// head training.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub(crate) t: Vec<u64>,
    pub(crate) m: Vec<Array2<f64>>,
    pub(crate) v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Adam {
            config,
            t: vec![0; shapes.len()],
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.m.len()
    }

    /// One update over all participating parameters, with bias-corrected
    /// moments per parameter.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            self.t[i] += 1;
            let bias1 = 1.0 - beta1.powi(self.t[i] as i32);
            let bias2 = 1.0 - beta2.powi(self.t[i] as i32);
            self.m[i] = &self.m[i] * beta1 + &(g * (1.0 - beta1));
            self.v[i] = &self.v[i] * beta2 + &(g.mapv(|x| x * x) * (1.0 - beta2));
            let m_hat = &self.m[i] / bias1;
            let v_hat = &self.v[i] / bias2;
            **p -= &(m_hat / (v_hat.mapv(f64::sqrt) + epsilon) * learning_rate);
        }
    }

    pub(crate) fn restore(
        config: AdamConfig,
        t: Vec<u64>,
        m: Vec<Array2<f64>>,
        v: Vec<Array2<f64>>,
    ) -> Self {
        Adam { config, t, m, v }
    }

    pub(crate) fn state(&self) -> (&[u64], &[Array2<f64>], &[Array2<f64>]) {
        (&self.t, &self.m, &self.v)
    }
}
