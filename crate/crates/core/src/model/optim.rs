use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::nn::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// Adam with decoupled weight decay. Moments are keyed by parameter name.
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Update every trainable parameter from its accumulated gradient.
    pub fn step(&mut self, params: Vec<&mut Param<T>>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr = T::lit(c.learning_rate);
        let decay = T::one() - lr * T::lit(c.weight_decay);
        let step_size = T::lit(c.learning_rate / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        for p in params.into_iter().filter(|p| p.trainable) {
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            for (((w, &g), mv), vv) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * g;
                *vv = b2 * *vv + (T::one() - b2) * g * g;
                *w *= decay;
                *w -= step_size * *mv / (vv.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::new("w", Tensor::from_vec(&[2], vec![1.0f64, -1.0]));
        p.grad = Tensor::from_vec(&[2], vec![0.5, -3.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(vec![&mut p]);
        // bias-corrected first step is lr * sign(g), after decay
        let d = 1.0 - 1e-4 * 1e-4;
        assert!((p.value.data()[0] - (d - 1e-4)).abs() < 1e-9);
        assert!((p.value.data()[1] - (-d + 1e-4)).abs() < 1e-9);
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut p = Param::new("w", Tensor::from_vec(&[1], vec![2.0f32]));
        p.trainable = false;
        p.grad = Tensor::from_vec(&[1], vec![1.0]);
        AdamW::new(AdamWConfig::default()).step(vec![&mut p]);
        assert_eq!(p.value.data(), &[2.0]);
    }
}
