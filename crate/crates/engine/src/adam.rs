//! Adam with an L2 penalty folded into the gradient.
//!
//! ```text
//! g  = grad + weight_decay * θ
//! m  = β₁ m + (1 − β₁) g
//! v  = β₂ v + (1 − β₂) g²
//! θ -= lr · (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε)
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::layers::Param;
use crate::tensor::Scalar;
use crate::{EngineError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub first: Vec<T>,
    pub second: Vec<T>,
}

/// Optimizer state: hyperparameters, step counter and per-parameter moments
/// keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step_count: u64,
    moments: BTreeMap<String, Moments<T>>,
}

/// One Adam update of `value` in place. `t` is the 1-based step number.
pub fn adam_update<T: Scalar>(value: &mut [T], grad: &[T], moments: &mut Moments<T>, t: u64, cfg: &AdamConfig) {
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let wd = T::lit(cfg.weight_decay);
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    let c1 = T::lit(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t as i32));
    for i in 0..value.len() {
        let g = grad[i] + wd * value[i];
        let m = b1 * moments.first[i] + (one - b1) * g;
        let v = b2 * moments.second[i] + (one - b2) * g * g;
        moments.first[i] = m;
        moments.second[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        value[i] = value[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_parts(config: AdamConfig, step_count: u64, moments: BTreeMap<String, Moments<T>>) -> Self {
        Self {
            config,
            step_count,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments<T>> {
        &self.moments
    }

    /// Updates every trainable parameter from its accumulated gradient.
    ///
    /// Nothing is modified if any trainable gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        for p in params.iter().filter(|p| p.trainable) {
            if p.grad.dims() != p.value.dims() {
                return Err(EngineError::Usage(format!(
                    "gradient dims {:?} differ from parameter `{}` dims {:?}",
                    p.grad.dims(),
                    p.name,
                    p.value.dims()
                )));
            }
            if let Some((index, value)) = p.grad.data().iter().enumerate().find(|(_, g)| !g.is_finite()) {
                return Err(EngineError::NonFiniteGradient {
                    param: p.name.clone(),
                    index,
                    value: value.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        for p in params.iter_mut().filter(|p| p.trainable) {
            let len = p.value.len();
            let moments = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                first: vec![T::zero(); len],
                second: vec![T::zero(); len],
            });
            if moments.first.len() != len {
                return Err(EngineError::Usage(format!("moment size mismatch for `{}`", p.name)));
            }
            let Param { value, grad, .. } = &mut **p;
            adam_update(value.data_mut(), grad.data(), moments, t, &self.config);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(values: Vec<f64>, grads: Vec<f64>) -> Param<f64> {
        let n = values.len();
        let mut p = Param::new("p", Tensor::from_rows(1, n, values).unwrap());
        p.grad = Tensor::from_rows(1, n, grads).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg);
        let mut p = param(vec![0.5, -0.5, 2.0], vec![3.0, -0.2, 1e-3]);
        adam.step(&mut [&mut p]).unwrap();
        let deltas: Vec<f64> = p.value.data().iter().zip([0.5, -0.5, 2.0]).map(|(a, b)| a - b).collect();
        assert!((deltas[0] + 1e-4).abs() < 1e-9);
        assert!((deltas[1] - 1e-4).abs() < 1e-9);
        assert!((deltas[2] + 1e-4).abs() < 1e-8);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg);
        let mut p = param(vec![1.0, -2.0], vec![0.0, 0.0]);
        for _ in 0..3 {
            adam.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value.data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 3);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut good = param(vec![1.0], vec![0.5]);
        let mut bad = param(vec![1.0, 2.0], vec![0.0, f64::NAN]);
        bad.name = "bad".into();
        let err = adam.step(&mut [&mut good, &mut bad]).unwrap_err();
        assert!(matches!(err, EngineError::NonFiniteGradient { ref param, index: 1, .. } if param == "bad"));
        assert_eq!(good.value.data(), &[1.0]);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = param(vec![1.0], vec![0.5]);
        p.trainable = false;
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data(), &[1.0]);
        assert!(adam.moments().is_empty());
    }

    #[test]
    fn second_moments_stay_non_negative() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = param(vec![0.1, 0.2, 0.3], vec![-5.0, 0.0, 7.0]);
        for _ in 0..4 {
            adam.step(&mut [&mut p]).unwrap();
        }
        assert!(adam.moments()["p"].second.iter().all(|&v| v >= 0.0));
    }
}
