//! AdamW with lazily created per-parameter state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Parameters are identified by a caller-chosen ordered key. State (moments
/// and step count) is created on the first update of a key, so bias
/// correction counts only the steps that parameter actually took.
#[derive(Clone, Debug)]
pub struct AdamW<K: Ord> {
    pub config: AdamWConfig,
    state: BTreeMap<K, Moments>,
}

impl<K: Ord + Clone> AdamW<K> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, key: &K, param: &mut [f64], grad: &[f64]) {
        assert_eq!(param.len(), grad.len(), "parameter and gradient lengths differ");
        let c = self.config;
        let s = self.state.entry(key.clone()).or_insert_with(|| Moments {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
            t: 0,
        });
        s.t += 1;
        let bc1 = 1.0 - c.beta1.powi(s.t as i32);
        let bc2 = 1.0 - c.beta2.powi(s.t as i32);
        for i in 0..param.len() {
            let g = grad[i];
            s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * g;
            s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = s.m[i] / bc1;
            let vhat = s.v[i] / bc2;
            param[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * param[i]);
        }
    }

    pub fn has_state(&self, key: &K) -> bool {
        self.state.contains_key(key)
    }

    pub fn tracked(&self) -> usize {
        self.state.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate_against_the_gradient_sign() {
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            ..AdamWConfig::default()
        });
        let mut p = vec![1.0, -2.0];
        opt.step(&"w", &mut p, &[0.5, -3.0]);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn state_is_created_lazily() {
        let mut opt: AdamW<u32> = AdamW::new(AdamWConfig::default());
        assert!(!opt.has_state(&3));
        opt.step(&3, &mut [0.0], &[1.0]);
        assert!(opt.has_state(&3) && !opt.has_state(&4));
        assert_eq!(opt.tracked(), 1);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_without_gradient() {
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        });
        let mut p = vec![2.0];
        opt.step(&0, &mut p, &[0.0]);
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }
}
