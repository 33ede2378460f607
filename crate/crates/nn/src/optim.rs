//! Adaptive-moment optimizer.

use serde::{Deserialize, Serialize};

use crate::graph::ParamId;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

impl AdamConfig {
    pub fn describe(&self) -> String {
        format!("adam(lr={}, beta1={}, beta2={}, eps={})", self.learning_rate, self.beta1, self.beta2, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore<f32>) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; if store.kind(id) == ParamKind::Weight { store.get(id).len() } else { 0 }]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One bias-corrected update; parameters without a gradient keep their
    /// values but their moments still decay.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Tensor<f32>)]) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for &(id, ref g) in grads {
            assert_eq!(store.kind(id), ParamKind::Weight, "gradient for buffer {}", store.name(id));
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for (((pv, &gv), mv), vv) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv as f64;
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let update = learning_rate * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                *pv = (*pv as f64 - update) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::from_vec([2, 1, 1, 1], vec![1.0, -1.0]), ParamKind::Weight);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[(id, Tensor::from_vec([2, 1, 1, 1], vec![0.5, -3.0]))]);
        assert!((store.get(id).data[0] - (1.0 - 1e-3)).abs() < 1e-6);
        assert!((store.get(id).data[1] - (-1.0 + 1e-3)).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::from_vec([1, 1, 1, 1], vec![3.0]), ParamKind::Weight);
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                ..AdamConfig::default()
            },
            &store,
        );
        for _ in 0..500 {
            let w = store.get(id).data[0];
            adam.step(&mut store, &[(id, Tensor::from_vec([1, 1, 1, 1], vec![2.0 * (w - 1.0)]))]);
        }
        assert!((store.get(id).data[0] - 1.0).abs() < 1e-2);
    }
}
