//! Named parameter and buffer storage shared by graphs, optimizers and weight files.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, ParamId, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized by gradient descent.
    Weight,
    /// Updated outside the optimizer (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            kinds: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> ParamId {
        self.names.push(name.into());
        self.kinds.push(kind);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn weights(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Weight)
    }

    /// Number of trainable scalars.
    pub fn weight_count(&self) -> usize {
        self.weights().map(|id| self.get(id).len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, t) in updates {
            assert_eq!(self.kind(id), ParamKind::Buffer, "{} is not a buffer", self.name(id));
            assert_eq!(self.get(id).shape, t.shape);
            self.tensors[id.0] = t;
        }
    }
}

/// Parameter registration during network construction.
pub struct Init<R> {
    pub store: ParamStore<f32>,
    rng: R,
}

impl<R: Rng> Init<R> {
    pub fn new(rng: R) -> Self {
        Self {
            store: ParamStore::new(),
            rng,
        }
    }

    /// He-normal kernel, `std = sqrt(2 / fan_in)`.
    pub fn kaiming(&mut self, name: &str, shape: [usize; 4]) -> ParamId {
        let fan_in = shape[1] * shape[2] * shape[3];
        let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| normal.sample(&mut self.rng) as f32)
            .collect();
        self.store.add(name, Tensor::from_vec(shape, data), ParamKind::Weight)
    }

    pub fn constant(&mut self, name: &str, c: usize, value: f32, kind: ParamKind) -> ParamId {
        self.store.add(name, Tensor::from_vec([c, 1, 1, 1], vec![value; c]), kind)
    }
}

/// Graph under construction plus the parameters it reads.
pub struct Ctx<'a, T: Real> {
    pub graph: Graph<T>,
    pub store: &'a ParamStore<T>,
    track_params: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    /// Training context: batch statistics, parameter gradients.
    pub fn train(store: &'a ParamStore<T>) -> Self {
        Self {
            graph: Graph::new(true),
            store,
            track_params: true,
        }
    }

    /// Inference context: running statistics, no gradient bookkeeping.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self {
            graph: Graph::new(false),
            store,
            track_params: false,
        }
    }

    /// Running statistics but parameter gradients kept (used by gradient checks).
    pub fn eval_with_grads(store: &'a ParamStore<T>) -> Self {
        Self {
            graph: Graph::new(false),
            store,
            track_params: true,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.get(id).clone();
        if self.track_params {
            self.graph.param(id, value)
        } else {
            self.graph.input(value, false)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kaiming_statistics() {
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(1));
        let id = init.kaiming("w", [64, 32, 3, 3]);
        let t = init.store.get(id);
        let n = t.len() as f64;
        let mean = t.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01);
        assert!((var - 2.0 / 288.0).abs() < 0.1 * 2.0 / 288.0);
    }

    #[test]
    fn buffers_are_not_weights() {
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(1));
        init.kaiming("w", [2, 1, 1, 1]);
        let b = init.constant("bn.mean", 2, 0.0, ParamKind::Buffer);
        assert_eq!(init.store.weight_count(), 2);
        init.store.apply_buffer_updates(vec![(b, Tensor::from_vec([2, 1, 1, 1], vec![1.0, 2.0]))]);
        assert_eq!(init.store.get(b).data, vec![1.0, 2.0]);
    }
}
