//! Finite-difference verification of network parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::ParamId;
use crate::model::SegmentationModel;
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckEntry {
    /// `|a - n| / max(|a|, |n|)`, zero when both vanish.
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// Weighted sum of the softmax output of a training-mode forward pass in f64.
fn objective(model: &SegmentationModel, store: &ParamStore<f64>, x: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    let mut ctx = Ctx::train(store);
    let xv = ctx.graph.input(x.clone(), false);
    let y = model.network().forward(&mut ctx, xv);
    ctx.graph.value(y).data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
}

/// Compares backpropagated gradients of a random pixel-weighted output scalar
/// with central differences (step `h`) on `samples` randomly chosen scalars,
/// drawn from distinct weight tensors.
pub fn check_gradients(model: &SegmentationModel, batch: usize, samples: usize, h: f64, seed: u64) -> Vec<GradCheckEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = model.spec().input_size;
    let shape = [batch, model.spec().in_channels, s, s];
    let x = Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| rng.random::<f64>()).collect());
    let store: ParamStore<f64> = model.params.cast();

    let (weights, grads) = {
        let mut ctx = Ctx::train(&store);
        let xv = ctx.graph.input(x.clone(), false);
        let y = model.network().forward(&mut ctx, xv);
        let out_shape = ctx.graph.value(y).shape;
        let weights = Tensor::from_vec(out_shape, (0..out_shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let grads = ctx.graph.backward(y, weights.clone()).param_grads();
        (weights, grads)
    };

    let mut tensors: Vec<ParamId> = store.weights().collect();
    let mut entries = Vec::new();
    while entries.len() < samples && !tensors.is_empty() {
        let id = tensors.swap_remove(rng.random_range(0..tensors.len()));
        let Some((_, g)) = grads.iter().find(|(p, _)| *p == id) else { continue };
        let index = rng.random_range(0..g.len());
        let mut plus = store.clone();
        plus.get_mut(id).data[index] += h;
        let mut minus = store.clone();
        minus.get_mut(id).data[index] -= h;
        let numeric = (objective(model, &plus, &x, &weights) - objective(model, &minus, &x, &weights)) / (2.0 * h);
        entries.push(GradCheckEntry {
            param: store.name(id).to_string(),
            index,
            analytic: g.data[index],
            numeric,
        });
    }
    entries
}
