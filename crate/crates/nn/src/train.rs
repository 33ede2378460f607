//! Mini-batch training with validation-loss early stopping.

use std::collections::BTreeMap;

use mammoseg_core::evaluation::EvalReport;
use mammoseg_core::geometry::argmax_labels;
use mammoseg_core::sample::Sample;
use mammoseg_core::{View, NUM_CLASSES};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::{jaccard_loss, jaccard_loss_grad, one_hot_batch, LossError, DEFAULT_EPSILON};
use crate::model::{batch_tensor, split_maps, ModelError, SegmentationModel};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Ctx, ParamStore};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("EmptyDataset: {0} set is empty")]
    EmptyDataset(&'static str),
    #[error("DivergedLoss: non-finite loss {loss} in epoch {epoch}")]
    DivergedLoss { epoch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("sample {image_id} is {got:?}, model expects {expected}x{expected}")]
    SampleShape { image_id: String, got: (usize, usize), expected: usize },
    #[error("validation scoring failed: {0}")]
    Evaluation(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub view: Option<View>,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            max_epochs: 65,
            patience: 20,
            seed: 0,
            view: None,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 || self.patience >= self.max_epochs {
            return Err(TrainError::InvalidConfig(format!(
                "need 0 <= patience ({}) < max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.epsilon > 0.0) {
            return Err(TrainError::InvalidConfig("epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean validation IoU per class code, `None` when the class never occurs.
    pub val_iou: [Option<f64>; NUM_CLASSES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation loss (earliest on ties).
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub optimizer: String,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,iou_background,iou_fatty,iou_fibroglandular,iou_pectoral,iou_nipple\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:.8},{:.8}", e.epoch, e.train_loss, e.val_loss));
            for v in e.val_iou {
                match v {
                    Some(v) => out.push_str(&format!(",{v:.6}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Validation {
    pub loss: f64,
    pub class_iou: [Option<f64>; NUM_CLASSES],
}

/// What the epoch loop needs from a model.
pub trait Trainable {
    type Snapshot;

    /// One optimizer step on `batch`; returns the batch loss before the step.
    fn train_batch(&mut self, batch: &[&Sample]) -> Result<f64, TrainError>;

    fn validate(&self, samples: &[Sample]) -> Result<Validation, TrainError>;

    fn snapshot(&self) -> Self::Snapshot;

    fn restore(&mut self, snapshot: Self::Snapshot);

    fn optimizer_name(&self) -> String;
}

/// Runs epochs until `patience` epochs pass without a strictly lower
/// validation loss or `max_epochs` is reached, then restores the best
/// snapshot.
pub fn train_loop<M: Trainable>(
    model: &mut M,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, M::Snapshot)> = None;
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = model.train_batch(&batch)?;
            if !loss.is_finite() {
                return Err(TrainError::DivergedLoss { epoch, loss });
            }
            total += loss;
            batches += 1;
        }
        let v = model.validate(val)?;
        if !v.loss.is_finite() {
            return Err(TrainError::DivergedLoss { epoch, loss: v.loss });
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_loss: v.loss,
            val_iou: v.class_iou,
        };
        on_epoch(&record);
        epochs.push(record);
        match &best {
            Some((_, loss, _)) if v.loss >= *loss => {}
            _ => best = Some((epoch, v.loss, model.snapshot())),
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if epoch - best_epoch >= config.patience && epoch < config.max_epochs {
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, _, snapshot) = best.expect("at least one epoch ran");
    model.restore(snapshot);
    Ok(TrainHistory {
        epochs,
        best_epoch,
        stopped_early,
        optimizer: model.optimizer_name(),
    })
}

/// A [`SegmentationModel`] with its optimizer state.
pub struct ModelTrainer {
    pub model: SegmentationModel,
    adam: Adam,
    batch_size: usize,
    epsilon: f64,
}

impl ModelTrainer {
    pub fn new(model: SegmentationModel, config: &TrainConfig) -> Self {
        let adam = Adam::new(
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
            &model.params,
        );
        Self {
            model,
            adam,
            batch_size: config.batch_size,
            epsilon: config.epsilon,
        }
    }

    fn check(&self, samples: &[&Sample]) -> Result<(), TrainError> {
        let s = self.model.spec().input_size;
        match samples.iter().find(|x| x.input.dim() != (s, s) || (x.labels.height(), x.labels.width()) != (s, s)) {
            Some(x) => Err(TrainError::SampleShape {
                image_id: x.image_id.clone(),
                got: x.input.dim(),
                expected: s,
            }),
            None => Ok(()),
        }
    }
}

impl Trainable for ModelTrainer {
    type Snapshot = ParamStore<f32>;

    fn train_batch(&mut self, batch: &[&Sample]) -> Result<f64, TrainError> {
        self.check(batch)?;
        let views: Vec<_> = batch.iter().map(|s| s.input.view()).collect();
        let labels: Vec<_> = batch.iter().map(|s| &s.labels).collect();
        let target = one_hot_batch::<f32>(&labels, NUM_CLASSES);
        let (loss, grads, updates) = {
            let mut ctx = Ctx::train(&self.model.params);
            let x = ctx.graph.input(batch_tensor(&views), false);
            let y = self.model.network().forward(&mut ctx, x);
            let (loss, seed) = jaccard_loss_grad(ctx.graph.value(y), &target, self.epsilon)?;
            let grads = ctx.graph.backward(y, seed).param_grads();
            (loss, grads, ctx.graph.take_buffer_updates())
        };
        if loss.is_finite() {
            self.adam.step(&mut self.model.params, &grads);
            self.model.params.apply_buffer_updates(updates);
        }
        Ok(loss)
    }

    /// Mean of per-batch losses over consecutive batches in the given order,
    /// with batch norm in inference mode.
    fn validate(&self, samples: &[Sample]) -> Result<Validation, TrainError> {
        let refs: Vec<&Sample> = samples.iter().collect();
        self.check(&refs)?;
        let mut total = 0.0;
        let mut batches = 0;
        let mut preds = Vec::with_capacity(samples.len());
        for chunk in refs.chunks(self.batch_size) {
            let views: Vec<_> = chunk.iter().map(|s| s.input.view()).collect();
            let labels: Vec<_> = chunk.iter().map(|s| &s.labels).collect();
            let out = self.model.forward_batch(&views)?;
            total += jaccard_loss(&out, &one_hot_batch(&labels, NUM_CLASSES), self.epsilon)?;
            batches += 1;
            for maps in split_maps(&out) {
                preds.push(argmax_labels(&maps));
            }
        }
        let report = EvalReport::from_predictions(
            "validation",
            samples.iter().zip(&preds).map(|(s, p)| (s.image_id.as_str(), s.view, &s.labels, p)),
            BTreeMap::new(),
        )
        .map_err(|e| TrainError::Evaluation(e.to_string()))?;
        Ok(Validation {
            loss: total / batches as f64,
            class_iou: report.class_means,
        })
    }

    fn snapshot(&self) -> Self::Snapshot {
        self.model.params.clone()
    }

    fn restore(&mut self, snapshot: Self::Snapshot) {
        self.model.params = snapshot;
    }

    fn optimizer_name(&self) -> String {
        self.adam.config.describe()
    }
}

/// Trains `model` and returns it carrying the best-epoch weights.
pub fn train(
    model: SegmentationModel,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(SegmentationModel, TrainHistory), TrainError> {
    let mut trainer = ModelTrainer::new(model, config);
    let history = train_loop(&mut trainer, train_set, val_set, config, on_epoch)?;
    Ok((trainer.model, history))
}
