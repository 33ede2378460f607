use mammoseg_core::sample::Sample;
use mammoseg_core::{LabelMap, Laterality, StructureClass, View};
use mammoseg_nn::train::{train_loop, TrainConfig, TrainError, Trainable, Validation};
use std::cell::Cell;

use ndarray::Array2;
use proptest::prelude::*;

/// Scripted validation losses; the "weights" are the epoch counter.
struct Scripted {
    losses: Vec<f64>,
    validated: Cell<usize>,
    epoch: usize,
    batches_seen: Vec<Vec<String>>,
    train_loss: f64,
}

impl Scripted {
    fn new(losses: Vec<f64>) -> Self {
        Self {
            losses,
            validated: Cell::new(0),
            epoch: 0,
            batches_seen: Vec::new(),
            train_loss: 0.5,
        }
    }
}

impl Trainable for Scripted {
    type Snapshot = usize;

    fn train_batch(&mut self, batch: &[&Sample]) -> Result<f64, TrainError> {
        self.batches_seen.push(batch.iter().map(|s| s.image_id.clone()).collect());
        Ok(self.train_loss)
    }

    fn validate(&self, _: &[Sample]) -> Result<Validation, TrainError> {
        let epoch = self.validated.get() + 1;
        self.validated.set(epoch);
        Ok(Validation {
            loss: self.losses[epoch - 1],
            class_iou: [None; 5],
        })
    }

    fn snapshot(&self) -> usize {
        self.validated.get()
    }

    fn restore(&mut self, s: usize) {
        self.epoch = s;
    }

    fn optimizer_name(&self) -> String {
        "scripted".into()
    }
}

fn samples(n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| Sample {
            image_id: format!("s{i}"),
            exam_id: format!("e{i}"),
            view: View::Mlo,
            laterality: Laterality::R,
            original_size: (4, 4),
            input: Array2::zeros((4, 4)),
            labels: LabelMap::filled(4, 4, StructureClass::Background),
        })
        .collect()
}

fn config(max_epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig {
        max_epochs,
        patience,
        ..TrainConfig::default()
    }
}

#[test]
fn increasing_validation_loss_stops_after_patience() {
    let losses: Vec<f64> = (0..65).map(|e| 1.0 + e as f64).collect();
    let mut m = Scripted::new(losses);
    // 9 samples, batch 4 -> 3 batches per epoch
    let h = train_loop(&mut m, &samples(9), &samples(2), &config(65, 20), |_| {}).unwrap();
    assert_eq!(h.epochs.len(), 21);
    assert_eq!(h.best_epoch, 1);
    assert!(h.stopped_early);
    assert_eq!(m.epoch, 1, "restored the epoch-1 snapshot");
}

#[test]
fn runs_to_max_epochs_when_improving() {
    let losses: Vec<f64> = (0..10).map(|e| 1.0 / (1.0 + e as f64)).collect();
    let mut m = Scripted::new(losses);
    let h = train_loop(&mut m, &samples(9), &samples(2), &config(10, 3), |_| {}).unwrap();
    assert_eq!(h.epochs.len(), 10);
    assert_eq!(h.best_epoch, 10);
    assert!(!h.stopped_early);
}

#[test]
fn empty_sets_are_rejected() {
    let mut m = Scripted::new(vec![1.0; 5]);
    assert!(matches!(
        train_loop(&mut m, &[], &samples(2), &config(5, 2), |_| {}),
        Err(TrainError::EmptyDataset("training"))
    ));
    assert!(matches!(
        train_loop(&mut m, &samples(2), &[], &config(5, 2), |_| {}),
        Err(TrainError::EmptyDataset("validation"))
    ));
}

#[test]
fn non_finite_loss_diverges() {
    let mut m = Scripted::new(vec![1.0; 5]);
    m.train_loss = f64::NAN;
    assert!(matches!(
        train_loop(&mut m, &samples(4), &samples(2), &config(5, 2), |_| {}),
        Err(TrainError::DivergedLoss { epoch: 1, .. })
    ));
}

#[test]
fn patience_must_be_below_max_epochs() {
    let mut m = Scripted::new(vec![1.0; 5]);
    assert!(matches!(
        train_loop(&mut m, &samples(4), &samples(2), &config(5, 5), |_| {}),
        Err(TrainError::InvalidConfig(_))
    ));
}

#[test]
fn shuffle_is_seeded_and_covers_every_sample() {
    let run = |seed| {
        let mut m = Scripted::new(vec![1.0; 3]);
        let cfg = TrainConfig { seed, ..config(3, 2) };
        train_loop(&mut m, &samples(9), &samples(2), &cfg, |_| {}).unwrap();
        m.batches_seen
    };
    let a = run(4);
    assert_eq!(a, run(4));
    assert_ne!(a, run(5));
    let mut first: Vec<String> = a[..3].concat();
    first.sort();
    let mut all: Vec<String> = samples(9).into_iter().map(|s| s.image_id).collect();
    all.sort();
    assert_eq!(first, all);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn early_stopping_contract(losses in prop::collection::vec(0.0f64..1.0, 30), patience in 1usize..10) {
        let mut m = Scripted::new(losses.clone());
        let h = train_loop(&mut m, &samples(5), &samples(1), &config(30, patience), |_| {}).unwrap();
        let n = h.epochs.len();
        prop_assert!(n - h.best_epoch <= patience + 1 || n == 30);
        let min = losses[..n].iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(h.best().val_loss, min);
        prop_assert_eq!(losses[..n].iter().position(|&l| l == min).unwrap() + 1, h.best_epoch);
        prop_assert_eq!(m.epoch, h.best_epoch);
    }
}
