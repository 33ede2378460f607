use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime};

use clap::Args;
use mammoseg_core::datasplit::Subset;
use mammoseg_core::preprocess::PreprocConfig;
use mammoseg_core::View;
use mammoseg_nn::run::{write_run, RunConfig, HISTORY_CSV, WEIGHTS_FILE};
use mammoseg_nn::train::{train, TrainConfig};
use mammoseg_nn::{build_model, Architecture, EncoderKind, ModelSpec, TrainError};
use serde::{Deserialize, Serialize};

use crate::config::layered;
use crate::data::{exams_of, read_split, resolve_root, view_samples};
use crate::error::Result;
use crate::manifest::RunManifest;

/// Settings file layout for `train --config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub architecture: Architecture,
    pub encoder: EncoderKind,
    pub preprocess: PreprocConfig,
    pub train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            architecture: Architecture::Fpn,
            encoder: EncoderKind::EfficientNetB3,
            preprocess: PreprocConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Train one model for one view and save the best-epoch weights.
#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub view: View,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset root; defaults to the one recorded in the split file.
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// unet, fpn, linknet or pspnet.
    #[arg(long)]
    pub arch: Option<Architecture>,
    /// efficientnet-b3 or small.
    #[arg(long)]
    pub encoder: Option<EncoderKind>,
    /// Model input size (a multiple of 32).
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file mirroring the settings fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn resolve(args: &TrainArgs) -> Result<TrainSettings> {
    let mut s = layered(&TrainSettings::default(), args.config.as_deref())?;
    if let Some(v) = args.arch {
        s.architecture = v;
    }
    if let Some(v) = args.encoder {
        s.encoder = v;
    }
    if let Some(v) = args.size {
        s.preprocess.model_size = v;
    }
    if let Some(v) = args.lr {
        s.train.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        s.train.batch_size = v;
    }
    if let Some(v) = args.max_epochs {
        s.train.max_epochs = v;
    }
    if let Some(v) = args.patience {
        s.train.patience = v;
    }
    if let Some(v) = args.seed {
        s.train.seed = v;
    }
    s.train.view = Some(args.view);
    Ok(s)
}

fn nonempty_dataset(root: &Path) -> Result<()> {
    let annotated = mammoseg_core::ingest::scan_dataset(root)?
        .iter()
        .any(|e| e.is_annotated());
    if annotated {
        Ok(())
    } else {
        Err(TrainError::EmptyDataset("training").into())
    }
}

pub fn run(args: TrainArgs) -> Result<()> {
    let (started, clock) = (SystemTime::now(), Instant::now());
    let settings = resolve(&args)?;
    if let Some(root) = &args.root {
        nonempty_dataset(root)?;
    }
    let split = read_split(&args.split)?;
    let root = resolve_root(args.root.as_deref(), &split)?;
    nonempty_dataset(&root)?;
    settings.preprocess.validate()?;
    settings.train.validate()?;
    let spec = ModelSpec::new(settings.architecture, settings.encoder, settings.preprocess.model_size)
        .with_seed(settings.train.seed);
    let model = build_model(&spec)?;

    let load = |subset| view_samples(&root, args.view, &exams_of(&split.assignment, subset), &settings.preprocess);
    let (train_set, val_set) = (load(Subset::Train)?, load(Subset::Validation)?);
    tracing::info!(
        view = %args.view,
        architecture = spec.architecture.display_name(),
        parameters = model.parameter_count(),
        train = train_set.len(),
        validation = val_set.len(),
        "training"
    );
    let (model, history) = train(model, &train_set, &val_set, &settings.train, |e| {
        let present: Vec<f64> = e.val_iou.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len().max(1) as f64;
        tracing::info!(epoch = e.epoch, train_loss = e.train_loss, val_loss = e.val_loss, val_mean_iou = mean, "epoch");
    })?;
    let best = history.best();
    tracing::info!(best_epoch = history.best_epoch, val_loss = best.val_loss, epochs = history.epochs.len(), "done");

    let config = RunConfig {
        view: args.view,
        model: spec,
        preprocess: settings.preprocess.clone(),
        train: settings.train.clone(),
        data_root: Some(root.clone()),
        split: Some(args.split.clone()),
    };
    write_run(&args.out, &config, &model, &history)?;
    RunManifest::new("train", serde_json::to_value(&config).expect("config serializes"), started, clock.elapsed())
        .input("dataset", &root)
        .input("split", &args.split)
        .output("weights", &args.out.join(WEIGHTS_FILE))
        .output("history", &args.out.join(HISTORY_CSV))
        .write(&args.out)?;
    println!(
        "{} epochs, best epoch {} (validation loss {:.4}) -> {}",
        history.epochs.len(),
        history.best_epoch,
        best.val_loss,
        args.out.display()
    );
    Ok(())
}
