//! Training run directories.
//!
//! ```text
//! runs/<id>/config.json    RunConfig
//! runs/<id>/best.msegw     weights of the best epoch
//! runs/<id>/history.csv    one row per epoch
//! runs/<id>/history.json   TrainHistory
//! ```

use std::path::{Path, PathBuf};

use mammoseg_core::fsutil::write_atomic;
use mammoseg_core::preprocess::PreprocConfig;
use mammoseg_core::View;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{load_weights, ModelError, ModelSpec, SegmentationModel};
use crate::train::{TrainConfig, TrainHistory};

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "best.msegw";
pub const HISTORY_CSV: &str = "history.csv";
pub const HISTORY_JSON: &str = "history.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("UnknownRun: {0}")]
    UnknownRun(String),
    #[error("Io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("InvalidRunConfig: {path}: {reason}")]
    InvalidConfig { path: PathBuf, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything needed to rebuild a run's inputs and model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub view: View,
    pub model: ModelSpec,
    pub preprocess: PreprocConfig,
    pub train: TrainConfig,
    pub data_root: Option<PathBuf>,
    pub split: Option<PathBuf>,
}

pub struct LoadedRun {
    pub id: String,
    pub config: RunConfig,
    pub model: SegmentationModel,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_run(dir: &Path, config: &RunConfig, model: &SegmentationModel, history: &TrainHistory) -> Result<(), RunError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let put = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        write_atomic(&path, bytes).map_err(io(&path))
    };
    put(CONFIG_FILE, &serde_json::to_vec_pretty(config).expect("run config serializes"))?;
    put(HISTORY_CSV, history.to_csv().as_bytes())?;
    put(HISTORY_JSON, &serde_json::to_vec_pretty(history).expect("history serializes"))?;
    model.save_weights(&dir.join(WEIGHTS_FILE))?;
    Ok(())
}

pub fn read_run_config(dir: &Path) -> Result<RunConfig, RunError> {
    let path = dir.join(CONFIG_FILE);
    if !path.is_file() {
        return Err(RunError::UnknownRun(dir.display().to_string()));
    }
    let text = std::fs::read_to_string(&path).map_err(io(&path))?;
    serde_json::from_str(&text).map_err(|e| RunError::InvalidConfig {
        path: path.clone(),
        reason: e.to_string(),
    })
}

pub fn read_history(dir: &Path) -> Result<TrainHistory, RunError> {
    let path = dir.join(HISTORY_JSON);
    let text = std::fs::read_to_string(&path).map_err(io(&path))?;
    serde_json::from_str(&text).map_err(|e| RunError::InvalidConfig {
        path: path.clone(),
        reason: e.to_string(),
    })
}

/// Loads config and best weights; the run id is the directory name.
pub fn load_run(dir: &Path) -> Result<LoadedRun, RunError> {
    let config = read_run_config(dir)?;
    let model = load_weights(&config.model, &dir.join(WEIGHTS_FILE))?;
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(LoadedRun { id, config, model })
}
