//! Trained runs available for model initialization.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use mammoseg_core::evaluation::Segmenter;
use mammoseg_core::preprocess::PreprocConfig;
use mammoseg_core::View;
use mammoseg_nn::run::{load_run, RunError, CONFIG_FILE};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("UnknownRun: {0}")]
    UnknownRun(String),
    #[error(transparent)]
    Load(#[from] RunError),
}

/// A loaded model together with the view it was trained on and the
/// preprocessing its inputs need.
pub struct RegisteredRun {
    pub id: String,
    pub view: View,
    pub preprocess: PreprocConfig,
    pub model: Arc<dyn Segmenter>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunInfo {
    pub id: String,
    pub view: Option<View>,
    pub loaded: bool,
}

/// Runs registered in memory plus run directories under `root`, loaded on
/// first use and kept for the life of the service.
pub struct RunRegistry {
    root: Option<PathBuf>,
    runs: RwLock<BTreeMap<String, Arc<RegisteredRun>>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl RunRegistry {
    pub fn new(root: Option<PathBuf>) -> Self {
        Self {
            root,
            runs: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn insert(&self, run: RegisteredRun) {
        self.runs.write().expect("registry lock").insert(run.id.clone(), Arc::new(run));
    }

    /// Loads from disk on a miss, so callers should not hold async locks.
    pub fn get(&self, id: &str) -> Result<Arc<RegisteredRun>, RegistryError> {
        if let Some(run) = self.runs.read().expect("registry lock").get(id) {
            return Ok(run.clone());
        }
        let unknown = || RegistryError::UnknownRun(id.to_string());
        let root = self.root.as_ref().ok_or_else(unknown)?;
        if !valid_id(id) || !root.join(id).join(CONFIG_FILE).is_file() {
            return Err(unknown());
        }
        let loaded = load_run(&root.join(id))?;
        let run = Arc::new(RegisteredRun {
            id: id.to_string(),
            view: loaded.config.view,
            preprocess: loaded.config.preprocess,
            model: Arc::new(loaded.model),
        });
        let mut runs = self.runs.write().expect("registry lock");
        Ok(runs.entry(id.to_string()).or_insert(run).clone())
    }

    pub fn list(&self) -> Vec<RunInfo> {
        let runs = self.runs.read().expect("registry lock");
        let mut out: BTreeMap<String, RunInfo> = runs
            .values()
            .map(|r| {
                (r.id.clone(), RunInfo {
                    id: r.id.clone(),
                    view: Some(r.view),
                    loaded: true,
                })
            })
            .collect();
        if let Some(entries) = self.root.as_ref().and_then(|r| std::fs::read_dir(r).ok()) {
            for entry in entries.flatten() {
                let id = entry.file_name().to_string_lossy().into_owned();
                if valid_id(&id) && entry.path().join(CONFIG_FILE).is_file() {
                    out.entry(id.clone()).or_insert(RunInfo {
                        id,
                        view: mammoseg_nn::run::read_run_config(&entry.path()).ok().map(|c| c.view),
                        loaded: false,
                    });
                }
            }
        }
        out.into_values().collect()
    }
}
