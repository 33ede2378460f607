//! Split files and sample loading shared by train, evaluate and split.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use mammoseg_core::datasplit::{SplitAssignment, Subset};
use mammoseg_core::fsutil::write_atomic;
use mammoseg_core::ingest::{load_record, scan_dataset};
use mammoseg_core::preprocess::PreprocConfig;
use mammoseg_core::sample::{prepare_sample, Sample};
use mammoseg_core::View;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// `split.json`: the assignment plus the dataset it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    #[serde(flatten)]
    pub assignment: SplitAssignment,
    #[serde(default)]
    pub data_root: Option<PathBuf>,
}

pub fn read_split(path: &Path) -> Result<SplitFile> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::new("datasplit", format!("InvalidSplitFile: {}: {e}", path.display())))
}

pub fn write_split(path: &Path, split: &SplitFile) -> Result<()> {
    let json = serde_json::to_vec_pretty(split).expect("split serializes");
    write_atomic(path, &json).map_err(|e| CliError::io(path, e))
}

/// Dataset root from the flag, else from the split file.
pub fn resolve_root(flag: Option<&Path>, split: &SplitFile) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| split.data_root.clone())
        .ok_or_else(|| CliError::config("no --root given and the split file records no data_root"))
}

pub fn exams_of(split: &SplitAssignment, subset: Subset) -> BTreeSet<String> {
    split.exams_in(subset).map(str::to_owned).collect()
}

/// Annotated images of one view whose exam is in `exams`, prepared at the
/// configured model size, in dataset order.
pub fn view_samples(root: &Path, view: View, exams: &BTreeSet<String>, config: &PreprocConfig) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for entry in scan_dataset(root)? {
        let Some(ann) = &entry.annotation else { continue };
        if entry.meta.view != view || !exams.contains(&entry.meta.exam_id) {
            continue;
        }
        let record = load_record(&entry.source)?;
        out.push(prepare_sample(&record, ann, config)?);
    }
    Ok(out)
}
