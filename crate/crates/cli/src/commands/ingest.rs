use std::path::PathBuf;
use std::time::{Instant, SystemTime};

use clap::Args;
use mammoseg_core::fsutil::write_atomic;
use mammoseg_core::ingest::{load_record, scan_dataset_with_format, SourceFormat};
use mammoseg_core::{validate_record, DensityClass, ImageMeta};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::manifest::{dir_of, RunManifest};

/// Load and validate every image of a dataset directory.
#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub root: PathBuf,
    /// Force a reader: dicom or png16.
    #[arg(long)]
    pub format: Option<SourceFormat>,
    /// Write the validated index as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct IndexEntry {
    #[serde(flatten)]
    meta: ImageMeta,
    path: PathBuf,
    density: DensityClass,
    annotated: bool,
    annotation_version: Option<u64>,
}

pub fn run(args: IngestArgs) -> Result<()> {
    let (started, clock) = (SystemTime::now(), Instant::now());
    let entries = scan_dataset_with_format(&args.root, args.format)?;
    let mut index = Vec::new();
    for e in entries {
        let record = load_record(&e.source)?;
        let violations = validate_record(&record);
        if let Some(v) = violations.first() {
            return Err(CliError::new("core", format!("InvalidRecord: {}: {v}", record.image_id)));
        }
        index.push(IndexEntry {
            annotated: e.is_annotated(),
            annotation_version: e.annotation.as_ref().map(|a| a.version),
            meta: e.meta,
            path: e.source.path,
            density: e.density,
        });
    }
    let annotated = index.iter().filter(|e| e.annotated).count();
    tracing::info!(images = index.len(), annotated, "dataset ingested");
    if let Some(out) = &args.out {
        let json = serde_json::to_vec_pretty(&index).expect("index serializes");
        write_atomic(out, &json).map_err(|e| CliError::io(out, e))?;
        RunManifest::new("ingest", serde_json::json!({"format": args.format}), started, clock.elapsed())
            .input("dataset", &args.root)
            .output("index", out)
            .write(&dir_of(out))?;
    }
    println!("{} images, {} annotated, {} unannotated", index.len(), annotated, index.len() - annotated);
    Ok(())
}
