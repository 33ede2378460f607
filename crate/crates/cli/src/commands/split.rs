use std::path::PathBuf;
use std::time::{Instant, SystemTime};

use clap::Args;
use mammoseg_core::datasplit::{stratified_split, Ratios, SplitRecord};
use mammoseg_core::ingest::scan_dataset;

use crate::data::{write_split, SplitFile};
use crate::error::Result;
use crate::manifest::{dir_of, RunManifest};

/// Assign whole exams to train/validation/test, balanced by density.
/// Only annotated images are counted.
#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub root: PathBuf,
    /// Train, validation and test shares.
    #[arg(long, default_value = "0.66,0.23,0.11")]
    pub ratios: Ratios,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: SplitArgs) -> Result<()> {
    let (started, clock) = (SystemTime::now(), Instant::now());
    let records: Vec<SplitRecord> = scan_dataset(&args.root)?
        .into_iter()
        .filter(|e| e.is_annotated())
        .map(|e| SplitRecord {
            image_id: e.meta.image_id,
            exam_id: e.meta.exam_id,
            view: e.meta.view,
            density: e.density,
        })
        .collect();
    let config = serde_json::json!({"ratios": args.ratios, "seed": args.seed});
    let assignment = stratified_split(&records, args.ratios, args.seed)?;
    let table = assignment.summary.to_markdown();
    let file = SplitFile {
        assignment,
        data_root: Some(args.root.clone()),
    };
    write_split(&args.out, &file)?;
    RunManifest::new("split", config, started, clock.elapsed())
        .input("dataset", &args.root)
        .output("split", &args.out)
        .write(&dir_of(&args.out))?;
    print!("{table}");
    Ok(())
}
