use std::path::PathBuf;
use std::time::{Instant, SystemTime};

use clap::Args;
use image::{ImageBuffer, Luma};
use mammoseg_core::fsutil::write_atomic;
use mammoseg_core::ingest::{load_record, StudySource};
use mammoseg_nn::run::load_run;
use mammoseg_service::init::{predict_structures, ModelInit, PROVENANCE_MODEL};
use mammoseg_service::DEFAULT_CONTOUR_TOLERANCE_PX;

use crate::error::{CliError, Result};
use crate::manifest::{dir_of, RunManifest};

/// Segment one image and write the per-structure contours as JSON.
#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Image file (.png with sidecar, or .dcm).
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the model-resolution argmax as an 8-bit code image.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Contour simplification tolerance in model pixels.
    #[arg(long, default_value_t = DEFAULT_CONTOUR_TOLERANCE_PX)]
    pub tolerance: f64,
}

pub fn run(args: PredictArgs) -> Result<()> {
    let (started, clock) = (SystemTime::now(), Instant::now());
    let run = load_run(&args.run)?;
    let record = load_record(&StudySource::detect(&args.image)?)?;
    if record.view != run.config.view {
        return Err(CliError::new(
            "service",
            format!("ViewMismatch: run {} expects {} images, {} is {}", run.id, run.config.view, record.image_id, record.view),
        ));
    }
    let (labels, structures) = predict_structures(&record, &run.model, &run.config.preprocess, args.tolerance)?;
    let init = ModelInit {
        image_id: record.image_id.clone(),
        run_id: run.id.clone(),
        provenance: PROVENANCE_MODEL.into(),
        structures,
    };
    let json = serde_json::to_vec_pretty(&init).expect("init serializes");
    write_atomic(&args.out, &json).map_err(|e| CliError::io(&args.out, e))?;
    let mut manifest = RunManifest::new("predict", serde_json::json!({"tolerance": args.tolerance}), started, clock.elapsed())
        .input("run", &args.run)
        .input("image", &args.image)
        .output("contours", &args.out);
    if let Some(path) = &args.labels {
        let (h, w) = labels.codes().dim();
        let img: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(w as u32, h as u32, labels.codes().iter().copied().collect()).expect("shape matches");
        let mut png = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| CliError::io(path, e))?;
        write_atomic(path, &png).map_err(|e| CliError::io(path, e))?;
        manifest = manifest.output("labels", path);
    }
    manifest.write(&dir_of(&args.out))?;
    println!("{}", args.out.display());
    Ok(())
}
