use std::path::PathBuf;
use std::time::{Instant, SystemTime};

use clap::Args;
use image::{ImageBuffer, Luma};
use mammoseg_core::fsutil::write_atomic;
use mammoseg_core::ingest::{load_record, save_png16, scan_dataset};
use mammoseg_core::preprocess::{preprocess_pipeline, PreprocConfig};
use mammoseg_core::ImageRecord;

use crate::config::layered;
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

/// Write display images (`<out>/images`, portable format, original
/// geometry) and model inputs (`<out>/model`, canonical orientation) for
/// every image of a dataset.
#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub p_low: Option<f64>,
    #[arg(long)]
    pub p_high: Option<f64>,
    /// Relative CLAHE clip limit.
    #[arg(long)]
    pub clip: Option<f64>,
    /// CLAHE tile size as a fraction of the image size.
    #[arg(long)]
    pub kernel_fraction: Option<f64>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    /// JSON file mirroring the preprocessing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub const APPLIED_CONFIG_FILE: &str = "preprocess.json";

pub fn resolve(args: &PreprocessArgs) -> Result<PreprocConfig> {
    let mut c = layered(&PreprocConfig::default(), args.config.as_deref())?;
    macro_rules! flag {
        ($($f:ident => $p:ident),*) => { $(if let Some(v) = args.$f { c.$p = v; })* };
    }
    flag!(p_low => p_low, p_high => p_high, clip => clahe_clip_limit, kernel_fraction => clahe_kernel_fraction,
          bins => clahe_bins, size => model_size);
    c.validate()?;
    Ok(c)
}

fn png8(pixels: &ndarray::Array2<u8>) -> Result<Vec<u8>> {
    let (h, w) = pixels.dim();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, pixels.iter().copied().collect()).expect("shape matches");
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| CliError::new("preprocess", format!("Encode: {e}")))?;
    Ok(out)
}

pub fn run(args: PreprocessArgs) -> Result<()> {
    let (started, clock) = (SystemTime::now(), Instant::now());
    let config = resolve(&args)?;
    let images_dir = args.out.join("images");
    let model_dir = args.out.join("model");
    std::fs::create_dir_all(&model_dir).map_err(|e| CliError::io(&model_dir, e))?;
    let entries = scan_dataset(&args.input)?;
    for e in &entries {
        let record = load_record(&e.source)?;
        let pre = preprocess_pipeline(&record, &config)?;
        let display = ImageRecord {
            pixels: pre.display.mapv(u16::from),
            ..record
        };
        save_png16(&display, &images_dir)?;
        let model = pre.model_input.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
        let path = model_dir.join(format!("{}.png", display.image_id));
        write_atomic(&path, &png8(&model)?).map_err(|err| CliError::io(&path, err))?;
    }
    let applied = args.out.join(APPLIED_CONFIG_FILE);
    let json = serde_json::to_vec_pretty(&config).expect("config serializes");
    write_atomic(&applied, &json).map_err(|e| CliError::io(&applied, e))?;
    RunManifest::new("preprocess", serde_json::to_value(&config).expect("config serializes"), started, clock.elapsed())
        .input("dataset", &args.input)
        .output("images", &images_dir)
        .output("model_inputs", &model_dir)
        .output("config", &applied)
        .write(&args.out)?;
    println!("{} images -> {}", entries.len(), args.out.display());
    Ok(())
}
