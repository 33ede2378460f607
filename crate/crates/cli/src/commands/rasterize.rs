use std::path::PathBuf;
use std::time::{Instant, SystemTime};

use clap::Args;
use image::{ImageBuffer, Luma};
use mammoseg_core::fsutil::write_atomic;
use mammoseg_core::geometry::rasterize_annotations;
use mammoseg_core::ingest::{read_annotation, scan_dataset};

use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

/// Rasterize annotation files into 8-bit label images with class codes 0-4.
#[derive(Debug, Args)]
pub struct RasterizeArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset root holding `images/`, for image sizes; defaults to the
    /// parent of the annotations directory.
    #[arg(long)]
    pub root: Option<PathBuf>,
}

pub fn run(args: RasterizeArgs) -> Result<()> {
    let (started, clock) = (SystemTime::now(), Instant::now());
    let root = match &args.root {
        Some(r) => r.clone(),
        None => args.annotations.parent().map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".")),
    };
    let sizes: std::collections::HashMap<String, (usize, usize)> = scan_dataset(&root)?
        .into_iter()
        .map(|e| (e.meta.image_id, (e.meta.width, e.meta.height)))
        .collect();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&args.annotations)
        .map_err(|e| CliError::io(&args.annotations, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    for path in &paths {
        let doc = read_annotation(path)?;
        let &(w, h) = sizes
            .get(&doc.image_id)
            .ok_or_else(|| CliError::new("ingest", format!("MissingImage: no image for annotation {}", doc.image_id)))?;
        let labels = rasterize_annotations(&doc.annotation_set(), w, h)?;
        let img: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(w as u32, h as u32, labels.codes().iter().copied().collect()).expect("shape matches");
        let mut png = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| CliError::new("geometry", format!("Encode: {e}")))?;
        let target = args.out.join(format!("{}.png", doc.image_id));
        write_atomic(&target, &png).map_err(|e| CliError::io(&target, e))?;
    }
    RunManifest::new("rasterize", serde_json::json!({}), started, clock.elapsed())
        .input("annotations", &args.annotations)
        .input("dataset", &root)
        .output("label_maps", &args.out)
        .write(&args.out)?;
    println!("{} label maps -> {}", paths.len(), args.out.display());
    Ok(())
}
