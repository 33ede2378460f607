use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Instant, SystemTime};

use clap::Args;
use mammoseg_core::datasplit::Subset;
use mammoseg_core::evaluation::{
    encode_png, render_overlay, render_report, EvalError, EvalReport, ReportFormat, SegmentRequest, Segmenter,
};
use mammoseg_core::fsutil::write_atomic;
use mammoseg_nn::run::load_run;

use crate::data::{exams_of, read_split, resolve_root, view_samples};
use crate::error::{CliError, Result};
use crate::manifest::{dir_of, RunManifest};

/// Score trained runs on one split subset and render the IoU table.
#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run directory; repeat for one table row per run.
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, default_value = "test")]
    pub subset: Subset,
    #[arg(long)]
    pub out: PathBuf,
    /// markdown or csv.
    #[arg(long, default_value = "markdown")]
    pub format: ReportFormat,
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Directory for ground-truth / prediction triptychs.
    #[arg(long)]
    pub overlays: Option<PathBuf>,
}

pub fn run(args: EvaluateArgs) -> Result<()> {
    let (started, clock) = (SystemTime::now(), Instant::now());
    let split = read_split(&args.split)?;
    let root = resolve_root(args.root.as_deref(), &split)?;
    let exams = exams_of(&split.assignment, args.subset);
    let mut reports = Vec::new();
    for run_dir in &args.runs {
        let run = load_run(run_dir)?;
        let cfg = &run.config;
        let samples = view_samples(&root, cfg.view, &exams, &cfg.preprocess)?;
        let mut fingerprint = BTreeMap::new();
        fingerprint.insert("run".into(), serde_json::json!(run.id));
        fingerprint.insert("view".into(), serde_json::json!(cfg.view));
        fingerprint.insert("subset".into(), serde_json::json!(args.subset));
        fingerprint.insert("model".into(), serde_json::to_value(&cfg.model).expect("spec serializes"));
        fingerprint.insert("preprocess".into(), serde_json::to_value(&cfg.preprocess).expect("config serializes"));
        let preds = samples
            .iter()
            .map(|s| run.model.predict_labels(SegmentRequest::for_sample(s)).map_err(EvalError::Model))
            .collect::<Result<Vec<_>, _>>()?;
        let label = format!("{} ({})", cfg.model.architecture.display_name(), cfg.view);
        let report = EvalReport::from_predictions(
            label,
            samples.iter().zip(&preds).map(|(s, p)| (s.image_id.as_str(), s.view, &s.labels, p)),
            fingerprint,
        )?;
        tracing::info!(run = %run.id, images = samples.len(), mean = report.mean_all, "evaluated");
        if let Some(dir) = &args.overlays {
            let dir = dir.join(&run.id);
            std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
            for (s, p) in samples.iter().zip(&preds) {
                let display = s.input.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
                let img = render_overlay(display.view(), &s.labels, p)?;
                let path = dir.join(format!("{}.png", s.image_id));
                write_atomic(&path, &encode_png(&img)).map_err(|e| CliError::io(&path, e))?;
            }
        }
        reports.push(report);
    }
    let table = render_report(&reports, args.format);
    write_atomic(&args.out, table.as_bytes()).map_err(|e| CliError::io(&args.out, e))?;
    let json_path = args.out.with_extension("json");
    let json = serde_json::to_vec_pretty(&reports).expect("reports serialize");
    write_atomic(&json_path, &json).map_err(|e| CliError::io(&json_path, e))?;

    let config = serde_json::json!({"subset": args.subset, "format": args.format, "runs": args.runs});
    let mut manifest = RunManifest::new("evaluate", config, started, clock.elapsed())
        .input("split", &args.split)
        .input("dataset", &root)
        .output("report", &args.out)
        .output("scores", &json_path);
    for (i, r) in args.runs.iter().enumerate() {
        manifest = manifest.input(&format!("run{i}"), r);
    }
    if let Some(dir) = &args.overlays {
        manifest = manifest.output("overlays", dir);
    }
    manifest.write(&dir_of(&args.out))?;
    print!("{table}");
    Ok(())
}
