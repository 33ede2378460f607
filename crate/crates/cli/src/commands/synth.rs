use std::path::PathBuf;
use std::time::{Instant, SystemTime};

use clap::Args;
use mammoseg_core::testkit::{generate_corpus, CorpusParams};

use crate::config::layered;
use crate::error::Result;
use crate::manifest::RunManifest;

/// Generate a synthetic phantom dataset.
#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub exams: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Standard deviation of the additive noise.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub cc_pectoral_probability: Option<f64>,
    #[arg(long)]
    pub nd_fraction: Option<f64>,
    /// JSON file with corpus parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(args: SynthArgs) -> Result<()> {
    let (started, clock) = (SystemTime::now(), Instant::now());
    let mut params = layered(&CorpusParams::default(), args.config.as_deref())?;
    macro_rules! flag {
        ($($f:ident => $p:ident),*) => { $(if let Some(v) = args.$f { params.$p = v; })* };
    }
    flag!(seed => seed, width => width, height => height, noise => noise_sigma,
          cc_pectoral_probability => cc_pectoral_probability, nd_fraction => nd_fraction);
    let summary = generate_corpus(args.exams, &params, &args.out)?;
    tracing::info!(exams = summary.exams, images = summary.images, density = ?summary.density_counts, "corpus written");
    let config = serde_json::json!({"exams": args.exams, "params": params});
    RunManifest::new("synth", config, started, clock.elapsed())
        .output("dataset", &args.out)
        .write(&args.out)?;
    println!("{} exams, {} images -> {}", summary.exams, summary.images, args.out.display());
    Ok(())
}
