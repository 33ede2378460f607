use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;
use mammoseg_service::{serve, AppState, ServiceConfig, DEFAULT_CONTOUR_TOLERANCE_PX};

use crate::error::{CliError, Result};

/// Run the annotation service.
#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "MAMMOSEG_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "MAMMOSEG_RUNS")]
    pub runs: Option<PathBuf>,
    #[arg(long, env = "MAMMOSEG_BIND", default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long, env = "MAMMOSEG_MAX_INFERENCES", default_value_t = 2)]
    pub max_inferences: usize,
    /// Contour simplification tolerance in model pixels.
    #[arg(long, default_value_t = DEFAULT_CONTOUR_TOLERANCE_PX)]
    pub contour_tolerance: f64,
}

pub fn run(args: ServeArgs) -> Result<()> {
    let mut config = ServiceConfig::new(&args.data);
    config.runs_root = args.runs;
    config.max_concurrent_inferences = args.max_inferences;
    config.contour_tolerance_px = args.contour_tolerance;
    let state = Arc::new(AppState::open(&config)?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::new("service", format!("Runtime: {e}")))?;
    runtime
        .block_on(serve(state, args.bind))
        .map_err(|e| CliError::new("service", format!("Bind: {}: {e}", args.bind)))
}
