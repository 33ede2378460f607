//! `mammoseg`: ingestion, preprocessing, rasterization, splitting,
//! training, evaluation, prediction, phantom synthesis and the annotation
//! service behind one binary.
//!
//! Exit codes: 0 success, 1 domain error (`<module>: <ErrorCase>: ...` on
//! stderr), 2 usage error.

mod commands;
mod config;
mod data;
mod error;
mod manifest;

use std::io::IsTerminal;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use commands::*;

#[derive(Debug, Parser)]
#[command(name = "mammoseg", version, about = "Mammography structure segmentation pipeline")]
struct Cli {
    /// Emit progress as JSON lines on stderr.
    #[arg(long, global = true)]
    json_logs: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    Ingest(ingest::IngestArgs),
    Preprocess(preprocess::PreprocessArgs),
    Rasterize(rasterize::RasterizeArgs),
    Split(split::SplitArgs),
    Train(train::TrainArgs),
    Evaluate(evaluate::EvaluateArgs),
    Predict(predict::PredictArgs),
    Synth(synth::SynthArgs),
    Serve(serve::ServeArgs),
}

fn init_logging(json: bool) {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"));
    let builder = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_ansi(std::io::stderr().is_terminal())
        .with_writer(std::io::stderr);
    if json {
        builder.json().init();
    } else {
        builder.compact().init();
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.json_logs);
    let result = match cli.command {
        Command::Ingest(a) => ingest::run(a),
        Command::Preprocess(a) => preprocess::run(a),
        Command::Rasterize(a) => rasterize::run(a),
        Command::Split(a) => split::run(a),
        Command::Train(a) => train::run(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::Predict(a) => predict::run(a),
        Command::Synth(a) => synth::run(a),
        Command::Serve(a) => serve::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
