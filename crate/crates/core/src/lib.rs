//! Mammography structure segmentation: domain types, image preparation,
//! annotation geometry, dataset splitting, evaluation and synthetic phantoms.

pub mod datasplit;
pub mod evaluation;
pub mod fsutil;
pub mod geometry;
pub mod ingest;
pub mod preprocess;
pub mod sample;
pub mod testkit;
pub mod types;

pub use types::*;
