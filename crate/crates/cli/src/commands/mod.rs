pub mod evaluate;
pub mod ingest;
pub mod predict;
pub mod preprocess;
pub mod rasterize;
pub mod serve;
pub mod split;
pub mod synth;
pub mod train;
