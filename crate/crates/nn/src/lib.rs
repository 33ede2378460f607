//! Convolutional segmentation networks with a small tape-based autodiff engine.

pub mod decoder;
pub mod encoder;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod real;
pub mod run;
pub mod tensor;
pub mod train;

pub use graph::{Gradients, Graph, ParamId, Var};
pub use model::{build_model, load_weights, Architecture, EncoderKind, ModelError, ModelSpec, SegmentationModel};
pub use params::{Ctx, ParamKind, ParamStore};
pub use real::Real;
pub use run::{load_run, write_run, LoadedRun, RunConfig, RunError};
pub use tensor::Tensor;
pub use train::{train, TrainConfig, TrainError, TrainHistory};
