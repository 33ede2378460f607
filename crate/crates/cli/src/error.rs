use std::fmt;
use std::path::Path;

use mammoseg_core::datasplit::SplitError;
use mammoseg_core::evaluation::EvalError;
use mammoseg_core::geometry::GeometryError;
use mammoseg_core::ingest::IngestError;
use mammoseg_core::preprocess::PreprocessError;
use mammoseg_core::sample::SampleError;
use mammoseg_core::testkit::TestkitError;
use mammoseg_nn::run::RunError;
use mammoseg_nn::{ModelError, TrainError};
use mammoseg_service::init::InitError;
use mammoseg_service::StoreError;

/// A domain failure, printed as `<module>: <error>`; the error text starts
/// with the error case name.
#[derive(Debug)]
pub struct CliError {
    pub module: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(module: &'static str, message: impl fmt::Display) -> Self {
        Self {
            module,
            message: message.to_string(),
        }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self::new("io", format!("Io: {}: {e}", path.display()))
    }

    pub fn config(message: impl fmt::Display) -> Self {
        Self::new("config", format!("InvalidConfig: {message}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.module, self.message)
    }
}

macro_rules! from_module {
    ($($ty:ty => $module:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::new($module, e)
            }
        })*
    };
}

from_module! {
    IngestError => "ingest",
    PreprocessError => "preprocess",
    GeometryError => "geometry",
    SplitError => "datasplit",
    SampleError => "preprocess",
    EvalError => "evaluation",
    TestkitError => "testkit",
    ModelError => "models",
    TrainError => "training",
    RunError => "training",
    InitError => "service",
    StoreError => "service",
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
