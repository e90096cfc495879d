//! Fusion of coarse daily land surface temperature with a multi-sensor
//! reference scene into fine-resolution LST.

pub mod baselines;
pub mod cli;
pub mod dataset;
pub mod enhance;
pub mod metrics;
pub mod model;
pub mod nnet;
pub mod preprocess;
pub mod raster;
pub mod synth;
pub mod train;

use thiserror::Error;

/// Any pipeline failure, tagged with the module it came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Raster(#[from] raster::RasterError),
    #[error(transparent)]
    Preprocess(#[from] preprocess::PreprocessError),
    #[error(transparent)]
    Enhance(#[from] enhance::EnhanceError),
    #[error(transparent)]
    Nn(#[from] nnet::NnError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Machine-readable category naming the originating module.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Raster(_) => "raster",
            Error::Preprocess(_) => "preprocess",
            Error::Enhance(_) => "enhance",
            Error::Nn(_) => "nnet",
            Error::Model(_) => "model",
            Error::Train(_) => "train",
            Error::Metrics(_) => "metrics",
            Error::Dataset(_) => "dataset",
            Error::Synth(_) => "synth",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
