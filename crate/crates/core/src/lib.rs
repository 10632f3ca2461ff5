//! Gap forecasting for ride-hailing grids with semantic region attention.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod grid;
pub mod ingest;
pub mod model;
pub mod nn;
pub mod plot;
pub mod semantic;
pub mod spatial;
pub mod synthetic;
pub mod temporal;
pub mod training;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use dataset::{Dataset, SampleWindow};
pub use error::{Error, Result};
pub use exec::Execution;
pub use grid::{Channel, CityCube, GridSpec, NormalizationStats};
pub use model::{Model, ModelConfig, ModelKind};
pub use training::TrainConfig;
