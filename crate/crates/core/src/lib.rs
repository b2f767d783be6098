pub mod campaign;
pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod editor;
pub mod error;
pub mod grad;
pub mod keyvalue;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod seeds;
pub mod train;

pub use error::{Error, Result};

/// Concrete `f64` instantiations of the generic building blocks.
pub type ModelParams = model::ModelParams<f64>;
pub type CovarianceEstimate = editor::CovarianceEstimate<f64>;
pub type SolverSettings = keyvalue::SolverSettings<f64>;
pub type EditSettings = editor::EditSettings<f64>;
pub type EditOutcome = editor::EditOutcome<f64>;
pub type UpdateDelta = editor::UpdateDelta<f64>;
pub type CollapseThresholds = diagnostics::CollapseThresholds<f64>;
pub type MetricRecord = metrics::MetricRecord<f64>;
