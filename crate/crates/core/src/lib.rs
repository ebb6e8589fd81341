//! Estimating ranking metrics on benchmarks whose labels are noisy and
//! only partly vetted, and choosing which labels to vet next.
//!
//! The numeric core is generic over [`Scalar`] / [`Real`]; the aliases
//! below fix it to `f64`.

pub mod dataset;
pub mod engine;
pub mod estimators;
pub mod metrics;
pub mod scalar;
pub mod strategies;

pub use scalar::{Real, Scalar};

pub type PosteriorEstimate = estimators::PosteriorEstimate<f64>;
pub type FittedEstimator = estimators::FittedEstimator<f64>;
pub type TagModel = estimators::TagModel<f64>;
pub type MatchPredictor = estimators::MatchPredictor<f64>;
pub type LabelBelief = metrics::LabelBelief<f64>;
pub type PositiveCount = metrics::PositiveCount<f64>;
pub type ActiveRun = engine::ActiveRun<f64>;
pub type RunResult = engine::RunResult<f64>;
pub type SimulationSummary = engine::SimulationSummary<f64>;
