//! Core data formats and numerics for multitask atomistic graph training.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the tools use.

pub mod checkpoint;
pub mod container;
pub mod elements;
pub mod imbalance;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod preprocess;
pub mod record;
pub mod scalar;
pub mod telemetry;
pub mod uq;

pub use record::GraphRecord;
pub use scalar::Scalar;

pub type Model = model::ReferenceModel<f64>;
pub type Prediction = model::Prediction<f64>;
pub type Optimizer = optim::Optimizer<f64>;
pub type LossSums = model::LossSums<f64>;
pub type EnsemblePrediction = uq::EnsemblePrediction<f64>;
