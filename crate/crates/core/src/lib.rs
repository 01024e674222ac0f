//! Depth uncertainty networks.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! training loops, data pipeline, checkpoints and command-line tool use.

pub mod baselines;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod objectives;
pub mod pruning;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use metrics::CalibrationReport;
pub use nn::{ArchitectureConfig, Mode, Task};
pub use numerics::{ParamBundle, ParamRole};
pub use scalar::Scalar;

pub type Matrix = numerics::Matrix<f64>;
pub type Model = model::DunModel<f64>;
pub type DepthDistribution = model::DepthDistribution<f64>;
pub type LogLikTable = objectives::LogLikTable<f64>;
pub type Targets = objectives::Targets<f64>;
pub type Objective = objectives::Objective<f64>;
pub type Prediction = metrics::Prediction<f64>;
pub type PredictiveGaussian = metrics::PredictiveGaussian<f64>;
