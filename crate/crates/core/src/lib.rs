//! Lorenz-96 observing-system simulation lab.
//!
//! A nature run of the Lorenz-96 model is observed with noise, assimilated
//! with a local ensemble transform Kalman filter, and forecast three ways:
//! by the model from the analysis, by a reservoir computer trained on raw
//! observations, and by a reservoir computer trained on analyses.

pub mod error;
pub mod exec;
pub mod forecast;
pub mod harness;
pub mod io;
pub mod letkf;
pub mod lorenz96;
pub mod osse;
pub mod reservoir;
pub mod series;

pub use error::{Error, Result};
pub use exec::Execution;
pub use forecast::{EvalProtocol, Framework, PredictionSet, SkillSeries};
pub use harness::{ExperimentConfig, RunArtifact, RunOptions, Runner};
pub use letkf::{AnalysisSeries, Ensemble, LetkfConfig};
pub use lorenz96::{ModelParams, StateVector, Trajectory};
pub use osse::{ObsSchedule, ObservationOperator, Observations};
pub use reservoir::{ReservoirNet, ReservoirParams};
pub use series::Series;
