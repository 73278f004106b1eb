//! Multi-agent dynamics discovery workbench.
//!
//! Ground-truth simulators for three interacting systems, a core+wrapper
//! interaction network that learns their dynamics from sampled states,
//! baseline predictors, training with frozen-core online re-tuning, rollout
//! evaluation, and the binary file formats tying them together.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod magnet;
pub mod nn;
pub mod predict;
pub mod preprocess;
pub mod sim;
pub mod train;

pub use dataset::{Dataset, DatasetMeta};
pub use error::{Error, Result};
pub use magnet::{ArchConfig, IntegrationMode, MagnetModel};
pub use predict::{Model, ModelKind, Predictor, Rollout};
pub use preprocess::{Standardizer, TvConfig};
pub use sim::{generate_dataset, rk4_integrate, SystemKind, SystemSpec};
