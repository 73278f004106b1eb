//! JSON config files. Every section is optional and unknown keys are rejected.

use std::path::Path;

use anyhow::Context;
use magnet_core::train::{MonitorConfig, RetuneConfig, TrainConfig};
use magnet_core::{ArchConfig, TvConfig};
use serde::de::DeserializeOwned;
use serde::Deserialize;

/// `train` config.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFile {
    pub train: TrainConfig,
    /// Initialization seed for the network weights.
    pub model_seed: u64,
    /// Architecture override; defaults follow the dataset's system.
    pub arch: Option<ArchConfig>,
    /// Rebuild velocities from noisy positions with TV differentiation
    /// before training.
    pub denoise: bool,
    pub tv: TvConfig,
}

/// `retune` config.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetuneFile {
    pub retune: RetuneConfig,
    /// When present, retune only after the monitored error crosses the
    /// threshold, on the observations from the trigger onwards.
    pub monitor: Option<MonitorConfig>,
}

/// `baseline` config for the learned baselines.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineFile {
    pub train: TrainConfig,
    pub model_seed: u64,
    pub mlp_hidden: Vec<usize>,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
}

impl Default for BaselineFile {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model_seed: 0,
            mlp_hidden: magnet_core::baselines::MlpBaseline::DEFAULT_HIDDEN.to_vec(),
            lstm_hidden: 64,
            lstm_layers: 2,
        }
    }
}

/// Reads a config, or returns the defaults when no path is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}
