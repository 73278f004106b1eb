//! Sampled trajectory collections.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::sim::{SystemKind, SystemSpec};

/// Provenance of a dataset: the generating system, its seed, and any
/// observation noise applied afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub spec: SystemSpec,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseInfo {
    pub sigma_scale: f64,
    pub seed: u64,
    pub channels: Vec<usize>,
}

/// `M` sequences of `L` samples of `N` agents with `d` state values each,
/// stored `[sequence][time][agent][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub system: SystemKind,
    pub n_agents: usize,
    pub state_dim: usize,
    pub sequences: usize,
    pub length: usize,
    pub dt: f64,
    pub data: Vec<f64>,
    pub meta: Option<DatasetMeta>,
}

impl Dataset {
    pub fn new(
        system: SystemKind,
        n_agents: usize,
        state_dim: usize,
        sequences: usize,
        length: usize,
        dt: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        if n_agents == 0 || state_dim == 0 || sequences == 0 || length == 0 {
            return config_err("dataset dimensions must be positive");
        }
        let expect = sequences * length * n_agents * state_dim;
        if data.len() != expect {
            return config_err(format!(
                "dataset payload has {} values, expected {expect}",
                data.len()
            ));
        }
        Ok(Self {
            system,
            n_agents,
            state_dim,
            sequences,
            length,
            dt,
            data,
            meta: None,
        })
    }

    /// Values in one time sample (all agents).
    pub fn frame_len(&self) -> usize {
        self.n_agents * self.state_dim
    }

    pub fn sequence(&self, m: usize) -> &[f64] {
        let len = self.length * self.frame_len();
        &self.data[m * len..(m + 1) * len]
    }

    pub fn sequence_mut(&mut self, m: usize) -> &mut [f64] {
        let len = self.length * self.frame_len();
        &mut self.data[m * len..(m + 1) * len]
    }

    pub fn frame(&self, m: usize, t: usize) -> &[f64] {
        let f = self.frame_len();
        let start = (m * self.length + t) * f;
        &self.data[start..start + f]
    }

    /// Copy of sequences `first..first + count`.
    pub fn select(&self, first: usize, count: usize) -> Result<Self> {
        if count == 0 || first + count > self.sequences {
            return config_err(format!(
                "sequences {first}..{} out of {}",
                first + count,
                self.sequences
            ));
        }
        let len = self.length * self.frame_len();
        let mut out = self.clone();
        out.sequences = count;
        out.data = self.data[first * len..(first + count) * len].to_vec();
        Ok(out)
    }

    /// Copy truncated to the first `length` samples of every sequence.
    pub fn truncate(&self, length: usize) -> Result<Self> {
        if length == 0 || length > self.length {
            return config_err(format!("cannot truncate length {} to {length}", self.length));
        }
        let f = self.frame_len();
        let mut data = Vec::with_capacity(self.sequences * length * f);
        for m in 0..self.sequences {
            data.extend_from_slice(&self.sequence(m)[..length * f]);
        }
        let mut out = self.clone();
        out.length = length;
        out.data = data;
        Ok(out)
    }

    pub fn spec(&self) -> Option<&SystemSpec> {
        self.meta.as_ref().map(|m| &m.spec)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
