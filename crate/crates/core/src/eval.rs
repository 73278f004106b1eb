//! Rollout evaluation with per-timestep error statistics.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{config_err, Result};
use crate::predict::{Model, Predictor, Rollout};
use crate::preprocess::{initial_state_from_prefix, TvConfig, EVAL_PREFIX};

/// z-value of a two-sided 95% interval.
const Z95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Predicted steps scored after the initial condition.
    pub horizon: usize,
    /// Index of the initial condition; defaults to the earliest index with
    /// a full history.
    pub start: Option<usize>,
    /// Per-agent state channels entering the error.
    pub channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean over sequences of the per-step MSE, steps `1..=horizon`.
    pub mse: Vec<f64>,
    /// Half-width of the 95% interval around `mse`.
    pub ci_half_width: Vec<f64>,
    pub sequences: usize,
    pub horizon: usize,
    pub start: usize,
    pub channels: Vec<usize>,
    /// Rollouts that stopped early, as `(sequence, reason)`.
    pub failures: Vec<(usize, String)>,
}

impl EvalReport {
    /// MSE at predicted step `step` (1-based).
    pub fn mse_at(&self, step: usize) -> f64 {
        self.mse[step - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestep,mse_mean,ci_low,ci_high\n");
        for (k, (m, h)) in self.mse.iter().zip(&self.ci_half_width).enumerate() {
            let _ = writeln!(out, "{},{},{},{}", k + 1, m, m - h, m + h);
        }
        out
    }
}

/// Mean and `1.96·s/√n` with the sample standard deviation `s`.
pub fn mean_and_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Z95 * var.sqrt() / n.sqrt())
}

/// Evaluation parallelism from `MAGNET_THREADS` (unset: all cores).
pub fn eval_threads() -> Option<usize> {
    std::env::var("MAGNET_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

fn step_errors(rollout: &Rollout, truth: &[f64], frame: usize, dim: usize, channels: &[usize], horizon: usize) -> Vec<f64> {
    let agents = frame / dim;
    (1..=horizon)
        .map(|k| {
            if k >= rollout.frames {
                return f64::INFINITY;
            }
            let pred = &rollout.states[k * frame..(k + 1) * frame];
            let real = &truth[k * frame..(k + 1) * frame];
            let mut sum = 0.0;
            for a in 0..agents {
                for &c in channels {
                    let e = pred[a * dim + c] - real[a * dim + c];
                    sum += e * e;
                }
            }
            sum / (agents * channels.len()) as f64
        })
        .collect()
}

/// Rolls `predictor` out from `observed` history and scores it against
/// `truth` in physical units. Both datasets share shape; they differ only
/// when observations are noisy.
pub fn evaluate_rollout<P: Predictor + ?Sized>(
    predictor: &P,
    observed: &Dataset,
    truth: &Dataset,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if truth.data.is_empty() || truth.sequences == 0 {
        return config_err("empty test set");
    }
    if observed.sequences != truth.sequences
        || observed.length != truth.length
        || observed.frame_len() != truth.frame_len()
        || observed.state_dim != truth.state_dim
    {
        return config_err("observed and ground-truth sets differ in shape");
    }
    if opts.horizon == 0 {
        return config_err("horizon must be positive");
    }
    if opts.channels.is_empty() || opts.channels.iter().any(|&c| c >= truth.state_dim) {
        return config_err("metric channels out of range");
    }
    let history = predictor.history_len();
    let start = opts.start.unwrap_or(history.saturating_sub(1));
    if start + 1 < history {
        return config_err(format!("start {start} leaves no room for {history} observed states"));
    }
    if start + opts.horizon >= truth.length {
        return config_err(format!(
            "horizon {} from start {start} exceeds sequence length {}",
            opts.horizon, truth.length
        ));
    }
    let frame = truth.frame_len();
    let dim = truth.state_dim;

    let run = |m: usize| -> Result<(Vec<f64>, Option<String>)> {
        let obs = observed.sequence(m);
        let hist = &obs[(start + 1 - history) * frame..(start + 1) * frame];
        let rollout = predictor.rollout(hist, opts.horizon + 1)?;
        let real = &truth.sequence(m)[start * frame..(start + opts.horizon + 1) * frame];
        Ok((step_errors(&rollout, real, frame, dim, &opts.channels, opts.horizon), rollout.diagnostic))
    };
    let per_sequence: Vec<(Vec<f64>, Option<String>)> = match eval_threads() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| crate::error::Error::Config(format!("thread pool: {e}")))?
            .install(|| (0..truth.sequences).into_par_iter().map(run).collect::<Result<_>>())?,
        None => (0..truth.sequences).into_par_iter().map(run).collect::<Result<_>>()?,
    };

    let mut mse = Vec::with_capacity(opts.horizon);
    let mut half = Vec::with_capacity(opts.horizon);
    for k in 0..opts.horizon {
        let column: Vec<f64> = per_sequence.iter().map(|(e, _)| e[k]).collect();
        let (m, h) = mean_and_ci(&column);
        mse.push(m);
        half.push(h);
    }
    let failures = per_sequence
        .into_iter()
        .enumerate()
        .filter_map(|(m, (_, d))| d.map(|d| (m, d)))
        .collect();
    Ok(EvalReport {
        mse,
        ci_half_width: half,
        sequences: truth.sequences,
        horizon: opts.horizon,
        start,
        channels: opts.channels.clone(),
        failures,
    })
}

/// Starts a second-order model from velocities differentiated out of a
/// noisy position prefix instead of an observed state.
pub struct DenoisedStart<'a, M: ?Sized> {
    pub model: &'a M,
    pub tv: TvConfig,
    pub prefix: usize,
}

impl<'a, M: Model + ?Sized> DenoisedStart<'a, M> {
    pub fn new(model: &'a M, tv: TvConfig) -> Self {
        Self {
            model,
            tv,
            prefix: EVAL_PREFIX,
        }
    }
}

impl<M: Model + ?Sized> Predictor for DenoisedStart<'_, M> {
    fn history_len(&self) -> usize {
        self.prefix
    }

    fn rollout(&self, history: &[f64], frames: usize) -> Result<Rollout> {
        let dim = self.model.state_dim();
        if !dim.is_multiple_of(2) || Model::history_len(self.model) != 1 {
            return config_err("denoised starts need a single-state model over [position, velocity]");
        }
        let p = dim / 2;
        let positions: Vec<f64> = history.chunks_exact(dim).flat_map(|s| s[..p].to_vec()).collect();
        let init = initial_state_from_prefix(&positions, self.model.n_agents(), p, self.model.dt(), &self.tv, self.prefix)?;
        crate::predict::rollout(self.model, &init, frames)
    }
}
