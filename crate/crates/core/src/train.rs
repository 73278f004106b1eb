//! Single-step training, frozen-core re-tuning and drift monitoring.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::predict::{single_step_errors, single_step_loss, windows_and_targets, Model};
use crate::preprocess::Standardizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Full,
    /// Core tensors stay fixed; only the wrapper is optimized.
    WrapperOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub decay: f64,
    pub min_learning_rate: f64,
    pub mode: TrainMode,
    pub seed: u64,
    /// Share of sequences (or, for a single sequence, of its length) held
    /// out for validation.
    pub val_fraction: f64,
    /// Restore the parameters with the lowest validation loss at the end.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            decay: 0.95,
            min_learning_rate: 1e-4,
            mode: TrainMode::Full,
            seed: 0,
            val_fraction: 0.1,
            keep_best: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return config_err(format!("decay {} outside (0, 1]", self.decay));
        }
        if !(self.learning_rate > 0.0) || !(self.min_learning_rate > 0.0) {
            return config_err("learning rates must be positive");
        }
        if self.min_learning_rate > self.learning_rate {
            return config_err("learning-rate floor exceeds the initial rate");
        }
        if self.batch_size == 0 {
            return config_err("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return config_err("validation fraction must be in [0, 1)");
        }
        Ok(())
    }

    /// `max(lr₀·decay^epoch, floor)`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decayed = self.learning_rate * self.decay.powi(epoch.min(i32::MAX as usize) as i32);
        decayed.max(self.min_learning_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    /// Validation loss of the model before the first update.
    pub initial_val_loss: Option<f64>,
    pub epochs: Vec<EpochRecord>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,learning_rate,train_loss,val_loss\n");
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        if let Some(v) = self.initial_val_loss {
            let _ = writeln!(out, "0,,,{v}");
        }
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.epoch + 1,
                r.learning_rate,
                r.train_loss,
                fmt(r.val_loss)
            );
        }
        out
    }

    pub fn final_val_loss(&self) -> Option<f64> {
        self.epochs.last().and_then(|r| r.val_loss).or(self.initial_val_loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub trace: LossTrace,
    /// Validation loss of the returned parameters (training loss when
    /// nothing was held out).
    pub recorded_val_loss: f64,
}

/// Train and validation sequences as owned frame buffers.
struct Split {
    train: Vec<Vec<f64>>,
    val: Vec<Vec<f64>>,
}

fn split(data: &Dataset, fraction: f64, history: usize) -> Result<Split> {
    let seqs: Vec<Vec<f64>> = (0..data.sequences).map(|m| data.sequence(m).to_vec()).collect();
    if fraction == 0.0 {
        return Ok(Split { train: seqs, val: Vec::new() });
    }
    if data.sequences >= 2 {
        let n_val = ((data.sequences as f64 * fraction).round() as usize).clamp(1, data.sequences - 1);
        let mut train = seqs;
        let val = train.split_off(data.sequences - n_val);
        return Ok(Split { train, val });
    }
    let frame = data.frame_len();
    let len = data.length;
    let n_val = ((len as f64 * fraction).round() as usize).max(history + 1);
    if len < n_val + history + 1 {
        return config_err(format!("sequence of {len} frames is too short to hold out {n_val} for validation"));
    }
    let seq = &seqs[0];
    Ok(Split {
        train: vec![seq[..(len - n_val) * frame].to_vec()],
        val: vec![seq[(len - n_val) * frame..].to_vec()],
    })
}

/// Stacked standardized windows and targets of every training pair.
struct Samples {
    windows: Vec<Vec<f64>>,
    targets: Vec<f64>,
    rows: usize,
}

fn collect_samples(std: &Standardizer, seqs: &[Vec<f64>], frame: usize, history: usize) -> Result<Samples> {
    let mut windows = vec![Vec::new(); history];
    let mut targets = Vec::new();
    for seq in seqs {
        let (w, t) = windows_and_targets(std, seq, frame, history)?;
        for (dst, src) in windows.iter_mut().zip(w) {
            dst.extend(src);
        }
        targets.extend(t);
    }
    let rows = targets.len() / frame;
    if rows == 0 {
        return config_err("no training pairs");
    }
    Ok(Samples { windows, targets, rows })
}

fn validation_loss<M: Model + ?Sized>(model: &M, val: &[Vec<f64>]) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&[f64]> = val.iter().map(Vec::as_slice).collect();
    single_step_loss(model, &refs).map(Some)
}

/// Trains `model` as a single-step predictor on every consecutive pair (or
/// window) of `data`, minimizing mean SmoothL1 in standardized coordinates.
///
/// In full mode the standardizer is refitted on the training split; in
/// wrapper-only mode the model's standardizer and core tensors are kept.
pub fn train_single_step<M: Model + ?Sized>(model: &mut M, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.n_agents != model.n_agents() || data.state_dim != model.state_dim() {
        return shape_err(
            "train",
            format!(
                "dataset of {} agents × {} dims for a model of {} × {}",
                data.n_agents,
                data.state_dim,
                model.n_agents(),
                model.state_dim()
            ),
        );
    }
    let history = model.history_len();
    let frame = model.frame_len();
    let parts = split(data, cfg.val_fraction, history)?;

    let first_trainable = match cfg.mode {
        TrainMode::Full => {
            let joined: Vec<f64> = parts.train.concat();
            model.set_standardizer(Standardizer::fit(&joined, data.state_dim)?)?;
            0
        }
        TrainMode::WrapperOnly => {
            if model.core_len() == 0 {
                return config_err("wrapper-only training needs a model with a shared core");
            }
            model.core_len()
        }
    };
    let samples = collect_samples(model.standardizer(), &parts.train, frame, history)?;

    let mut trace = LossTrace {
        initial_val_loss: validation_loss(model, &parts.val)?,
        epochs: Vec::new(),
    };
    let trainable_names: Vec<String> = model.tensor_names()[first_trainable..].to_vec();
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        model.tensors()[first_trainable..].iter(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.rows).collect();
    let mut best: Option<(f64, Vec<Tensor>)> = trace.initial_val_loss.map(|v| (v, model.tensors().to_vec()));

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        adam.set_learning_rate(lr);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch, rows) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let params: Vec<Var> = model
                .tensors()
                .iter()
                .enumerate()
                .map(|(k, t)| if k >= first_trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
                .collect();
            let gather = |src: &[f64]| -> Vec<f64> {
                rows.iter().flat_map(|&r| src[r * frame..(r + 1) * frame].iter().copied()).collect()
            };
            let window: Vec<Var> = samples
                .windows
                .iter()
                .map(|w| tape.constant(Tensor::new(vec![rows.len(), frame], gather(w)).expect("batch shape")))
                .collect();
            let target = Tensor::new(vec![rows.len(), frame], gather(&samples.targets))?;
            let pred = model.predict_next(&mut tape, &params, &window)?;
            let loss = tape.smooth_l1(pred, target)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, batch });
            }
            loss_sum += value * rows.len() as f64;
            let grads = tape.backward(loss)?;
            let grad_refs: Vec<Option<&Tensor>> = params[first_trainable..].iter().map(|&v| grads.get(v)).collect();
            let mut tensors: Vec<&mut Tensor> = model.tensors_mut()[first_trainable..].iter_mut().collect();
            adam.step(&trainable_names, &mut tensors, &grad_refs).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, batch },
                other => other,
            })?;
        }
        let val_loss = validation_loss(model, &parts.val)?;
        if let Some(v) = val_loss {
            if !v.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: order.len().div_ceil(cfg.batch_size),
                });
            }
            if cfg.keep_best && best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.tensors().to_vec()));
            }
        }
        trace.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / samples.rows as f64,
            val_loss,
        });
    }

    let recorded = match (cfg.keep_best, best) {
        (true, Some((v, tensors))) => {
            model.tensors_mut().clone_from_slice(&tensors);
            v
        }
        _ => match trace.final_val_loss() {
            Some(v) => v,
            None => {
                let refs: Vec<&[f64]> = parts.train.iter().map(Vec::as_slice).collect();
                single_step_loss(model, &refs)?
            }
        },
    };
    Ok(TrainReport {
        trace,
        recorded_val_loss: recorded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub min_learning_rate: f64,
    pub seed: u64,
    pub val_fraction: f64,
    /// Shortest observation stream accepted.
    pub min_length: usize,
}

impl Default for RetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            learning_rate: 5e-4,
            decay: 0.95,
            min_learning_rate: 1e-5,
            seed: 0,
            val_fraction: 0.1,
            min_length: 100,
        }
    }
}

impl RetuneConfig {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            decay: self.decay,
            min_learning_rate: self.min_learning_rate.min(self.learning_rate),
            mode: TrainMode::WrapperOnly,
            seed: self.seed,
            val_fraction: self.val_fraction,
            keep_best: true,
        }
    }
}

/// Wrapper-only training on one observation stream. Core tensors are never
/// written, and the returned parameters are the best seen on the held-out
/// tail of the stream.
pub fn retune_wrapper<M: Model + ?Sized>(model: &mut M, stream: &Dataset, cfg: &RetuneConfig) -> Result<TrainReport> {
    if stream.sequences != 1 {
        return config_err(format!("re-tuning takes a single sequence, got {}", stream.sequences));
    }
    if stream.length < cfg.min_length {
        return config_err(format!(
            "observation stream of {} samples is shorter than the minimum {}",
            stream.length, cfg.min_length
        ));
    }
    train_single_step(model, stream, &cfg.train_config())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorConfig {
    pub window: usize,
    /// Absolute threshold on the rolling error; when absent, `factor` times
    /// the model's recorded validation loss.
    pub threshold: Option<f64>,
    pub factor: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            window: 50,
            threshold: None,
            factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetuneEvent {
    /// Observation index whose prediction pushed the rolling error over.
    pub trigger_step: usize,
    pub rolling_error: f64,
    pub observations: usize,
    pub post_val_loss: Option<f64>,
}

/// First index at which the mean of the trailing `window` errors exceeds
/// `threshold`, with that mean. Later crossings are ignored.
pub fn detect_crossing(errors: &[f64], window: usize, threshold: f64) -> Option<(usize, f64)> {
    if window == 0 || errors.len() < window {
        return None;
    }
    let mut sum: f64 = errors[..window - 1].iter().sum();
    for t in window - 1..errors.len() {
        sum += errors[t];
        let mean = sum / window as f64;
        if mean > threshold {
            return Some((t, mean));
        }
        sum -= errors[t + 1 - window];
    }
    None
}

/// Scans one observation stream (physical units, whole frames) with the
/// model's single-step error and reports the first threshold crossing.
pub fn monitor_and_trigger<M: Model + ?Sized>(
    model: &M,
    stream: &[f64],
    recorded_val_loss: f64,
    cfg: &MonitorConfig,
) -> Result<Option<RetuneEvent>> {
    let threshold = cfg.threshold.unwrap_or(cfg.factor * recorded_val_loss);
    if !(threshold > 0.0) {
        return config_err("monitor threshold must be positive");
    }
    let errors = single_step_errors(model, stream)?;
    Ok(detect_crossing(&errors, cfg.window, threshold).map(|(t, mean)| RetuneEvent {
        trigger_step: t + model.history_len(),
        rolling_error: mean,
        observations: 0,
        post_val_loss: None,
    }))
}

/// Monitors `stream` (sequence 0 of a dataset) and, on a crossing, re-tunes
/// the wrapper on the observations from the trigger onwards.
pub fn monitor_and_retune<M: Model + ?Sized>(
    model: &mut M,
    stream: &Dataset,
    recorded_val_loss: f64,
    monitor: &MonitorConfig,
    retune: &RetuneConfig,
) -> Result<Option<RetuneEvent>> {
    let Some(mut event) = monitor_and_trigger(model, stream.sequence(0), recorded_val_loss, monitor)? else {
        return Ok(None);
    };
    let rest = stream.length - event.trigger_step;
    let mut tail = stream.select(0, 1)?;
    let frame = stream.frame_len();
    tail.data = stream.sequence(0)[event.trigger_step * frame..].to_vec();
    tail.length = rest;
    let report = retune_wrapper(model, &tail, retune)?;
    event.observations = rest;
    event.post_val_loss = Some(report.recorded_val_loss);
    Ok(Some(event))
}
