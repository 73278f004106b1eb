//! Shared interface of learned next-state models and iterative rollout.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::loss::smooth_l1_value;
use crate::nn::{Tape, Tensor, Var};
use crate::preprocess::{Direction, Standardizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Magnet,
    Mlp,
    Lstm,
}

impl ModelKind {
    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Magnet => 0,
            ModelKind::Mlp => 1,
            ModelKind::Lstm => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Magnet => "magnet",
            ModelKind::Mlp => "mlp",
            ModelKind::Lstm => "lstm",
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::Magnet),
            1 => Some(ModelKind::Mlp),
            2 => Some(ModelKind::Lstm),
            _ => None,
        }
    }
}

/// A trainable single-step predictor working on standardized states.
///
/// Parameters live in a flat, ordered list of named tensors. The first
/// [`Model::core_len`] of them form the shared core; the rest may be tuned
/// on their own.
pub trait Model: Send + Sync {
    fn kind(&self) -> ModelKind;
    fn n_agents(&self) -> usize;
    /// Per-agent state length.
    fn state_dim(&self) -> usize;
    /// Sampling period the model steps by.
    fn dt(&self) -> f64;
    /// Number of consecutive states consumed per prediction.
    fn history_len(&self) -> usize;
    fn tensor_names(&self) -> &[String];
    fn tensors(&self) -> &[Tensor];
    fn tensors_mut(&mut self) -> &mut [Tensor];
    fn core_len(&self) -> usize {
        0
    }
    fn standardizer(&self) -> &Standardizer;
    fn set_standardizer(&mut self, standardizer: Standardizer) -> Result<()>;

    /// Next standardized state `[B, N·d]` from `history_len` standardized
    /// states (oldest first, each `[B, N·d]`). `params` mirrors
    /// [`Model::tensors`].
    fn predict_next(&self, tape: &mut Tape, params: &[Var], window: &[Var]) -> Result<Var>;

    fn frame_len(&self) -> usize {
        self.n_agents() * self.state_dim()
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(Tensor::numel).sum()
    }
}

/// Predicted trajectory. `states` holds `frames` whole frames starting with
/// the initial condition; when a non-finite state appears the trajectory
/// stops before it and `diagnostic` says where.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub states: Vec<f64>,
    pub frames: usize,
    pub diagnostic: Option<String>,
}

/// Anything that can extrapolate a trajectory from observed history.
pub trait Predictor: Sync {
    fn history_len(&self) -> usize;

    /// `history` holds `history_len` frames in physical units, the last one
    /// being the initial condition. Returns `frames` frames including it.
    fn rollout(&self, history: &[f64], frames: usize) -> Result<Rollout>;
}

impl<M: Model + ?Sized> Predictor for M {
    fn history_len(&self) -> usize {
        Model::history_len(self)
    }

    fn rollout(&self, history: &[f64], frames: usize) -> Result<Rollout> {
        rollout(self, history, frames)
    }
}

fn check_history(frame: usize, need: usize, history: &[f64], frames: usize) -> Result<()> {
    if frames == 0 {
        return config_err("rollout needs at least one frame");
    }
    if history.len() != need * frame {
        return shape_err(
            "rollout",
            format!("history of {} values, expected {need} frames of {frame}", history.len()),
        );
    }
    Ok(())
}

/// Iterates the model from `history`, feeding predictions back into the
/// window. Output is in physical units.
pub fn rollout<M: Model + ?Sized>(model: &M, history: &[f64], frames: usize) -> Result<Rollout> {
    let frame = model.frame_len();
    let need = model.history_len();
    check_history(frame, need, history, frames)?;
    let std = model.standardizer();

    let mut window: Vec<Vec<f64>> = history
        .chunks_exact(frame)
        .map(|f| std.forward(f))
        .collect::<Result<_>>()?;
    let mut states = history[(need - 1) * frame..].to_vec();
    states.reserve((frames - 1) * frame);

    let mut tape = Tape::new();
    let params: Vec<Var> = model.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let mark = tape.len();
    let mut produced = 1;
    let mut diagnostic = None;
    while produced < frames {
        tape.truncate(mark);
        let vars: Vec<Var> = window
            .iter()
            .map(|w| tape.constant(Tensor::new(vec![1, frame], w.clone()).expect("frame length")))
            .collect();
        let next = model.predict_next(&mut tape, &params, &vars)?;
        let next = tape.value(next).data().to_vec();
        let physical = std.apply(&next, Direction::Inverse)?;
        if !physical.iter().all(|v| v.is_finite()) {
            diagnostic = Some(format!("non-finite state at rollout step {produced}"));
            break;
        }
        states.extend_from_slice(&physical);
        window.remove(0);
        window.push(next);
        produced += 1;
    }
    Ok(Rollout {
        states,
        frames: produced,
        diagnostic,
    })
}

/// Standardized windows and targets for every position in `sequence` that
/// has a full history and a successor, in time order.
pub(crate) fn windows_and_targets(
    std: &Standardizer,
    sequence: &[f64],
    frame: usize,
    history: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let z = std.forward(sequence)?;
    let len = z.len() / frame;
    if len < history + 1 {
        return config_err(format!("sequence of {len} frames is too short for a {history}-state window"));
    }
    let rows = len - history;
    let mut windows = vec![Vec::with_capacity(rows * frame); history];
    let mut targets = Vec::with_capacity(rows * frame);
    for t in history - 1..len - 1 {
        for (k, w) in windows.iter_mut().enumerate() {
            let src = t + 1 + k - history;
            w.extend_from_slice(&z[src * frame..(src + 1) * frame]);
        }
        targets.extend_from_slice(&z[(t + 1) * frame..(t + 2) * frame]);
    }
    Ok((windows, targets))
}

/// Rows predicted per tape when scoring long sequences.
const SCORE_CHUNK: usize = 256;

/// Standardized predictions for stacked windows, evaluated in chunks so
/// long sequences stay within modest memory.
fn predict_rows<M: Model + ?Sized>(model: &M, windows: &[Vec<f64>], rows: usize) -> Result<Vec<f64>> {
    let frame = model.frame_len();
    let mut tape = Tape::new();
    let params: Vec<Var> = model.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let mark = tape.len();
    let mut out = Vec::with_capacity(rows * frame);
    let mut first = 0;
    while first < rows {
        let n = SCORE_CHUNK.min(rows - first);
        tape.truncate(mark);
        let vars: Vec<Var> = windows
            .iter()
            .map(|w| {
                let part = w[first * frame..(first + n) * frame].to_vec();
                tape.constant(Tensor::new(vec![n, frame], part).expect("window shape"))
            })
            .collect();
        let pred = model.predict_next(&mut tape, &params, &vars)?;
        out.extend_from_slice(tape.value(pred).data());
        first += n;
    }
    Ok(out)
}

/// Standardized single-step squared error of every prediction along one
/// observed sequence (`sequence.len() / frame − history_len` values).
pub fn single_step_errors<M: Model + ?Sized>(model: &M, sequence: &[f64]) -> Result<Vec<f64>> {
    let frame = model.frame_len();
    if !sequence.len().is_multiple_of(frame) {
        return shape_err("single_step_errors", "sequence is not whole frames");
    }
    let (windows, targets) = windows_and_targets(model.standardizer(), sequence, frame, model.history_len())?;
    let pred = predict_rows(model, &windows, targets.len() / frame)?;
    Ok(pred
        .chunks_exact(frame)
        .zip(targets.chunks_exact(frame))
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / frame as f64)
        .collect())
}

/// Mean SmoothL1 single-step loss over every pair in the given sequences.
pub fn single_step_loss<M: Model + ?Sized>(model: &M, sequences: &[&[f64]]) -> Result<f64> {
    let frame = model.frame_len();
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in sequences {
        if seq.len() % frame != 0 {
            return shape_err("single_step_loss", "sequence is not whole frames");
        }
        let (windows, targets) = windows_and_targets(model.standardizer(), seq, frame, model.history_len())?;
        let pred = predict_rows(model, &windows, targets.len() / frame)?;
        total += pred.iter().zip(&targets).map(|(p, t)| smooth_l1_value(p - t)).sum::<f64>();
        count += targets.len();
    }
    if count == 0 {
        return config_err("no single-step pairs to score");
    }
    Ok(total / count as f64)
}
