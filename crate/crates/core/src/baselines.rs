//! Comparison predictors: constant-velocity extrapolation, a dense network
//! and a recurrent network, the latter two predicting the next full
//! standardized state directly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, shape_err, Result};
use crate::nn::layers::{dense, uniform_fan_in};
use crate::nn::lstm::lstm_cell;
use crate::nn::{Activation, LstmWeights, Tape, Tensor, Var};
use crate::predict::{Model, ModelKind, Predictor, Rollout};
use crate::preprocess::Standardizer;

/// `2·curr − prev`.
pub fn linear_motion_predict(prev: &[f64], curr: &[f64]) -> Result<Vec<f64>> {
    if prev.len() != curr.len() {
        return shape_err("linear_motion", format!("{} vs {} values", prev.len(), curr.len()));
    }
    Ok(prev.iter().zip(curr).map(|(p, c)| 2.0 * c - p).collect())
}

/// Extrapolates every state value at its latest rate of change.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearMotion {
    pub frame_len: usize,
}

impl Predictor for LinearMotion {
    fn history_len(&self) -> usize {
        2
    }

    fn rollout(&self, history: &[f64], frames: usize) -> Result<Rollout> {
        let f = self.frame_len;
        if frames == 0 || f == 0 {
            return config_err("rollout needs at least one frame");
        }
        if history.len() != 2 * f {
            return shape_err("linear_motion", format!("history of {} values, expected {}", history.len(), 2 * f));
        }
        let mut states = history[f..].to_vec();
        let mut prev = history[..f].to_vec();
        for t in 1..frames {
            let curr = &states[(t - 1) * f..];
            let next = linear_motion_predict(&prev, curr)?;
            prev = curr.to_vec();
            states.extend_from_slice(&next);
        }
        Ok(Rollout {
            states,
            frames,
            diagnostic: None,
        })
    }
}

fn replace_tensors(names: &[String], tensors: &mut [Tensor], named: Vec<(String, Tensor)>) -> Result<()> {
    if named.len() != tensors.len() {
        return config_err(format!("{} tensors supplied, architecture needs {}", named.len(), tensors.len()));
    }
    for (k, (name, tensor)) in named.into_iter().enumerate() {
        if name != names[k] || tensor.shape() != tensors[k].shape() {
            return config_err(format!(
                "tensor {k} is {name} {:?}, expected {} {:?}",
                tensor.shape(),
                names[k],
                tensors[k].shape()
            ));
        }
        tensors[k] = tensor;
    }
    Ok(())
}

fn check_standardizer(s: &Standardizer, dim: usize) -> Result<()> {
    if s.dim() != dim {
        return shape_err("set_standardizer", format!("{} channels for states of {dim}", s.dim()));
    }
    Ok(())
}

/// `N·d → 64 → 64 → 64 → N·d → N·d`, relu everywhere except the output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBaseline {
    n_agents: usize,
    state_dim: usize,
    dt: f64,
    hidden: Vec<usize>,
    standardizer: Standardizer,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl MlpBaseline {
    pub const DEFAULT_HIDDEN: [usize; 3] = [64, 64, 64];

    pub fn build(n_agents: usize, state_dim: usize, dt: f64, hidden: &[usize], seed: u64) -> Result<Self> {
        if n_agents == 0 || state_dim == 0 || hidden.contains(&0) {
            return config_err("network dimensions must be positive");
        }
        let frame = n_agents * state_dim;
        let mut widths = vec![frame];
        widths.extend_from_slice(hidden);
        widths.extend([frame, frame]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (k, w) in widths.windows(2).enumerate() {
            names.push(format!("layer.{k}.weight"));
            tensors.push(uniform_fan_in(&[w[1], w[0]], w[0], &mut rng));
            names.push(format!("layer.{k}.bias"));
            tensors.push(Tensor::zeros(&[w[1]]));
        }
        Ok(Self {
            n_agents,
            state_dim,
            dt,
            hidden: hidden.to_vec(),
            standardizer: Standardizer::identity(state_dim),
            names,
            tensors,
        })
    }

    pub fn from_parts(
        n_agents: usize,
        state_dim: usize,
        dt: f64,
        hidden: &[usize],
        standardizer: Standardizer,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let mut model = Self::build(n_agents, state_dim, dt, hidden, 0)?;
        replace_tensors(&model.names, &mut model.tensors, named)?;
        model.set_standardizer(standardizer)?;
        Ok(model)
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    /// Layer output lengths, input first.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.frame_len()];
        w.extend(self.tensors.iter().step_by(2).map(|t| t.shape()[0]));
        w
    }

    /// Next standardized state for `[B, N·d]` standardized states.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let (rows, cols) = x.dims2();
        let x = tape.constant(x.clone().reshape(&[rows, cols])?);
        let y = self.predict_next(&mut tape, &params, &[x])?;
        Ok(tape.value(y).clone())
    }
}

impl Model for MlpBaseline {
    fn kind(&self) -> ModelKind {
        ModelKind::Mlp
    }

    fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn history_len(&self) -> usize {
        1
    }

    fn tensor_names(&self) -> &[String] {
        &self.names
    }

    fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    fn set_standardizer(&mut self, standardizer: Standardizer) -> Result<()> {
        check_standardizer(&standardizer, self.state_dim)?;
        self.standardizer = standardizer;
        Ok(())
    }

    fn predict_next(&self, tape: &mut Tape, params: &[Var], window: &[Var]) -> Result<Var> {
        let [x] = window else {
            return shape_err("mlp_predict", format!("window of {} states, expected 1", window.len()));
        };
        let layers = params.len() / 2;
        let mut y = *x;
        for k in 0..layers {
            let act = if k + 1 == layers { Activation::Identity } else { Activation::Relu };
            y = dense(tape, y, params[2 * k], Some(params[2 * k + 1]), act)?;
        }
        Ok(y)
    }
}

/// Input projection, stacked LSTM layers and an output projection, run over
/// a window of four consecutive states from a zero initial memory.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmBaseline {
    n_agents: usize,
    state_dim: usize,
    dt: f64,
    hidden: usize,
    layers: usize,
    standardizer: Standardizer,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl LstmBaseline {
    pub const WINDOW: usize = 4;

    pub fn build(
        n_agents: usize,
        state_dim: usize,
        dt: f64,
        hidden: usize,
        layers: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_agents == 0 || state_dim == 0 || hidden == 0 || layers == 0 {
            return config_err("network dimensions must be positive");
        }
        let frame = n_agents * state_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = vec!["input.weight".to_string(), "input.bias".to_string()];
        let mut tensors = vec![uniform_fan_in(&[hidden, frame], frame, &mut rng), Tensor::zeros(&[hidden])];
        for k in 0..layers {
            let w = LstmWeights::init(hidden, hidden, &mut rng);
            names.extend([format!("lstm.{k}.w_ih"), format!("lstm.{k}.w_hh"), format!("lstm.{k}.bias")]);
            tensors.extend([w.w_ih, w.w_hh, w.bias]);
        }
        names.extend(["output.weight".to_string(), "output.bias".to_string()]);
        tensors.extend([uniform_fan_in(&[frame, hidden], hidden, &mut rng), Tensor::zeros(&[frame])]);
        Ok(Self {
            n_agents,
            state_dim,
            dt,
            hidden,
            layers,
            standardizer: Standardizer::identity(state_dim),
            names,
            tensors,
        })
    }

    pub fn from_parts(
        n_agents: usize,
        state_dim: usize,
        dt: f64,
        hidden: usize,
        layers: usize,
        standardizer: Standardizer,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let mut model = Self::build(n_agents, state_dim, dt, hidden, layers, 0)?;
        replace_tensors(&model.names, &mut model.tensors, named)?;
        model.set_standardizer(standardizer)?;
        Ok(model)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Next standardized state from a window of standardized states, each
    /// `[B, N·d]`.
    pub fn forward(&self, window: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let vars: Vec<Var> = window
            .iter()
            .map(|w| {
                let (r, c) = w.dims2();
                w.clone().reshape(&[r, c]).map(|t| tape.constant(t))
            })
            .collect::<Result<_>>()?;
        let y = self.predict_next(&mut tape, &params, &vars)?;
        Ok(tape.value(y).clone())
    }
}

impl Model for LstmBaseline {
    fn kind(&self) -> ModelKind {
        ModelKind::Lstm
    }

    fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn history_len(&self) -> usize {
        Self::WINDOW
    }

    fn tensor_names(&self) -> &[String] {
        &self.names
    }

    fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    fn set_standardizer(&mut self, standardizer: Standardizer) -> Result<()> {
        check_standardizer(&standardizer, self.state_dim)?;
        self.standardizer = standardizer;
        Ok(())
    }

    fn predict_next(&self, tape: &mut Tape, params: &[Var], window: &[Var]) -> Result<Var> {
        if window.len() < Self::WINDOW {
            return shape_err(
                "lstm_predict",
                format!("window of {} states, expected {}", window.len(), Self::WINDOW),
            );
        }
        let window = &window[window.len() - Self::WINDOW..];
        let rows = tape.value(window[0]).dims2().0;
        let zero = Tensor::zeros(&[rows, self.hidden]);
        let mut memory: Vec<(Var, Var)> = (0..self.layers)
            .map(|_| (tape.constant(zero.clone()), tape.constant(zero.clone())))
            .collect();
        let out = 2 + 3 * self.layers;
        let mut top = memory[self.layers - 1].0;
        for &x in window {
            let mut input = dense(tape, x, params[0], Some(params[1]), Activation::Identity)?;
            for (k, (h, c)) in memory.iter_mut().enumerate() {
                let p = 2 + 3 * k;
                let (h_next, c_next) = lstm_cell(tape, input, *h, *c, params[p], params[p + 1], params[p + 2])?;
                *h = h_next;
                *c = c_next;
                input = h_next;
            }
            top = input;
        }
        dense(tape, top, params[out], Some(params[out + 1]), Activation::Identity)
    }
}
