//! Core + wrapper interaction network.
//!
//! Agent derivative: `g2_i(g1(s_i)) + Σ_{j≠i} I_ij ⊙ f(h(s_i) − h(s_j))`,
//! where `h`, `f`, `g1` are shared by every agent and `I_ij`, `g2_i` belong
//! to the specific system.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::layers::{dense, dot_product, uniform_fan_in};
use crate::nn::{Activation, Tape, Tensor, Var};
use crate::predict::{Model, ModelKind};
use crate::preprocess::Standardizer;
use crate::sim::SystemKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegrationMode {
    /// `s' = s + Δt·ŝ`
    FirstOrder,
    /// States are `[p, v]`; the model predicts accelerations.
    SecondOrder,
}

impl IntegrationMode {
    pub fn tag(self) -> u8 {
        match self {
            IntegrationMode::FirstOrder => 0,
            IntegrationMode::SecondOrder => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IntegrationMode::FirstOrder => "first-order",
            IntegrationMode::SecondOrder => "second-order",
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(IntegrationMode::FirstOrder),
            1 => Some(IntegrationMode::SecondOrder),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input_dim: usize,
    /// Length of each agent's derivative estimate.
    pub deriv_dim: usize,
    pub h_widths: Vec<usize>,
    /// The last width is the interaction feature length (`l · deriv_dim`).
    pub f_widths: Vec<usize>,
    pub g_width: usize,
}

impl ArchConfig {
    pub fn for_system(kind: SystemKind) -> Self {
        let (input_dim, deriv_dim) = match kind {
            SystemKind::PointMass => (4, 2),
            SystemKind::Kuramoto => (1, 1),
            SystemKind::PredatorSwarm => (2, 2),
        };
        Self {
            input_dim,
            deriv_dim,
            h_widths: vec![64, 64],
            f_widths: vec![64, 8],
            g_width: 4,
        }
    }

    pub fn mode(&self) -> IntegrationMode {
        if self.input_dim == 2 * self.deriv_dim && self.input_dim != self.deriv_dim {
            IntegrationMode::SecondOrder
        } else {
            IntegrationMode::FirstOrder
        }
    }

    /// Rows of the reshaped interaction feature matrix.
    pub fn interaction_block(&self) -> usize {
        self.f_widths.last().copied().unwrap_or(0) / self.deriv_dim
    }

    /// Rows of the reshaped self feature matrix.
    pub fn self_block(&self) -> usize {
        self.g_width / self.deriv_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.deriv_dim == 0 || self.g_width == 0 {
            return config_err("architecture dimensions must be positive");
        }
        if self.h_widths.is_empty() || self.f_widths.is_empty() {
            return config_err("h and f need at least one layer each");
        }
        if self.h_widths.iter().chain(&self.f_widths).any(|&w| w == 0) {
            return config_err("layer widths must be positive");
        }
        let lf = *self.f_widths.last().unwrap();
        if !lf.is_multiple_of(self.deriv_dim) {
            return config_err(format!("f output {lf} is not divisible by d = {}", self.deriv_dim));
        }
        if !self.g_width.is_multiple_of(self.deriv_dim) {
            return config_err(format!("g width {} is not divisible by d = {}", self.g_width, self.deriv_dim));
        }
        if self.input_dim != self.deriv_dim && self.input_dim != 2 * self.deriv_dim {
            return config_err("input dimension must equal d (first order) or 2d (second order)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MagnetModel {
    pub arch: ArchConfig,
    n_agents: usize,
    dt: f64,
    standardizer: Standardizer,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Index of ordered pair `(i, j)`, `i ≠ j`, in row-major order skipping the
/// diagonal.
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    i * (n - 1) + if j < i { j } else { j - 1 }
}

fn ordered_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
}

fn core_names(arch: &ArchConfig) -> Vec<String> {
    let mut names = Vec::new();
    for k in 0..arch.h_widths.len() {
        names.push(format!("h.{k}.weight"));
        names.push(format!("h.{k}.bias"));
    }
    for k in 0..arch.f_widths.len() {
        names.push(format!("f.{k}.weight"));
    }
    names.push("g1.weight".into());
    names.push("g1.bias".into());
    names
}

fn wrapper_names(n: usize) -> Vec<String> {
    let mut names: Vec<String> = ordered_pairs(n).map(|(i, j)| format!("I.{i}.{j}")).collect();
    names.extend((0..n).map(|i| format!("g2.{i}.weight")));
    names.extend((0..n).map(|i| format!("g2.{i}.bias")));
    names
}

impl MagnetModel {
    /// Fresh model with weights uniform in `±sqrt(1/fan_in)` and zero biases.
    pub fn build(arch: ArchConfig, n_agents: usize, dt: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        if n_agents == 0 {
            return config_err("a model needs at least one agent");
        }
        if !(dt >= 0.0) {
            return config_err("time step must be non-negative");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        let mut width = arch.input_dim;
        for &w in &arch.h_widths {
            tensors.push(uniform_fan_in(&[w, width], width, &mut rng));
            tensors.push(Tensor::zeros(&[w]));
            width = w;
        }
        for &w in &arch.f_widths {
            tensors.push(uniform_fan_in(&[w, width], width, &mut rng));
            width = w;
        }
        tensors.push(uniform_fan_in(&[arch.g_width, arch.input_dim], arch.input_dim, &mut rng));
        tensors.push(Tensor::zeros(&[arch.g_width]));

        let (d, l, lg) = (arch.deriv_dim, arch.interaction_block(), arch.self_block());
        for _ in ordered_pairs(n_agents) {
            tensors.push(uniform_fan_in(&[d, l], l, &mut rng));
        }
        for _ in 0..n_agents {
            tensors.push(uniform_fan_in(&[d, lg], lg, &mut rng));
        }
        for _ in 0..n_agents {
            tensors.push(Tensor::zeros(&[d]));
        }
        let mut names = core_names(&arch);
        names.extend(wrapper_names(n_agents));
        Ok(Self {
            standardizer: Standardizer::identity(arch.input_dim),
            arch,
            n_agents,
            dt,
            names,
            tensors,
        })
    }

    /// Reassembles a model from named tensors (checkpoint loading).
    pub fn from_parts(
        arch: ArchConfig,
        n_agents: usize,
        dt: f64,
        standardizer: Standardizer,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let template = Self::build(arch, n_agents, dt, 0)?;
        if named.len() != template.tensors.len() {
            return config_err(format!(
                "{} tensors supplied, architecture needs {}",
                named.len(),
                template.tensors.len()
            ));
        }
        let mut model = template;
        for (k, (name, tensor)) in named.into_iter().enumerate() {
            if name != model.names[k] || tensor.shape() != model.tensors[k].shape() {
                return config_err(format!(
                    "tensor {k} is {name} {:?}, expected {} {:?}",
                    tensor.shape(),
                    model.names[k],
                    model.tensors[k].shape()
                ));
            }
            model.tensors[k] = tensor;
        }
        model.set_standardizer(standardizer)?;
        Ok(model)
    }

    pub fn mode(&self) -> IntegrationMode {
        self.arch.mode()
    }

    pub fn set_dt(&mut self, dt: f64) {
        self.dt = dt;
    }

    fn core_tensor_count(&self) -> usize {
        2 * self.arch.h_widths.len() + self.arch.f_widths.len() + 2
    }

    /// `(core, wrapper)` parameter counts, summed over stored tensors.
    pub fn count_params(&self) -> (usize, usize) {
        let split = self.core_tensor_count();
        let core = self.tensors[..split].iter().map(Tensor::numel).sum();
        let wrapper = self.tensors[split..].iter().map(Tensor::numel).sum();
        (core, wrapper)
    }

    pub fn interaction_matrix(&self, i: usize, j: usize) -> &Tensor {
        &self.tensors[self.core_tensor_count() + pair_index(self.n_agents, i, j)]
    }

    pub fn interaction_matrix_mut(&mut self, i: usize, j: usize) -> &mut Tensor {
        let k = self.core_tensor_count() + pair_index(self.n_agents, i, j);
        &mut self.tensors[k]
    }

    fn g2_offset(&self) -> usize {
        self.core_tensor_count() + self.n_agents * (self.n_agents - 1)
    }

    pub fn self_weight(&self, i: usize) -> &Tensor {
        &self.tensors[self.g2_offset() + i]
    }

    pub fn self_bias(&self, i: usize) -> &Tensor {
        &self.tensors[self.g2_offset() + self.n_agents + i]
    }

    /// New model for `n_new` agents sharing this core, with every wrapper
    /// entry set to the mean of this model's corresponding entries.
    pub fn with_averaged_wrapper(&self, n_new: usize) -> Result<Self> {
        if n_new < 2 {
            return config_err("a re-targeted model needs at least two agents");
        }
        let n = self.n_agents;
        // Offsets from the first entry, so identical entries average exactly.
        let mean_of = |tensors: &[Tensor]| -> Tensor {
            let base = &tensors[0];
            let mut acc = vec![0.0; base.numel()];
            for t in &tensors[1..] {
                for ((a, v), b) in acc.iter_mut().zip(t.data()).zip(base.data()) {
                    *a += v - b;
                }
            }
            let count = tensors.len() as f64;
            let data = acc.iter().zip(base.data()).map(|(a, b)| b + a / count).collect();
            Tensor::new(base.shape().to_vec(), data).expect("same shape")
        };
        let core = self.core_tensor_count();
        let g2 = self.g2_offset();
        let mean_i = if n > 1 {
            mean_of(&self.tensors[core..g2])
        } else {
            return config_err("pretrained wrapper has no interaction matrices to average");
        };
        let mean_w = mean_of(&self.tensors[g2..g2 + n]);
        let mean_b = mean_of(&self.tensors[g2 + n..g2 + 2 * n]);

        let mut tensors = self.tensors[..core].to_vec();
        tensors.extend(std::iter::repeat_n(mean_i, n_new * (n_new - 1)));
        tensors.extend(std::iter::repeat_n(mean_w, n_new));
        tensors.extend(std::iter::repeat_n(mean_b, n_new));
        let mut names = core_names(&self.arch);
        names.extend(wrapper_names(n_new));
        Ok(Self {
            arch: self.arch.clone(),
            n_agents: n_new,
            dt: self.dt,
            standardizer: self.standardizer.clone(),
            names,
            tensors,
        })
    }

    /// Interaction features `f(u)` for rows of `u` (`[rows, h_out]`).
    pub fn interaction_features(&self, u: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (rows, cols) = u.dims2();
        let mut x = tape.constant(u.clone().reshape(&[rows, cols])?);
        let first_f = 2 * self.arch.h_widths.len();
        for k in 0..self.arch.f_widths.len() {
            let w = tape.constant(self.tensors[first_f + k].clone());
            x = dense(&mut tape, x, w, None, Activation::Tanh)?;
        }
        Ok(tape.value(x).clone())
    }

    /// Per-agent derivative estimates `[B·N, d]` for standardized states
    /// `[B, N·input_dim]`.
    pub fn derivative(&self, tape: &mut Tape, params: &[Var], states: Var) -> Result<Var> {
        let (n, inp, d) = (self.n_agents, self.arch.input_dim, self.arch.deriv_dim);
        let (batch, cols) = tape.value(states).dims2();
        if cols != n * inp {
            return shape_err(
                "magnet_derivative",
                format!("state row of {cols} values for {n} agents of dimension {inp}"),
            );
        }
        if params.len() != self.tensors.len() {
            return shape_err("magnet_derivative", "parameter list does not match the model");
        }
        let rows = batch * n;
        let x = tape.reshape(states, &[rows, inp])?;

        let mut p = 0;
        let mut hidden = x;
        for _ in &self.arch.h_widths {
            hidden = dense(tape, hidden, params[p], Some(params[p + 1]), Activation::Relu)?;
            p += 2;
        }
        let f_params = &params[p..p + self.arch.f_widths.len()];
        p += self.arch.f_widths.len();
        let (g1_w, g1_b) = (params[p], params[p + 1]);
        p += 2;

        let core_self = dense(tape, x, g1_w, Some(g1_b), Activation::Relu)?;
        let g2_at = p + n * (n - 1);
        let agent_of: Arc<[usize]> = (0..rows).map(|r| r % n).collect();
        let lg = self.arch.self_block();
        let flat_w: Vec<Var> = (0..n)
            .map(|i| tape.reshape(params[g2_at + i], &[1, d * lg]))
            .collect::<Result<_>>()?;
        let stacked_w = tape.stack_rows(&flat_w)?;
        let weights = tape.gather_rows(stacked_w, agent_of.clone())?;
        let flat_b: Vec<Var> = (0..n)
            .map(|i| tape.reshape(params[g2_at + n + i], &[1, d]))
            .collect::<Result<_>>()?;
        let stacked_b = tape.stack_rows(&flat_b)?;
        let biases = tape.gather_rows(stacked_b, agent_of)?;
        let self_term = dot_product(tape, core_self, weights, Some(biases), lg)?;
        if n == 1 {
            return Ok(self_term);
        }

        // f's first layer is linear and bias-free, so it is applied per agent
        // and differenced per pair.
        let projected = tape.linear(hidden, f_params[0])?;
        let pairs: Vec<(usize, usize)> = ordered_pairs(n).collect();
        let np = pairs.len();
        let left: Arc<[usize]> = (0..batch)
            .flat_map(|b| pairs.iter().map(move |&(i, _)| b * n + i))
            .collect();
        let right: Arc<[usize]> = (0..batch)
            .flat_map(|b| pairs.iter().map(move |&(_, j)| b * n + j))
            .collect();
        let zi = tape.gather_rows(projected, left.clone())?;
        let zj = tape.gather_rows(projected, right)?;
        let diff = tape.sub(zi, zj)?;
        let mut feat = tape.tanh(diff);
        for &w in &f_params[1..] {
            feat = dense(tape, feat, w, None, Activation::Tanh)?;
        }

        let l = self.arch.interaction_block();
        let flat_i: Vec<Var> = (0..np)
            .map(|k| tape.reshape(params[p + k], &[1, d * l]))
            .collect::<Result<_>>()?;
        let stacked_i = tape.stack_rows(&flat_i)?;
        let pair_of: Arc<[usize]> = (0..batch * np).map(|r| r % np).collect();
        let inter_w = tape.gather_rows(stacked_i, pair_of)?;
        let inter = dot_product(tape, feat, inter_w, None, l)?;
        let summed = tape.scatter_add_rows(inter, left, rows)?;
        tape.add(self_term, summed)
    }

    /// Euler update of standardized states `[B, N·input_dim]`.
    ///
    /// Second-order positions advance with the new velocity converted to
    /// position units, so the kinematics hold in physical coordinates.
    pub fn step(&self, tape: &mut Tape, params: &[Var], states: Var) -> Result<Var> {
        let (batch, cols) = tape.value(states).dims2();
        let deriv = self.derivative(tape, params, states)?;
        let rows = batch * self.n_agents;
        match self.mode() {
            IntegrationMode::FirstOrder => {
                let delta = tape.scale(deriv, self.dt);
                let delta = tape.reshape(delta, &[batch, cols])?;
                tape.add(states, delta)
            }
            IntegrationMode::SecondOrder => {
                let d = self.arch.deriv_dim;
                let x = tape.reshape(states, &[rows, 2 * d])?;
                let pos = tape.slice_cols(x, 0, d)?;
                let vel = tape.slice_cols(x, d, d)?;
                let dv = tape.scale(deriv, self.dt);
                let vel_next = tape.add(vel, dv)?;
                let std = &self.standardizer;
                let gain: Vec<f64> = (0..d).map(|c| self.dt * std.std[d + c] / std.std[c]).collect();
                let offset: Vec<f64> = (0..d).map(|c| self.dt * std.mean[d + c] / std.std[c]).collect();
                let dp = tape.scale_cols(vel_next, gain)?;
                let shift = tape.constant(Tensor::vector(offset));
                let dp = tape.add_bias(dp, shift)?;
                let pos_next = tape.add(pos, dp)?;
                let next = tape.concat_cols(&[pos_next, vel_next])?;
                tape.reshape(next, &[batch, cols])
            }
        }
    }
}

impl Model for MagnetModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Magnet
    }

    fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn state_dim(&self) -> usize {
        self.arch.input_dim
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

    fn core_len(&self) -> usize {
        self.core_tensor_count()
    }

    fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    fn set_standardizer(&mut self, standardizer: Standardizer) -> Result<()> {
        if standardizer.dim() != self.arch.input_dim {
            return shape_err(
                "set_standardizer",
                format!("{} channels for states of {}", standardizer.dim(), self.arch.input_dim),
            );
        }
        self.standardizer = standardizer;
        Ok(())
    }

    fn predict_next(&self, tape: &mut Tape, params: &[Var], window: &[Var]) -> Result<Var> {
        match window {
            [states] => self.step(tape, params, *states),
            _ => shape_err("magnet_predict", format!("window of {} states, expected 1", window.len())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pm(n: usize, seed: u64) -> MagnetModel {
        MagnetModel::build(ArchConfig::for_system(SystemKind::PointMass), n, 0.01, seed).unwrap()
    }

    /// Eq.-style reference: plain loops, per-pair `f`, optional `j = i` term
    /// with an arbitrary self matrix.
    fn reference_derivative(model: &MagnetModel, state: &[f64], self_matrices: Option<&[Tensor]>) -> Vec<f64> {
        let (n, inp, d) = (model.n_agents, model.arch.input_dim, model.arch.deriv_dim);
        let t = model.tensors();
        let dense_fwd = |x: &[f64], w: &Tensor, b: Option<&Tensor>, act: fn(f64) -> f64| -> Vec<f64> {
            let (out, inp) = w.dims2();
            (0..out)
                .map(|o| {
                    let mut s: f64 = (0..inp).map(|k| w.get2(o, k) * x[k]).sum();
                    if let Some(b) = b {
                        s += b.data()[o];
                    }
                    act(s)
                })
                .collect()
        };
        let relu = |v: f64| v.max(0.0);
        let hs: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut x = state[i * inp..(i + 1) * inp].to_vec();
                for k in 0..model.arch.h_widths.len() {
                    x = dense_fwd(&x, &t[2 * k], Some(&t[2 * k + 1]), relu);
                }
                x
            })
            .collect();
        let fo = 2 * model.arch.h_widths.len();
        let f = |u: Vec<f64>| {
            let mut x = u;
            for k in 0..model.arch.f_widths.len() {
                x = dense_fwd(&x, &t[fo + k], None, f64::tanh);
            }
            x
        };
        let dot = |feat: &[f64], w: &Tensor| -> Vec<f64> {
            let (d, l) = w.dims2();
            (0..d).map(|k| (0..l).map(|q| feat[k * l + q] * w.get2(k, q)).sum()).collect()
        };
        let gi = fo + model.arch.f_widths.len();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let s = &state[i * inp..(i + 1) * inp];
            let g = dense_fwd(s, &t[gi], Some(&t[gi + 1]), relu);
            let mut acc = dot(&g, model.self_weight(i));
            for (a, b) in acc.iter_mut().zip(model.self_bias(i).data()) {
                *a += b;
            }
            for j in 0..n {
                let w = if j == i {
                    match self_matrices {
                        Some(m) => &m[i],
                        None => continue,
                    }
                } else {
                    model.interaction_matrix(i, j)
                };
                let u: Vec<f64> = hs[i].iter().zip(&hs[j]).map(|(a, b)| a - b).collect();
                for (a, v) in acc.iter_mut().zip(dot(&f(u), w)) {
                    *a += v;
                }
            }
            out[i * d..(i + 1) * d].copy_from_slice(&acc);
        }
        out
    }

    fn tape_derivative(model: &MagnetModel, states: &[f64], batch: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let params: Vec<Var> = model.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let cols = states.len() / batch;
        let x = tape.constant(Tensor::new(vec![batch, cols], states.to_vec()).unwrap());
        let y = model.derivative(&mut tape, &params, x).unwrap();
        tape.value(y).data().to_vec()
    }

    fn random_state(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn point_mass_counts() {
        for (n, wrapper) in [(1, 6), (2, 28), (4, 120), (8, 496), (16, 2016)] {
            let (core, w) = pm(n, 0).count_params();
            assert_eq!(core, 9108);
            assert_eq!(w, wrapper);
            assert_eq!(w, 8 * n * n - 2 * n);
        }
        let m = pm(4, 0);
        let pairs = m.tensor_names().iter().filter(|s| s.starts_with("I.")).count();
        assert_eq!(pairs, 12);
        assert_eq!(m.tensors().len(), 8 + 12 + 4 + 4);
    }

    #[test]
    fn invalid_arch_is_rejected() {
        let mut arch = ArchConfig::for_system(SystemKind::PointMass);
        arch.f_widths = vec![64, 7];
        assert!(MagnetModel::build(arch, 4, 0.01, 0).is_err());
        let mut arch = ArchConfig::for_system(SystemKind::PointMass);
        arch.g_width = 5;
        assert!(MagnetModel::build(arch, 4, 0.01, 0).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(pm(3, 11), pm(3, 11));
        assert_ne!(pm(3, 11).tensors(), pm(3, 12).tensors());
    }

    #[test]
    fn tape_matches_reference_and_self_pair_is_inert() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [SystemKind::PointMass, SystemKind::Kuramoto, SystemKind::PredatorSwarm] {
            let model = MagnetModel::build(ArchConfig::for_system(kind), 4, 0.01, 9).unwrap();
            let inp = model.arch.input_dim;
            let states = random_state(&mut rng, 2 * 4 * inp);
            let fast = tape_derivative(&model, &states, 2);
            let l = model.arch.interaction_block();
            let selfs: Vec<Tensor> = (0..4)
                .map(|_| Tensor::new(vec![model.arch.deriv_dim, l], random_state(&mut rng, model.arch.deriv_dim * l)).unwrap())
                .collect();
            for b in 0..2 {
                let s = &states[b * 4 * inp..(b + 1) * 4 * inp];
                let plain = reference_derivative(&model, s, None);
                let with_self = reference_derivative(&model, s, Some(&selfs));
                let d = model.arch.deriv_dim;
                for k in 0..4 * d {
                    assert!((plain[k] - with_self[k]).abs() <= 1e-14);
                    assert!((fast[b * 4 * d + k] - plain[k]).abs() <= 1e-13, "{kind:?}");
                }
            }
        }
    }

    #[test]
    fn identical_agents_see_only_self_term() {
        let model = pm(3, 2);
        let s = [0.3, -0.1, 0.7, 0.2];
        let states: Vec<f64> = s.iter().cycle().take(12).copied().collect();
        let out = tape_derivative(&model, &states, 1);
        let mut single = pm(1, 2);
        let core = model.core_tensor_count();
        single.tensors[..core].clone_from_slice(&model.tensors[..core]);
        for i in 0..3 {
            single.tensors[core] = model.self_weight(i).clone();
            single.tensors[core + 1] = model.self_bias(i).clone();
            let expect = tape_derivative(&single, &s, 1);
            assert_eq!(&out[i * 2..i * 2 + 2], expect.as_slice());
        }
    }

    #[test]
    fn interaction_features_are_odd() {
        let model = pm(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = Tensor::new(vec![10, 64], random_state(&mut rng, 640)).unwrap();
        let neg = Tensor::new(vec![10, 64], u.data().iter().map(|v| -v).collect()).unwrap();
        let a = model.interaction_features(&u).unwrap();
        let b = model.interaction_features(&neg).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x + y).abs() <= 1e-13);
        }
        let zero = model.interaction_features(&Tensor::zeros(&[1, 64])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relabelling_agents_permutes_output() {
        let model = pm(3, 6);
        let perm = [2, 0, 1];
        let mut relabelled = model.clone();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    *relabelled.interaction_matrix_mut(i, j) = model.interaction_matrix(perm[i], perm[j]).clone();
                }
            }
            let g2 = relabelled.g2_offset();
            relabelled.tensors[g2 + i] = model.self_weight(perm[i]).clone();
            relabelled.tensors[g2 + 3 + i] = model.self_bias(perm[i]).clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_state(&mut rng, 12);
        let sp: Vec<f64> = perm.iter().flat_map(|&i| s[i * 4..(i + 1) * 4].to_vec()).collect();
        let a = tape_derivative(&model, &s, 1);
        let b = tape_derivative(&relabelled, &sp, 1);
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(&b[new * 2..new * 2 + 2], &a[old * 2..old * 2 + 2]);
        }
    }

    fn step_once(model: &MagnetModel, state: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let params: Vec<Var> = model.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let x = tape.constant(Tensor::new(vec![1, state.len()], state.to_vec()).unwrap());
        let y = model.step(&mut tape, &params, x).unwrap();
        tape.value(y).data().to_vec()
    }

    /// A single-agent model whose derivative is the constant `value`.
    fn constant_field(kind: SystemKind, value: &[f64], dt: f64) -> MagnetModel {
        let mut m = MagnetModel::build(ArchConfig::for_system(kind), 1, dt, 0).unwrap();
        let core = m.core_tensor_count();
        m.tensors[core].data_mut().iter_mut().for_each(|v| *v = 0.0);
        m.tensors[core + 1].data_mut().copy_from_slice(value);
        m
    }

    #[test]
    fn zero_step_leaves_state() {
        let mut model = pm(3, 3);
        model.dt = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_state(&mut rng, 12);
        assert_eq!(step_once(&model, &s), s);
    }

    #[test]
    fn second_order_scheme_arithmetic() {
        let model = constant_field(SystemKind::PointMass, &[1.0, 0.0], 0.01);
        let next = step_once(&model, &[0.0; 4]);
        assert!((next[2] - 0.01).abs() < 1e-15 && next[3] == 0.0);
        assert!((next[0] - 1e-4).abs() < 1e-16 && next[1] == 0.0);
    }

    #[test]
    fn first_order_constant_field_is_euler() {
        let model = constant_field(SystemKind::PredatorSwarm, &[0.5, -2.0], 0.1);
        let mut s = vec![1.0, 1.0];
        for k in 1..=5 {
            s = step_once(&model, &s);
            assert!((s[0] - (1.0 + 0.05 * k as f64)).abs() < 1e-12);
            assert!((s[1] - (1.0 - 0.2 * k as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn averaged_wrapper() {
        let mut model = pm(2, 1);
        let a = Tensor::matrix(2, 4, (0..8).map(f64::from).collect()).unwrap();
        let b = Tensor::matrix(2, 4, (0..8).map(|v| 2.0 * v as f64 + 1.0).collect()).unwrap();
        *model.interaction_matrix_mut(0, 1) = a.clone();
        *model.interaction_matrix_mut(1, 0) = b.clone();
        let grown = model.with_averaged_wrapper(5).unwrap();
        let mean: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (x + y) / 2.0).collect();
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert_eq!(grown.interaction_matrix(i, j).data(), mean.as_slice());
                }
            }
        }
        let core = model.core_tensor_count();
        assert_eq!(&grown.tensors()[..core], &model.tensors()[..core]);
        assert_eq!(pm(4, 0).with_averaged_wrapper(8).unwrap().count_params().1, 496);
        assert!(model.with_averaged_wrapper(1).is_err());

        let uniform = pm(3, 2);
        let mut same = uniform.clone();
        let first = uniform.interaction_matrix(0, 1).clone();
        let core = same.core_tensor_count();
        for k in 0..6 {
            same.tensors[core + k] = first.clone();
        }
        let grown = same.with_averaged_wrapper(4).unwrap();
        assert_eq!(grown.interaction_matrix(3, 2), &first);
    }

    #[test]
    fn wrong_agent_count_is_an_error() {
        let model = pm(3, 0);
        let mut tape = Tape::new();
        let params: Vec<Var> = model.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let x = tape.constant(Tensor::zeros(&[1, 16]));
        assert!(model.derivative(&mut tape, &params, x).is_err());
    }
}
