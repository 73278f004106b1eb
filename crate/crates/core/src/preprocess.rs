//! Standardization, observation noise, and total-variation regularized
//! differentiation of noisy position samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, NoiseInfo};
use crate::error::{config_err, shape_err, Error, Result};
use crate::sim::sub_seed;

/// Samples required before the first prediction in noisy evaluation.
pub const EVAL_PREFIX: usize = 16;

/// Standard deviations below this are treated as constant dimensions.
const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Per-dimension affine map to zero mean and unit (population) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return config_err("standardizer mean and std must have equal, nonzero length");
        }
        if std.iter().any(|&s| !(s >= MIN_STD) || !s.is_finite()) {
            return config_err("standardizer std values must be finite and at least 1e-12");
        }
        Ok(Self { mean, std })
    }

    /// Fits on `values` laid out with `dim` interleaved channels.
    pub fn fit(values: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || values.is_empty() {
            return config_err("cannot fit a standardizer on empty data");
        }
        if !values.len().is_multiple_of(dim) {
            return shape_err("fit_standardizer", format!("{} values for {dim} channels", values.len()));
        }
        let rows = (values.len() / dim) as f64;
        let mut mean = vec![0.0; dim];
        for chunk in values.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(chunk) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows);
        let mut var = vec![0.0; dim];
        for chunk in values.chunks_exact(dim) {
            for ((s, v), m) in var.iter_mut().zip(chunk).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / rows).sqrt();
                if sd < MIN_STD {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn fit_dataset(ds: &Dataset) -> Result<Self> {
        Self::fit(&ds.data, ds.state_dim)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_in_place(&self, values: &mut [f64], direction: Direction) -> Result<()> {
        let dim = self.dim();
        if !values.len().is_multiple_of(dim) {
            return shape_err(
                "apply_standardizer",
                format!("{} values for {dim} channels", values.len()),
            );
        }
        for chunk in values.chunks_exact_mut(dim) {
            for ((v, m), s) in chunk.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = match direction {
                    Direction::Forward => (*v - m) / s,
                    Direction::Inverse => *v * s + m,
                };
            }
        }
        Ok(())
    }

    pub fn apply(&self, values: &[f64], direction: Direction) -> Result<Vec<f64>> {
        let mut out = values.to_vec();
        self.apply_in_place(&mut out, direction)?;
        Ok(out)
    }

    pub fn forward(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.apply(values, Direction::Forward)
    }

    pub fn inverse(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.apply(values, Direction::Inverse)
    }
}

/// Per-channel standard deviation over every frame of the dataset.
fn channel_std(ds: &Dataset, channel: usize) -> f64 {
    let d = ds.state_dim;
    let vals = ds.data.iter().skip(channel).step_by(d);
    let n = (ds.data.len() / d) as f64;
    let mean = vals.clone().sum::<f64>() / n;
    (vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Adds zero-mean Gaussian noise to the listed per-agent channels with
/// standard deviation `sigma_scale` times that channel's clean spread.
/// Sequence `m` draws from its own sub-seed.
pub fn add_gaussian_noise(ds: &Dataset, channels: &[usize], sigma_scale: f64, seed: u64) -> Result<Dataset> {
    if !(sigma_scale >= 0.0) || !sigma_scale.is_finite() {
        return config_err("noise scale must be finite and non-negative");
    }
    if let Some(&c) = channels.iter().find(|&&c| c >= ds.state_dim) {
        return config_err(format!("noise channel {c} out of {}", ds.state_dim));
    }
    let sigmas: Vec<f64> = channels.iter().map(|&c| sigma_scale * channel_std(ds, c)).collect();
    let mut out = ds.clone();
    if sigma_scale > 0.0 {
        let d = ds.state_dim;
        for m in 0..ds.sequences {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, m));
            for agent_state in out.sequence_mut(m).chunks_exact_mut(d) {
                for (&c, &sigma) in channels.iter().zip(&sigmas) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    agent_state[c] += sigma * z;
                }
            }
        }
    }
    if let Some(meta) = out.meta.as_mut() {
        meta.noise = Some(NoiseInfo {
            sigma_scale,
            seed,
            channels: channels.to_vec(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TvConfig {
    /// Weight of the total-variation penalty.
    pub alpha: f64,
    pub iterations: usize,
    /// Smoothing inside `sqrt((Du)² + ε)`.
    pub epsilon: f64,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-2,
            iterations: 200,
            epsilon: 1e-8,
        }
    }
}

impl TvConfig {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || self.iterations == 0 || !(self.epsilon > 0.0) {
            return config_err("TV needs alpha > 0, epsilon > 0 and at least one iteration");
        }
        Ok(())
    }
}

/// Trapezoidal cumulative integral starting at zero.
fn integrate(u: &[f64], dt: f64, out: &mut [f64]) {
    out[0] = 0.0;
    for k in 1..u.len() {
        out[k] = out[k - 1] + 0.5 * dt * (u[k - 1] + u[k]);
    }
}

/// Adjoint of [`integrate`].
fn integrate_adjoint(r: &[f64], dt: f64, out: &mut [f64]) {
    let n = r.len();
    let mut tail = 0.0; // Σ_{k > j} r_k
    for j in (0..n).rev() {
        out[j] = if j == 0 { 0.5 * dt * tail } else { 0.5 * dt * r[j] + dt * tail };
        tail += r[j];
    }
}

struct TvProblem<'a> {
    target: Vec<f64>,
    dt: f64,
    cfg: &'a TvConfig,
}

impl TvProblem<'_> {
    fn objective(&self, u: &[f64]) -> f64 {
        let n = u.len();
        let mut au = vec![0.0; n];
        integrate(u, self.dt, &mut au);
        let fit: f64 = au.iter().zip(&self.target).map(|(a, f)| (a - f) * (a - f)).sum();
        let tv: f64 = u
            .windows(2)
            .map(|w| ((w[1] - w[0]) * (w[1] - w[0]) + self.cfg.epsilon).sqrt())
            .sum();
        self.cfg.alpha * tv + 0.5 * fit
    }

    /// `(α Dᵀ diag(1/w) D + AᵀA) x`.
    fn apply_h(&self, inv_w: &[f64], x: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        let n = x.len();
        integrate(x, self.dt, scratch);
        integrate_adjoint(scratch, self.dt, out);
        for k in 0..n - 1 {
            let flux = self.cfg.alpha * inv_w[k] * (x[k + 1] - x[k]);
            out[k] -= flux;
            out[k + 1] += flux;
        }
    }
}

/// Tridiagonal (Thomas) solve for a symmetric matrix with `diag` and
/// `off[k]` coupling `k` and `k+1`.
fn solve_tridiagonal(diag: &[f64], off: &[f64], rhs: &[f64], out: &mut [f64]) {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = if n > 1 { off[0] / diag[0] } else { 0.0 };
    d[0] = rhs[0] / diag[0];
    for k in 1..n {
        let denom = diag[k] - off[k - 1] * c[k - 1];
        c[k] = if k + 1 < n { off[k] / denom } else { 0.0 };
        d[k] = (rhs[k] - off[k - 1] * d[k - 1]) / denom;
    }
    out[n - 1] = d[n - 1];
    for k in (0..n - 1).rev() {
        out[k] = d[k] - c[k] * out[k + 1];
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Derivative of a uniformly sampled series by minimizing
/// `α Σ sqrt((Du)² + ε) + ½‖Au − (y − y₀)‖²`, where `A` is trapezoidal
/// cumulative integration and `D` the forward difference.
///
/// Lagged-diffusivity iteration: each step minimizes the quadratic majorizer
/// at the current iterate with preconditioned conjugate gradients started
/// from that iterate, so the objective never increases.
pub fn tv_differentiate(samples: &[f64], dt: f64, cfg: &TvConfig) -> Result<Vec<f64>> {
    tv_differentiate_traced(samples, dt, cfg).map(|(u, _)| u)
}

/// As [`tv_differentiate`], also returning the objective before the first
/// and after every iteration.
pub fn tv_differentiate_traced(samples: &[f64], dt: f64, cfg: &TvConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    let n = samples.len();
    if n < 3 {
        return config_err(format!("TV differentiation needs at least 3 samples, got {n}"));
    }
    if !(dt > 0.0) {
        return config_err("sampling period must be positive");
    }
    let problem = TvProblem {
        target: samples.iter().map(|y| y - samples[0]).collect(),
        dt,
        cfg,
    };

    let mut u: Vec<f64> = (0..n)
        .map(|k| match k {
            0 => (samples[1] - samples[0]) / dt,
            k if k == n - 1 => (samples[n - 1] - samples[n - 2]) / dt,
            k => (samples[k + 1] - samples[k - 1]) / (2.0 * dt),
        })
        .collect();

    let mut rhs = vec![0.0; n];
    integrate_adjoint(&problem.target, dt, &mut rhs);
    let rhs_norm = dot(&rhs, &rhs).sqrt();

    // diag(AᵀA)
    let ata: Vec<f64> = (0..n)
        .map(|j| match j {
            0 => (n - 1) as f64 * 0.25 * dt * dt,
            j => 0.25 * dt * dt + (n - 1 - j) as f64 * dt * dt,
        })
        .collect();

    let mut trace = vec![problem.objective(&u)];
    let mut inv_w = vec![0.0; n - 1];
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n - 1];
    let (mut r, mut z, mut p, mut hp, mut scratch) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let max_inner = n.max(20);
    let tol = 1e-12 * rhs_norm.max(1e-300);

    for iter in 0..cfg.iterations {
        for k in 0..n - 1 {
            let du = u[k + 1] - u[k];
            inv_w[k] = 1.0 / (du * du + cfg.epsilon).sqrt();
        }
        diag.copy_from_slice(&ata);
        for k in 0..n - 1 {
            let a = cfg.alpha * inv_w[k];
            diag[k] += a;
            diag[k + 1] += a;
            off[k] = -a;
        }

        // Warm-started PCG on H u = Aᵀf.
        problem.apply_h(&inv_w, &u, &mut scratch, &mut hp);
        for k in 0..n {
            r[k] = rhs[k] - hp[k];
        }
        if dot(&r, &r).sqrt() > tol {
            solve_tridiagonal(&diag, &off, &r, &mut z);
            p.copy_from_slice(&z);
            let mut rz = dot(&r, &z);
            for _ in 0..max_inner {
                problem.apply_h(&inv_w, &p, &mut scratch, &mut hp);
                let php = dot(&p, &hp);
                if !(php > 0.0) {
                    break;
                }
                let step = rz / php;
                for k in 0..n {
                    u[k] += step * p[k];
                    r[k] -= step * hp[k];
                }
                if dot(&r, &r).sqrt() <= tol {
                    break;
                }
                solve_tridiagonal(&diag, &off, &r, &mut z);
                let rz_next = dot(&r, &z);
                let beta = rz_next / rz;
                rz = rz_next;
                for k in 0..n {
                    p[k] = z[k] + beta * p[k];
                }
            }
        }
        if !u.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("TV differentiation at iteration {iter}")));
        }
        trace.push(problem.objective(&u));
    }
    Ok((u, trace))
}

/// Replaces velocity channels by TV-differentiated positions.
///
/// `positions` is `[T][N][p]`; the result is `[T][N][2p]` with the positions
/// passed through and the derivatives appended.
pub fn prepare_noisy_states(
    positions: &[f64],
    n_agents: usize,
    pos_dim: usize,
    dt: f64,
    cfg: &TvConfig,
) -> Result<Vec<f64>> {
    let frame = n_agents * pos_dim;
    if frame == 0 || !positions.len().is_multiple_of(frame) {
        return shape_err(
            "prepare_noisy_states",
            format!("{} values for {n_agents} agents of dimension {pos_dim}", positions.len()),
        );
    }
    let t_len = positions.len() / frame;
    let mut out = vec![0.0; t_len * frame * 2];
    let mut series = vec![0.0; t_len];
    for a in 0..n_agents {
        for c in 0..pos_dim {
            for t in 0..t_len {
                series[t] = positions[t * frame + a * pos_dim + c];
            }
            let vel = tv_differentiate(&series, dt, cfg)?;
            for t in 0..t_len {
                let base = t * frame * 2 + a * pos_dim * 2;
                out[base + c] = series[t];
                out[base + pos_dim + c] = vel[t];
            }
        }
    }
    Ok(out)
}

/// Rollout initial condition from a noisy observation prefix: the last
/// `prefix_len` position samples are differentiated and the state at the
/// final sample is returned (`[N][2p]`).
pub fn initial_state_from_prefix(
    positions: &[f64],
    n_agents: usize,
    pos_dim: usize,
    dt: f64,
    cfg: &TvConfig,
    prefix_len: usize,
) -> Result<Vec<f64>> {
    let frame = n_agents * pos_dim;
    if frame == 0 || !positions.len().is_multiple_of(frame) {
        return shape_err("initial_state_from_prefix", "positions are not whole frames");
    }
    let available = positions.len() / frame;
    if available < prefix_len || prefix_len < 3 {
        return config_err(format!(
            "noisy evaluation needs a prefix of {prefix_len} observations, got {available}"
        ));
    }
    let window = &positions[(available - prefix_len) * frame..];
    let states = prepare_noisy_states(window, n_agents, pos_dim, dt, cfg)?;
    Ok(states[(prefix_len - 1) * frame * 2..].to_vec())
}

/// Second-order datasets (`[p, v]` per agent) with the velocity channels
/// rebuilt from the (noisy) position channels of every sequence.
pub fn denoise_dataset(ds: &Dataset, cfg: &TvConfig) -> Result<Dataset> {
    if !ds.state_dim.is_multiple_of(2) {
        return config_err("velocity reconstruction needs [position, velocity] states");
    }
    let p = ds.state_dim / 2;
    let mut out = ds.clone();
    for m in 0..ds.sequences {
        let positions: Vec<f64> = ds
            .sequence(m)
            .chunks_exact(ds.state_dim)
            .flat_map(|s| s[..p].to_vec())
            .collect();
        let states = prepare_noisy_states(&positions, ds.n_agents, p, ds.dt, cfg)?;
        out.sequence_mut(m).copy_from_slice(&states);
    }
    Ok(out)
}
