//! Ground-truth generators for the three interacting systems.
//!
//! * point-mass: pairwise springs plus a clipped inverse-square repulsion,
//!   Newtonian second-order dynamics, state `[px, py, vx, vy]` per agent;
//! * Kuramoto: coupled phase oscillators, state `[θ]` (unwrapped);
//! * predator–swarm: first-order prey/predator model, state `[x, y]` per
//!   agent with the predator stored as the last agent.
//!
//! Every interaction sum skips the self-pair.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetMeta};
use crate::error::{config_err, Error, Result};

pub const DEFAULT_DT: f64 = 0.01;
pub const DEFAULT_SUBSTEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    PointMass,
    Kuramoto,
    PredatorSwarm,
}

impl SystemKind {
    pub fn id(self) -> u8 {
        match self {
            Self::PointMass => 0,
            Self::Kuramoto => 1,
            Self::PredatorSwarm => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Self::PointMass),
            1 => Some(Self::Kuramoto),
            2 => Some(Self::PredatorSwarm),
            _ => None,
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            Self::PointMass => 4,
            Self::Kuramoto => 1,
            Self::PredatorSwarm => 2,
        }
    }

    /// Per-agent channels compared during evaluation: positions, or phases.
    pub fn metric_channels(self) -> Vec<usize> {
        match self {
            Self::PointMass => vec![0, 1],
            Self::Kuramoto => vec![0],
            Self::PredatorSwarm => vec![0, 1],
        }
    }

    /// Whether the state is `[position, velocity]` and evolves second-order.
    pub fn is_second_order(self) -> bool {
        matches!(self, Self::PointMass)
    }
}

/// Closed sampling interval `[lo, hi)`.
pub type Interval = [f64; 2];

fn check_interval(name: &str, r: Interval) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] < r[1]) {
        return config_err(format!("{name} range {r:?} is empty or non-finite"));
    }
    Ok(())
}

fn draw<R: Rng + ?Sized>(rng: &mut R, r: Interval) -> f64 {
    rng.random_range(r[0]..r[1])
}

fn symmetric_matrix<R: Rng + ?Sized>(n: usize, r: Interval, rng: &mut R) -> Vec<f64> {
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = draw(rng, r);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

fn check_coupling(name: &str, k: &[f64], n: usize, nonneg: bool) -> Result<()> {
    if k.len() != n * n {
        return config_err(format!("{name} has {} entries for {n} agents", k.len()));
    }
    for i in 0..n {
        if k[i * n + i] != 0.0 {
            return config_err(format!("{name} diagonal entry {i} is nonzero"));
        }
        for j in 0..n {
            let v = k[i * n + j];
            if !v.is_finite() || (nonneg && v < 0.0) || v != k[j * n + i] {
                return config_err(format!("{name} is not a valid symmetric matrix at ({i},{j})"));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointMassSpec {
    pub masses: Vec<f64>,
    /// Row-major `N × N`, symmetric with zero diagonal.
    pub springs: Vec<f64>,
    /// Repulsion coefficient `K`.
    pub repulsion: f64,
    /// Clip constant `λ` in the repulsion denominator.
    pub clip: f64,
    pub dt: f64,
    pub substeps: usize,
    pub position_range: Interval,
    pub velocity_range: Interval,
}

impl PointMassSpec {
    pub fn sample<R: Rng + ?Sized>(n: usize, dt: f64, substeps: usize, rng: &mut R) -> Self {
        let masses = (0..n).map(|_| draw(rng, [0.5, 2.5])).collect();
        let springs = symmetric_matrix(n, [0.5, 2.0], rng);
        Self {
            masses,
            springs,
            repulsion: 1.0,
            clip: 10.0,
            dt,
            substeps,
            position_range: [-2.0, 2.0],
            velocity_range: [-1.0, 1.0],
        }
    }

    pub fn n_agents(&self) -> usize {
        self.masses.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_agents();
        if let Some(i) = self.masses.iter().position(|&m| !(m > 0.0 && m.is_finite())) {
            return config_err(format!("mass of agent {i} must be positive"));
        }
        check_coupling("spring matrix", &self.springs, n, true)?;
        if !(self.repulsion >= 0.0) || !(self.clip > 0.0) {
            return config_err("repulsion must be non-negative and clip positive");
        }
        check_interval("position", self.position_range)?;
        check_interval("velocity", self.velocity_range)
    }

    /// Accelerations `a_i = (1/m_i) Σ_{j≠i} F_ij` for `positions: [N·2]`.
    pub fn accelerations(&self, positions: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.n_agents();
        if positions.len() != 2 * n || out.len() != 2 * n {
            return config_err(format!("point-mass expects {} position values", 2 * n));
        }
        if let Some(i) = self.masses.iter().position(|&m| !(m > 0.0)) {
            return config_err(format!("mass of agent {i} must be positive"));
        }
        for i in 0..n {
            let (pix, piy) = (positions[2 * i], positions[2 * i + 1]);
            let mut fx = 0.0;
            let mut fy = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let dx = pix - positions[2 * j];
                let dy = piy - positions[2 * j + 1];
                let dist = (dx * dx + dy * dy).sqrt();
                let k = self.springs[i * n + j];
                let rep = self.repulsion * self.masses[i] * self.masses[j] / (self.clip + dist).powi(3);
                fx += -k * dx + rep * dx;
                fy += -k * dy + rep * dy;
            }
            out[2 * i] = fx / self.masses[i];
            out[2 * i + 1] = fy / self.masses[i];
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KuramotoSpec {
    pub frequencies: Vec<f64>,
    /// Row-major `N × N`, symmetric with zero diagonal.
    pub coupling: Vec<f64>,
    pub dt: f64,
    pub substeps: usize,
    pub phase_range: Interval,
}

impl KuramotoSpec {
    pub fn sample<R: Rng + ?Sized>(n: usize, dt: f64, substeps: usize, rng: &mut R) -> Self {
        let frequencies = (0..n).map(|_| draw(rng, [1.0, 10.0])).collect();
        let coupling = symmetric_matrix(n, [0.2, 2.0], rng);
        Self {
            frequencies,
            coupling,
            dt,
            substeps,
            phase_range: [0.0, TAU],
        }
    }

    pub fn n_agents(&self) -> usize {
        self.frequencies.len()
    }

    fn validate(&self) -> Result<()> {
        check_coupling("coupling matrix", &self.coupling, self.n_agents(), false)?;
        check_interval("phase", self.phase_range)
    }

    /// `dθ_i/dt = ω_i + Σ_{j≠i} K_ij sin(θ_j − θ_i)`.
    pub fn phase_velocities(&self, phases: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.n_agents();
        if phases.len() != n || out.len() != n {
            return config_err(format!("Kuramoto expects {n} phases"));
        }
        for i in 0..n {
            let mut acc = self.frequencies[i];
            for j in 0..n {
                if j != i {
                    acc += self.coupling[i * n + j] * (phases[j] - phases[i]).sin();
                }
            }
            out[i] = acc;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredatorSwarmSpec {
    pub prey: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Lower bound on every separation in the singular terms.
    pub collision_guard: f64,
    pub dt: f64,
    pub substeps: usize,
    pub prey_range: Interval,
    pub predator_range: Interval,
}

impl PredatorSwarmSpec {
    pub fn new(prey: usize, dt: f64, substeps: usize) -> Self {
        Self {
            prey,
            a: 1.0,
            b: 0.2,
            c: 1.5,
            collision_guard: 1e-6,
            dt,
            substeps,
            prey_range: [-1.0, 1.0],
            predator_range: [-1.5, 1.5],
        }
    }

    pub fn n_agents(&self) -> usize {
        self.prey + 1
    }

    fn validate(&self) -> Result<()> {
        if self.prey == 0 {
            return config_err("predator-swarm needs at least one prey");
        }
        if !(self.a > 0.0 && self.b > 0.0 && self.c > 0.0 && self.collision_guard > 0.0) {
            return config_err("swarm constants a, b, c and the collision guard must be positive");
        }
        check_interval("prey", self.prey_range)?;
        check_interval("predator", self.predator_range)
    }

    /// Velocities of every prey (`[N·2]`) and of the predator (`[2]`).
    pub fn velocities(
        &self,
        prey: &[f64],
        predator: [f64; 2],
        prey_out: &mut [f64],
    ) -> Result<[f64; 2]> {
        let n = self.prey;
        if prey.len() != 2 * n || prey_out.len() != 2 * n {
            return config_err(format!("predator-swarm expects {} prey values", 2 * n));
        }
        let floor = self.collision_guard * self.collision_guard;
        let inv_n = 1.0 / n as f64;
        let mut dz = [0.0, 0.0];
        for i in 0..n {
            let (xi, yi) = (prey[2 * i], prey[2 * i + 1]);
            let mut vx = 0.0;
            let mut vy = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let dx = xi - prey[2 * j];
                let dy = yi - prey[2 * j + 1];
                let r2 = (dx * dx + dy * dy).max(floor);
                vx += dx / r2 - self.a * dx;
                vy += dy / r2 - self.a * dy;
            }
            let px = xi - predator[0];
            let py = yi - predator[1];
            let r2 = (px * px + py * py).max(floor);
            prey_out[2 * i] = vx * inv_n + self.b * px / r2;
            prey_out[2 * i + 1] = vy * inv_n + self.b * py / r2;
            dz[0] += px / r2;
            dz[1] += py / r2;
        }
        Ok([dz[0] * self.c * inv_n, dz[1] * self.c * inv_n])
    }
}

/// One of the three ground-truth systems with its physical parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "kebab-case")]
pub enum SystemSpec {
    PointMass(PointMassSpec),
    Kuramoto(KuramotoSpec),
    PredatorSwarm(PredatorSwarmSpec),
}

impl SystemSpec {
    /// Draws physical parameters for `n_agents` agents (for the swarm this
    /// counts the predator).
    pub fn sample(kind: SystemKind, n_agents: usize, dt: f64, substeps: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = match kind {
            SystemKind::PointMass => Self::PointMass(PointMassSpec::sample(n_agents, dt, substeps, &mut rng)),
            SystemKind::Kuramoto => Self::Kuramoto(KuramotoSpec::sample(n_agents, dt, substeps, &mut rng)),
            SystemKind::PredatorSwarm => {
                if n_agents < 2 {
                    return config_err("predator-swarm needs at least two agents");
                }
                Self::PredatorSwarm(PredatorSwarmSpec::new(n_agents - 1, dt, substeps))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn kind(&self) -> SystemKind {
        match self {
            Self::PointMass(_) => SystemKind::PointMass,
            Self::Kuramoto(_) => SystemKind::Kuramoto,
            Self::PredatorSwarm(_) => SystemKind::PredatorSwarm,
        }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            Self::PointMass(s) => s.n_agents(),
            Self::Kuramoto(s) => s.n_agents(),
            Self::PredatorSwarm(s) => s.n_agents(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.kind().state_dim()
    }

    pub fn frame_len(&self) -> usize {
        self.n_agents() * self.state_dim()
    }

    pub fn dt(&self) -> f64 {
        match self {
            Self::PointMass(s) => s.dt,
            Self::Kuramoto(s) => s.dt,
            Self::PredatorSwarm(s) => s.dt,
        }
    }

    pub fn substeps(&self) -> usize {
        match self {
            Self::PointMass(s) => s.substeps,
            Self::Kuramoto(s) => s.substeps,
            Self::PredatorSwarm(s) => s.substeps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents() == 0 {
            return config_err("system has no agents");
        }
        if !(self.dt() >= 0.0 && self.dt().is_finite()) {
            return config_err("sampling period must be finite and non-negative");
        }
        if self.substeps() == 0 {
            return config_err("substeps must be at least 1");
        }
        match self {
            Self::PointMass(s) => s.validate(),
            Self::Kuramoto(s) => s.validate(),
            Self::PredatorSwarm(s) => s.validate(),
        }
    }

    /// Time derivative of a full frame `[N·d]`.
    pub fn derivative(&self, state: &[f64], out: &mut [f64]) -> Result<()> {
        if state.len() != self.frame_len() || out.len() != state.len() {
            return config_err(format!("state of {} values, expected {}", state.len(), self.frame_len()));
        }
        match self {
            Self::PointMass(s) => {
                let n = s.n_agents();
                let mut pos = vec![0.0; 2 * n];
                let mut acc = vec![0.0; 2 * n];
                for i in 0..n {
                    pos[2 * i..2 * i + 2].copy_from_slice(&state[4 * i..4 * i + 2]);
                }
                s.accelerations(&pos, &mut acc)?;
                for i in 0..n {
                    out[4 * i] = state[4 * i + 2];
                    out[4 * i + 1] = state[4 * i + 3];
                    out[4 * i + 2] = acc[2 * i];
                    out[4 * i + 3] = acc[2 * i + 1];
                }
                Ok(())
            }
            Self::Kuramoto(s) => s.phase_velocities(state, out),
            Self::PredatorSwarm(s) => {
                let n = s.prey;
                let predator = [state[2 * n], state[2 * n + 1]];
                let dz = s.velocities(&state[..2 * n], predator, &mut out[..2 * n])?;
                out[2 * n] = dz[0];
                out[2 * n + 1] = dz[1];
                Ok(())
            }
        }
    }

    /// Random initial frame drawn from the configured ranges.
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Self::PointMass(s) => (0..s.n_agents())
                .flat_map(|_| {
                    [
                        draw(rng, s.position_range),
                        draw(rng, s.position_range),
                        draw(rng, s.velocity_range),
                        draw(rng, s.velocity_range),
                    ]
                })
                .collect(),
            Self::Kuramoto(s) => (0..s.n_agents()).map(|_| draw(rng, s.phase_range)).collect(),
            Self::PredatorSwarm(s) => {
                let mut v: Vec<f64> = (0..2 * s.prey).map(|_| draw(rng, s.prey_range)).collect();
                v.push(draw(rng, s.predator_range));
                v.push(draw(rng, s.predator_range));
                v
            }
        }
    }
}

/// Classical RK4 with `substeps` uniform sub-intervals per sample. Returns
/// `samples` frames, the first being `initial`.
pub fn rk4_integrate(spec: &SystemSpec, initial: &[f64], samples: usize) -> Result<Vec<f64>> {
    let n = spec.frame_len();
    if initial.len() != n {
        return config_err(format!("initial state has {} values, expected {n}", initial.len()));
    }
    if spec.substeps() == 0 {
        return config_err("substeps must be at least 1");
    }
    if !initial.iter().all(|v| v.is_finite()) {
        return Err(Error::Integration { step: 0 });
    }
    let h = spec.dt() / spec.substeps() as f64;
    let mut out = Vec::with_capacity(samples * n);
    let mut state = initial.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    if samples > 0 {
        out.extend_from_slice(&state);
    }
    for step in 1..samples {
        for _ in 0..spec.substeps() {
            spec.derivative(&state, &mut k1)?;
            for i in 0..n {
                tmp[i] = state[i] + 0.5 * h * k1[i];
            }
            spec.derivative(&tmp, &mut k2)?;
            for i in 0..n {
                tmp[i] = state[i] + 0.5 * h * k2[i];
            }
            spec.derivative(&tmp, &mut k3)?;
            for i in 0..n {
                tmp[i] = state[i] + h * k3[i];
            }
            spec.derivative(&tmp, &mut k4)?;
            for i in 0..n {
                state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        if !state.iter().all(|v| v.is_finite()) {
            return Err(Error::Integration { step });
        }
        out.extend_from_slice(&state);
    }
    Ok(out)
}

/// Seed for sequence `index` of a dataset generated from `seed`.
pub fn sub_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `m` sequences of `l` samples from random initial states. Physical
/// parameters come from `spec` and are recorded in the dataset metadata.
pub fn generate_dataset(spec: &SystemSpec, m: usize, l: usize, seed: u64) -> Result<Dataset> {
    if m == 0 || l == 0 {
        return config_err("sequence count and length must be at least 1");
    }
    spec.validate()?;
    let sequences: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, idx));
            let init = spec.initial_state(&mut rng);
            rk4_integrate(spec, &init, l)
        })
        .collect::<Result<_>>()?;
    let data = sequences.concat();
    let mut ds = Dataset::new(spec.kind(), spec.n_agents(), spec.state_dim(), m, l, spec.dt(), data)?;
    ds.meta = Some(DatasetMeta {
        spec: spec.clone(),
        seed,
        noise: None,
    });
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn two_body(k: f64, repulsion: f64) -> PointMassSpec {
        PointMassSpec {
            masses: vec![1.0, 1.0],
            springs: vec![0.0, k, k, 0.0],
            repulsion,
            clip: 10.0,
            dt: DEFAULT_DT,
            substeps: DEFAULT_SUBSTEPS,
            position_range: [-2.0, 2.0],
            velocity_range: [-1.0, 1.0],
        }
    }

    #[test]
    fn coincident_agents_feel_nothing() {
        let spec = two_body(1.3, 1.0);
        let mut a = [9.0; 4];
        spec.accelerations(&[0.4, -0.2, 0.4, -0.2], &mut a).unwrap();
        assert_eq!(a, [0.0; 4]);
    }

    #[test]
    fn unit_spring_pulls_together() {
        let spec = two_body(1.0, 0.0);
        let mut a = [0.0; 4];
        spec.accelerations(&[0.0, 0.0, 1.0, 0.0], &mut a).unwrap();
        assert_eq!(a, [1.0, 0.0, -1.0, 0.0]);
    }

    #[test]
    fn non_positive_mass_is_rejected() {
        let mut spec = two_body(1.0, 1.0);
        spec.masses[1] = 0.0;
        let mut a = [0.0; 4];
        assert!(spec.accelerations(&[0.0, 0.0, 1.0, 0.0], &mut a).is_err());
    }

    #[test]
    fn forces_cancel_in_aggregate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in [2, 3, 5, 8] {
            let spec = PointMassSpec::sample(n, DEFAULT_DT, DEFAULT_SUBSTEPS, &mut rng);
            let pos: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut a = vec![0.0; 2 * n];
            spec.accelerations(&pos, &mut a).unwrap();
            for c in 0..2 {
                let total: f64 = (0..n).map(|i| spec.masses[i] * a[2 * i + c]).sum();
                assert!(total.abs() < 1e-12, "{total}");
            }
        }
    }

    #[test]
    fn kuramoto_reference_values() {
        let spec = KuramotoSpec {
            frequencies: vec![0.0, 0.0],
            coupling: vec![0.0, 1.0, 1.0, 0.0],
            dt: DEFAULT_DT,
            substeps: 1,
            phase_range: [0.0, TAU],
        };
        let mut out = [0.0; 2];
        spec.phase_velocities(&[0.0, FRAC_PI_2], &mut out).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-15 && (out[1] + 1.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut spec = KuramotoSpec::sample(5, DEFAULT_DT, 1, &mut rng);
        spec.phase_velocities(&[0.7; 5], &mut [0.0; 5]).unwrap();
        let mut out = [0.0; 5];
        spec.phase_velocities(&[0.7; 5], &mut out).unwrap();
        assert_eq!(out.as_slice(), spec.frequencies.as_slice());
        spec.coupling = vec![0.0; 25];
        spec.phase_velocities(&[0.1, 2.0, 3.0, -1.0, 5.0], &mut out).unwrap();
        assert_eq!(out.as_slice(), spec.frequencies.as_slice());
    }

    #[test]
    fn swarm_single_prey_reference() {
        let spec = PredatorSwarmSpec::new(1, DEFAULT_DT, 1);
        let mut dx = [0.0; 2];
        let dz = spec.velocities(&[1.0, 0.0], [-1.0, 0.0], &mut dx).unwrap();
        assert!((dx[0] - 0.1).abs() < 1e-15 && dx[1] == 0.0);
        assert!((dz[0] - 0.75).abs() < 1e-15 && dz[1] == 0.0);
    }

    #[test]
    fn swarm_ring_leaves_predator_still() {
        let n = 6;
        let spec = PredatorSwarmSpec::new(n, DEFAULT_DT, 1);
        let center = [0.3, -0.4];
        let prey: Vec<f64> = (0..n)
            .flat_map(|i| {
                let t = TAU * i as f64 / n as f64;
                [center[0] + t.cos(), center[1] + t.sin()]
            })
            .collect();
        let mut dx = vec![0.0; 2 * n];
        let dz = spec.velocities(&prey, center, &mut dx).unwrap();
        assert!(dz[0].abs() < 1e-14 && dz[1].abs() < 1e-14, "{dz:?}");
    }

    #[test]
    fn swarm_prey_swap_permutes_velocities() {
        let spec = PredatorSwarmSpec::new(3, DEFAULT_DT, 1);
        let prey = [0.1, 0.2, -0.5, 0.7, 0.9, -0.3];
        let swapped = [-0.5, 0.7, 0.1, 0.2, 0.9, -0.3];
        let z = [0.4, 0.4];
        let mut a = [0.0; 6];
        let mut b = [0.0; 6];
        let za = spec.velocities(&prey, z, &mut a).unwrap();
        let zb = spec.velocities(&swapped, z, &mut b).unwrap();
        assert_eq!(&a[0..2], &b[2..4]);
        assert_eq!(&a[2..4], &b[0..2]);
        assert_eq!(&a[4..6], &b[4..6]);
        assert!((za[0] - zb[0]).abs() < 1e-15 && (za[1] - zb[1]).abs() < 1e-15);
    }

    #[test]
    fn swarm_guard_keeps_coincident_prey_finite() {
        let spec = PredatorSwarmSpec::new(2, DEFAULT_DT, 1);
        let mut out = [0.0; 2 * 2];
        let dz = spec.velocities(&[0.5, 0.5, 0.5, 0.5], [0.5, 0.5], &mut out).unwrap();
        assert!(out.iter().all(|v| v.is_finite()) && dz.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn uncoupled_kuramoto_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut k = KuramotoSpec::sample(4, 0.05, 3, &mut rng);
        k.coupling = vec![0.0; 16];
        let spec = SystemSpec::Kuramoto(k.clone());
        let init = [0.1, 1.0, 2.0, 3.0];
        let traj = rk4_integrate(&spec, &init, 50).unwrap();
        for t in 0..50 {
            for i in 0..4 {
                let expect = init[i] + k.frequencies[i] * 0.05 * t as f64;
                assert!((traj[t * 4 + i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn integration_reports_failing_step() {
        let spec = SystemSpec::PointMass(two_body(1.0, 1.0));
        let err = rk4_integrate(&spec, &[f64::NAN, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0], 3).unwrap_err();
        assert!(matches!(err, Error::Integration { step: 0 }));

        let mut s = two_body(1.0, 1.0);
        s.springs = vec![0.0, 1e300, 1e300, 0.0];
        let err = rk4_integrate(&SystemSpec::PointMass(s), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0], 5).unwrap_err();
        assert!(matches!(err, Error::Integration { step: 1 }));
    }

    #[test]
    fn dataset_shape_and_determinism() {
        let spec = SystemSpec::sample(SystemKind::PointMass, 4, DEFAULT_DT, DEFAULT_SUBSTEPS, 17).unwrap();
        let a = generate_dataset(&spec, 2, 5, 99).unwrap();
        assert_eq!(a.data.len(), 160);
        let b = generate_dataset(&spec, 2, 5, 99).unwrap();
        let bits = |d: &Dataset| d.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let SystemSpec::PointMass(pm) = &spec else { unreachable!() };
        for m in 0..2 {
            let f = a.frame(m, 0);
            for i in 0..4 {
                for c in 0..2 {
                    let p = f[4 * i + c];
                    assert!(p >= pm.position_range[0] && p < pm.position_range[1]);
                }
            }
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let mut spec = SystemSpec::sample(SystemKind::PointMass, 3, DEFAULT_DT, 2, 0).unwrap();
        if let SystemSpec::PointMass(s) = &mut spec {
            s.position_range = [1.0, -1.0];
        }
        assert!(generate_dataset(&spec, 1, 3, 0).is_err());
        assert!(generate_dataset(&SystemSpec::sample(SystemKind::Kuramoto, 3, 0.01, 1, 0).unwrap(), 0, 3, 0).is_err());
    }

    #[test]
    fn sub_seeds_do_not_collide_across_nearby_seeds() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..16u64 {
            for idx in 0..64 {
                assert!(seen.insert(sub_seed(seed, idx)));
            }
        }
    }
}
