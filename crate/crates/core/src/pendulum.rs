//! Damped double pendulum: equations of motion, energy, RK4 integration and
//! next-state dataset construction.
//!
//! State ordering everywhere is `(theta1, omega1, theta2, omega2)`. Angles are
//! measured from the downward vertical, and potential energy is zero at the
//! pivot height.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{split_sizes, SplitDataset};
use crate::error::{Error, Result};
use crate::numerics::{RowFunction, Tensor2D};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumParams {
    /// kg
    pub m1: f64,
    pub m2: f64,
    /// m
    pub l1: f64,
    pub l2: f64,
    /// m/s^2
    pub g: f64,
    /// Viscous friction at each joint, N·m·s.
    pub b: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            m1: 1.0,
            m2: 1.0,
            l1: 1.0,
            l2: 1.0,
            g: 9.81,
            b: 0.05,
        }
    }
}

impl PendulumParams {
    pub fn frictionless(self) -> Self {
        Self { b: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("m1", self.m1),
            ("m2", self.m2),
            ("l1", self.l1),
            ("l2", self.l2),
            ("g", self.g),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !(self.b.is_finite() && self.b >= 0.0) {
            return Err(Error::config("b", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumState {
    pub theta1: f64,
    pub omega1: f64,
    pub theta2: f64,
    pub omega2: f64,
}

impl PendulumState {
    pub fn new(theta1: f64, omega1: f64, theta2: f64, omega2: f64) -> Self {
        Self {
            theta1,
            omega1,
            theta2,
            omega2,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.theta1, self.omega1, self.theta2, self.omega2]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    fn axpy(self, k: f64, d: [f64; 4]) -> Self {
        Self::new(
            self.theta1 + k * d[0],
            self.omega1 + k * d[1],
            self.theta2 + k * d[2],
            self.omega2 + k * d[3],
        )
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Time derivative `(omega1, domega1, omega2, domega2)` of the Lagrangian
/// double pendulum with a damping torque `-b * omega_i` at each joint.
pub fn eom_derivatives(s: PendulumState, p: &PendulumParams) -> [f64; 4] {
    let d = s.theta1 - s.theta2;
    let (sin_d, cos_d) = d.sin_cos();
    let m11 = (p.m1 + p.m2) * p.l1 * p.l1;
    let m12 = p.m2 * p.l1 * p.l2 * cos_d;
    let m22 = p.m2 * p.l2 * p.l2;
    let f1 = -p.m2 * p.l1 * p.l2 * s.omega2 * s.omega2 * sin_d
        - (p.m1 + p.m2) * p.g * p.l1 * s.theta1.sin()
        - p.b * s.omega1;
    let f2 = p.m2 * p.l1 * p.l2 * s.omega1 * s.omega1 * sin_d
        - p.m2 * p.g * p.l2 * s.theta2.sin()
        - p.b * s.omega2;
    // det = m2 l1^2 l2^2 (m1 + m2 sin^2 d) > 0.
    let det = m11 * m22 - m12 * m12;
    let a1 = (m22 * f1 - m12 * f2) / det;
    let a2 = (m11 * f2 - m12 * f1) / det;
    [s.omega1, a1, s.omega2, a2]
}

/// Total mechanical energy in joules.
pub fn energy(s: PendulumState, p: &PendulumParams) -> f64 {
    let kinetic = 0.5 * p.m1 * p.l1 * p.l1 * s.omega1 * s.omega1
        + 0.5
            * p.m2
            * (p.l1 * p.l1 * s.omega1 * s.omega1
                + p.l2 * p.l2 * s.omega2 * s.omega2
                + 2.0 * p.l1 * p.l2 * s.omega1 * s.omega2 * (s.theta1 - s.theta2).cos());
    let potential = -(p.m1 + p.m2) * p.g * p.l1 * s.theta1.cos() - p.m2 * p.g * p.l2 * s.theta2.cos();
    kinetic + potential
}

/// Gradient of [`energy`] with respect to `(theta1, omega1, theta2, omega2)`.
pub fn energy_gradient(s: PendulumState, p: &PendulumParams) -> [f64; 4] {
    let d = s.theta1 - s.theta2;
    let (sin_d, cos_d) = d.sin_cos();
    let cross = p.m2 * p.l1 * p.l2 * s.omega1 * s.omega2;
    let d_theta1 = -cross * sin_d + (p.m1 + p.m2) * p.g * p.l1 * s.theta1.sin();
    let d_theta2 = cross * sin_d + p.m2 * p.g * p.l2 * s.theta2.sin();
    let d_omega1 = (p.m1 + p.m2) * p.l1 * p.l1 * s.omega1 + p.m2 * p.l1 * p.l2 * s.omega2 * cos_d;
    let d_omega2 = p.m2 * p.l2 * p.l2 * s.omega2 + p.m2 * p.l1 * p.l2 * s.omega1 * cos_d;
    [d_theta1, d_omega1, d_theta2, d_omega2]
}

/// Row-wise energy for use on a differentiation tape (4-column input).
#[derive(Clone, Debug)]
pub struct EnergyFn(pub PendulumParams);

impl EnergyFn {
    pub fn shared(params: PendulumParams) -> Arc<dyn RowFunction> {
        Arc::new(Self(params))
    }
}

impl RowFunction for EnergyFn {
    fn value(&self, row: &[f64]) -> f64 {
        energy(PendulumState::from_slice(row), &self.0)
    }

    fn gradient(&self, row: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&energy_gradient(PendulumState::from_slice(row), &self.0));
    }
}

/// Energies of every row of an `n x 4` state tensor.
pub fn energies(states: &Tensor2D, p: &PendulumParams) -> Vec<f64> {
    (0..states.rows())
        .map(|r| energy(PendulumState::from_slice(states.row(r)), p))
        .collect()
}

pub fn rk4_step(s: PendulumState, p: &PendulumParams, dt: f64) -> PendulumState {
    let k1 = eom_derivatives(s, p);
    let k2 = eom_derivatives(s.axpy(dt / 2.0, k1), p);
    let k3 = eom_derivatives(s.axpy(dt / 2.0, k2), p);
    let k4 = eom_derivatives(s.axpy(dt, k3), p);
    let mut incr = [0.0; 4];
    for i in 0..4 {
        incr[i] = (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0;
    }
    s.axpy(dt, incr)
}

/// Integration and sampling settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Integrator rate, Hz.
    pub sim_hz: u32,
    /// Retained sampling rate, Hz.
    pub sample_hz: u32,
    /// Standard deviation of the additive measurement noise on every retained
    /// state component (variance 1e-4 by default).
    pub noise_std: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            sim_hz: 200,
            sample_hz: 10,
            noise_std: 0.01,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sim_hz == 0 || self.sample_hz == 0 || !self.sim_hz.is_multiple_of(self.sample_hz) {
            return Err(Error::config(
                "sim_hz",
                format!("{} Hz is not a multiple of {} Hz", self.sim_hz, self.sample_hz),
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("noise_std", "must be non-negative"));
        }
        Ok(())
    }
}

/// Clean states retained at `sample_hz`, starting with `s0`.
pub fn simulate_clean(
    s0: PendulumState,
    p: &PendulumParams,
    sim: &SimConfig,
    n_states: usize,
) -> Result<Vec<PendulumState>> {
    sim.validate()?;
    let dt = 1.0 / sim.sim_hz as f64;
    let stride = (sim.sim_hz / sim.sample_hz) as usize;
    let mut states = Vec::with_capacity(n_states);
    let mut s = s0;
    let mut step = 0usize;
    if n_states > 0 {
        states.push(s);
    }
    while states.len() < n_states {
        for _ in 0..stride {
            s = rk4_step(s, p, dt);
            step += 1;
            if !s.is_finite() {
                return Err(Error::Diverged { step });
            }
        }
        states.push(s);
    }
    Ok(states)
}

/// Consecutive noisy/clean state pairs from one or more trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    /// Noisy `x_t` (inputs) and `x_{t+1}` (targets) with their split.
    pub pairs: SplitDataset,
    pub clean_x: Tensor2D,
    pub clean_y: Tensor2D,
    /// Pair index where each trajectory starts.
    pub trajectory_starts: Vec<usize>,
}

/// Simulates one trajectory of `n_pairs` transitions and adds measurement
/// noise to every retained state. The clean trajectory is independent of the
/// RNG.
pub fn rk4_simulate(
    s0: PendulumState,
    p: &PendulumParams,
    sim: &SimConfig,
    n_pairs: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<PendulumState>, Vec<PendulumState>)> {
    p.validate()?;
    let clean = simulate_clean(s0, p, sim, n_pairs + 1)?;
    let noise = Normal::new(0.0, sim.noise_std).map_err(|e| Error::config("noise_std", e.to_string()))?;
    let noisy = clean
        .iter()
        .map(|s| {
            let mut v = s.to_array();
            for c in &mut v {
                *c += noise.sample(rng);
            }
            PendulumState::from_slice(&v)
        })
        .collect();
    Ok((clean, noisy))
}

/// Initial conditions for dataset construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConditions {
    /// One trajectory per listed state.
    Fixed { states: Vec<PendulumState> },
    /// `count` trajectories from states drawn uniformly in
    /// `[-theta_max, theta_max] x [-omega_max, omega_max]` with their own seed,
    /// so the clean dynamics do not depend on the noise seed.
    Random {
        count: usize,
        theta_max: f64,
        omega_max: f64,
        seed: u64,
    },
}

impl Default for InitialConditions {
    fn default() -> Self {
        InitialConditions::Fixed {
            states: vec![PendulumState::new(2.0, 0.0, 2.0, 0.0)],
        }
    }
}

impl InitialConditions {
    pub fn states(&self) -> Vec<PendulumState> {
        match self {
            InitialConditions::Fixed { states } => states.clone(),
            InitialConditions::Random {
                count,
                theta_max,
                omega_max,
                seed,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..*count)
                    .map(|_| {
                        PendulumState::new(
                            rng.random_range(-theta_max..=*theta_max),
                            rng.random_range(-omega_max..=*omega_max),
                            rng.random_range(-theta_max..=*theta_max),
                            rng.random_range(-omega_max..=*omega_max),
                        )
                    })
                    .collect()
            }
        }
    }
}

/// How multi-trajectory data is divided into splits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLayout {
    /// Trajectories laid end to end, then one temporal split.
    #[default]
    Concatenated,
    /// Each trajectory split temporally on its own, so every split sees
    /// every initial condition (earlier segments train, later ones test).
    PerTrajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumDataConfig {
    pub params: PendulumParams,
    pub sim: SimConfig,
    pub initial: InitialConditions,
    pub split_layout: SplitLayout,
    pub total_pairs: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for PendulumDataConfig {
    fn default() -> Self {
        Self {
            params: PendulumParams::default(),
            sim: SimConfig::default(),
            initial: InitialConditions::default(),
            split_layout: SplitLayout::Concatenated,
            total_pairs: 30_000,
            train_fraction: 0.6,
            val_fraction: 0.1,
        }
    }
}

impl PendulumDataConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.sim.validate()?;
        let n_traj = self.initial.states().len();
        if n_traj == 0 {
            return Err(Error::config("initial", "at least one initial state required"));
        }
        if self.total_pairs < n_traj {
            return Err(Error::config("total_pairs", "fewer pairs than trajectories"));
        }
        let fr = self.train_fraction + self.val_fraction;
        if !(self.train_fraction > 0.0 && self.val_fraction >= 0.0 && fr <= 1.0) {
            return Err(Error::config("train_fraction", "fractions must lie in [0,1] and sum to at most 1"));
        }
        Ok(())
    }
}

/// Builds `total_pairs` next-state pairs, split train/val/test in temporal
/// order (see [`SplitLayout`]). Several initial states give several trajectories laid end to end;
/// pairs never straddle a trajectory boundary.
pub fn build_pendulum_dataset(cfg: &PendulumDataConfig, seed: u64) -> Result<TrajectoryDataset> {
    cfg.validate()?;
    let starts = cfg.initial.states();
    let n_traj = starts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let base = cfg.total_pairs / n_traj;
    let mut x = Vec::with_capacity(cfg.total_pairs * 4);
    let mut y = Vec::with_capacity(cfg.total_pairs * 4);
    let mut cx = Vec::with_capacity(cfg.total_pairs * 4);
    let mut cy = Vec::with_capacity(cfg.total_pairs * 4);
    let mut trajectory_starts = Vec::with_capacity(n_traj);
    for (i, s0) in starts.into_iter().enumerate() {
        let n_pairs = if i + 1 == n_traj {
            cfg.total_pairs - base * (n_traj - 1)
        } else {
            base
        };
        trajectory_starts.push(x.len() / 4);
        let (clean, noisy) = rk4_simulate(s0, &cfg.params, &cfg.sim, n_pairs, &mut rng)?;
        for t in 0..n_pairs {
            x.extend(noisy[t].to_array());
            y.extend(noisy[t + 1].to_array());
            cx.extend(clean[t].to_array());
            cy.extend(clean[t + 1].to_array());
        }
    }
    let n = cfg.total_pairs;
    let (xt, yt) = (Tensor2D::new(n, 4, x)?, Tensor2D::new(n, 4, y)?);
    let pairs = match cfg.split_layout {
        SplitLayout::Concatenated => {
            let (n_train, n_val, _) = split_sizes(n, cfg.train_fraction, cfg.val_fraction);
            SplitDataset::temporal(xt, yt, n_train, n_val)?
        }
        SplitLayout::PerTrajectory => {
            let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
            for (i, &start) in trajectory_starts.iter().enumerate() {
                let end = trajectory_starts.get(i + 1).copied().unwrap_or(n);
                let (a, b, _) = split_sizes(end - start, cfg.train_fraction, cfg.val_fraction);
                train.extend(start..start + a);
                val.extend(start + a..start + a + b);
                test.extend(start + a + b..end);
            }
            SplitDataset::new(xt, yt, train, val, test)?
        }
    };
    Ok(TrajectoryDataset {
        pairs,
        clean_x: Tensor2D::new(n, 4, cx)?,
        clean_y: Tensor2D::new(n, 4, cy)?,
        trajectory_starts,
    })
}

pub const PENDULUM_CSV_HEADER: [&str; 9] = [
    "theta1_t",
    "omega1_t",
    "theta2_t",
    "omega2_t",
    "theta1_next",
    "omega1_next",
    "theta2_next",
    "omega2_next",
    "split",
];

/// Writes the noisy pairs as CSV with a header row and a split column.
pub fn write_pendulum_csv(ds: &TrajectoryDataset, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PENDULUM_CSV_HEADER)?;
    let tags = ds.pairs.split_of_rows();
    for (r, tag) in tags.iter().enumerate() {
        let mut rec: Vec<String> = ds.pairs.x.row(r).iter().map(|v| v.to_string()).collect();
        rec.extend(ds.pairs.y.row(r).iter().map(|v| v.to_string()));
        rec.push(tag.map_or("", |s| s.as_str()).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
