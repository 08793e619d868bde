//! Task families used for meta-training and evaluation: random sinusoids,
//! random three-switch step functions, and a pendulum with random mass and
//! length.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const INPUT_MIN: f64 = -5.0;
pub const INPUT_MAX: f64 = 5.0;

pub const SINUSOID_NOISE_VAR: f64 = 0.05;
pub const STEP_NOISE_VAR: f64 = 0.05;
pub const PENDULUM_NOISE_VAR: f64 = 0.001;

/// One function draw: `τ` input/output pairs plus the latent parameters that
/// produced them, when known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    /// `τ × n_x`
    pub xs: Matrix,
    /// `τ × n_y`
    pub ys: Matrix,
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
}

impl TaskDataset {
    pub fn new(xs: Matrix, ys: Matrix) -> Result<Self> {
        if xs.rows() != ys.rows() {
            return Err(Error::Dimension(format!(
                "dataset has {} inputs and {} outputs",
                xs.rows(),
                ys.rows()
            )));
        }
        Ok(TaskDataset {
            xs,
            ys,
            theta: None,
        })
    }

    pub fn with_theta(mut self, theta: Vec<f64>) -> Self {
        self.theta = Some(theta);
        self
    }

    pub fn len(&self) -> usize {
        self.xs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.rows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.xs.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.ys.cols()
    }

    /// First `n` samples.
    pub fn truncated(&self, n: usize) -> TaskDataset {
        TaskDataset {
            xs: self.xs.slice_rows(0, n),
            ys: self.ys.slice_rows(0, n),
            theta: self.theta.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Sinusoid,
    Step,
    Pendulum,
}

impl TaskKind {
    pub fn input_dim(self) -> usize {
        match self {
            TaskKind::Sinusoid | TaskKind::Step => 1,
            TaskKind::Pendulum => 3,
        }
    }

    pub fn output_dim(self) -> usize {
        match self {
            TaskKind::Sinusoid | TaskKind::Step => 1,
            TaskKind::Pendulum => 2,
        }
    }

    /// Per-output noise variance used when generating data.
    pub fn default_noise_var(self) -> f64 {
        match self {
            TaskKind::Sinusoid => SINUSOID_NOISE_VAR,
            TaskKind::Step => STEP_NOISE_VAR,
            TaskKind::Pendulum => PENDULUM_NOISE_VAR,
        }
    }

    pub fn sample_dataset(self, rng: &mut impl Rng, tau: usize) -> TaskDataset {
        self.sample_dataset_with_noise(rng, tau, self.default_noise_var())
    }

    pub fn sample_dataset_with_noise(
        self,
        rng: &mut impl Rng,
        tau: usize,
        noise_var: f64,
    ) -> TaskDataset {
        match self {
            TaskKind::Sinusoid => SinusoidTask::sample(rng).dataset(rng, tau, noise_var),
            TaskKind::Step => StepTask::sample(rng).dataset(rng, tau, noise_var),
            TaskKind::Pendulum => PendulumTask::sample(rng).dataset(rng, tau, noise_var),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Sinusoid => "sinusoid",
            TaskKind::Step => "step",
            TaskKind::Pendulum => "pendulum",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoid" => Ok(TaskKind::Sinusoid),
            "step" => Ok(TaskKind::Step),
            "pendulum" => Ok(TaskKind::Pendulum),
            other => Err(Error::InvalidArgument(format!("unknown task family '{other}'"))),
        }
    }
}

fn gaussian_noise(rng: &mut impl Rng, variance: f64) -> f64 {
    if variance > 0.0 {
        let z: f64 = StandardNormal.sample(rng);
        z * variance.sqrt()
    } else {
        0.0
    }
}

fn uniform_inputs(rng: &mut impl Rng, tau: usize) -> Vec<f64> {
    (0..tau)
        .map(|_| rng.random_range(INPUT_MIN..=INPUT_MAX))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinusoidTask {
    pub amplitude: f64,
    /// radians
    pub phase: f64,
}

impl SinusoidTask {
    pub const AMPLITUDE_RANGE: (f64, f64) = (0.1, 5.0);
    pub const PHASE_RANGE: (f64, f64) = (0.0, PI);

    pub fn sample(rng: &mut impl Rng) -> Self {
        let (a0, a1) = Self::AMPLITUDE_RANGE;
        let (p0, p1) = Self::PHASE_RANGE;
        SinusoidTask {
            amplitude: rng.random_range(a0..=a1),
            phase: rng.random_range(p0..=p1),
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.amplitude * (x + self.phase).sin()
    }

    pub fn dataset(&self, rng: &mut impl Rng, tau: usize, noise_var: f64) -> TaskDataset {
        let xs = uniform_inputs(rng, tau);
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| self.value(x) + gaussian_noise(rng, noise_var))
            .collect();
        TaskDataset::new(Matrix::column(&xs), Matrix::column(&ys))
            .expect("equal lengths")
            .with_theta(vec![self.amplitude, self.phase])
    }
}

/// Piecewise-constant function that starts at −1 and flips sign at each of
/// three sorted switch points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTask {
    pub switches: [f64; 3],
}

impl StepTask {
    pub const SWITCH_RANGE: (f64, f64) = (-2.5, 2.5);

    pub fn new(mut switches: [f64; 3]) -> Result<Self> {
        switches.sort_by(f64::total_cmp);
        let (lo, hi) = Self::SWITCH_RANGE;
        if switches.iter().any(|s| !(lo..=hi).contains(s)) {
            return Err(Error::InvalidArgument(format!(
                "switch points must lie in [{lo}, {hi}]: {switches:?}"
            )));
        }
        Ok(StepTask { switches })
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let (lo, hi) = Self::SWITCH_RANGE;
        let mut s = [0.0; 3];
        for v in &mut s {
            *v = rng.random_range(lo..=hi);
        }
        s.sort_by(f64::total_cmp);
        StepTask { switches: s }
    }

    pub fn value(&self, x: f64) -> f64 {
        let crossed = self.switches.iter().filter(|&&s| s < x).count();
        if crossed % 2 == 0 {
            -1.0
        } else {
            1.0
        }
    }

    pub fn dataset(&self, rng: &mut impl Rng, tau: usize, noise_var: f64) -> TaskDataset {
        let xs = uniform_inputs(rng, tau);
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| self.value(x) + gaussian_noise(rng, noise_var))
            .collect();
        TaskDataset::new(Matrix::column(&xs), Matrix::column(&ys))
            .expect("equal lengths")
            .with_theta(self.switches.to_vec())
    }
}

pub const GRAVITY: f64 = 10.0;
pub const PENDULUM_DT: f64 = 0.05;
pub const MAX_SPEED: f64 = 8.0;

/// Angle (rad) and angular velocity (rad/s). `θ = 0` is upright.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumState {
    pub theta: f64,
    pub theta_dot: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumTask {
    /// kg
    pub mass: f64,
    /// m
    pub length: f64,
}

impl PendulumTask {
    pub const MASS_RANGE: (f64, f64) = (0.5, 1.5);
    pub const LENGTH_RANGE: (f64, f64) = (0.5, 1.5);

    pub fn sample(rng: &mut impl Rng) -> Self {
        let (m0, m1) = Self::MASS_RANGE;
        let (l0, l1) = Self::LENGTH_RANGE;
        PendulumTask {
            mass: rng.random_range(m0..=m1),
            length: rng.random_range(l0..=l1),
        }
    }

    /// Angular acceleration without the speed clip.
    pub fn acceleration(&self, theta: f64, torque: f64) -> f64 {
        let (m, l) = (self.mass, self.length);
        -3.0 * GRAVITY / (2.0 * l) * (theta + PI).sin() + 3.0 * torque / (m * l * l)
    }

    /// One semi-implicit Euler step with the velocity clipped to ±8 rad/s.
    pub fn step(&self, s: PendulumState, torque: f64) -> PendulumState {
        let theta_dot = (s.theta_dot + self.acceleration(s.theta, torque) * PENDULUM_DT)
            .clamp(-MAX_SPEED, MAX_SPEED);
        PendulumState {
            theta: s.theta + theta_dot * PENDULUM_DT,
            theta_dot,
        }
    }

    pub fn sample_initial_state(rng: &mut impl Rng) -> PendulumState {
        PendulumState {
            theta: rng.random_range(0.0..=2.0 * PI),
            theta_dot: rng.random_range(-MAX_SPEED..=MAX_SPEED),
        }
    }

    /// Open-loop (zero torque) transitions from a random initial state.
    /// Inputs are `(θ, θ̇, u)`, outputs are the state increments plus noise.
    pub fn dataset(&self, rng: &mut impl Rng, tau: usize, noise_var: f64) -> TaskDataset {
        let start = Self::sample_initial_state(rng);
        self.dataset_from(start, rng, tau, noise_var)
    }

    pub fn dataset_from(
        &self,
        start: PendulumState,
        rng: &mut impl Rng,
        tau: usize,
        noise_var: f64,
    ) -> TaskDataset {
        let mut xs = Matrix::zeros(tau, 3);
        let mut ys = Matrix::zeros(tau, 2);
        let mut s = start;
        for t in 0..tau {
            let next = self.step(s, 0.0);
            xs.row_mut(t).copy_from_slice(&[s.theta, s.theta_dot, 0.0]);
            ys.row_mut(t).copy_from_slice(&[
                next.theta - s.theta + gaussian_noise(rng, noise_var),
                next.theta_dot - s.theta_dot + gaussian_noise(rng, noise_var),
            ]);
            s = next;
        }
        TaskDataset::new(xs, ys)
            .expect("equal lengths")
            .with_theta(vec![self.mass, self.length])
    }
}

/// Draws `count` datasets of length `tau` from one family.
pub fn sample_corpus(kind: TaskKind, rng: &mut impl Rng, count: usize, tau: usize) -> Vec<TaskDataset> {
    (0..count).map(|_| kind.sample_dataset(rng, tau)).collect()
}

/// Convenience wrappers mirroring the per-family samplers.
pub fn sample_sinusoid_dataset(rng: &mut impl Rng, tau: usize) -> TaskDataset {
    TaskKind::Sinusoid.sample_dataset(rng, tau)
}

pub fn sample_step_dataset(rng: &mut impl Rng, tau: usize) -> TaskDataset {
    TaskKind::Step.sample_dataset(rng, tau)
}

pub fn sample_pendulum_dataset(rng: &mut impl Rng, tau: usize) -> TaskDataset {
    TaskKind::Pendulum.sample_dataset(rng, tau)
}
