//! Analytic control environments with known reward functions.
//!
//! * `pendulum`: torque-limited swing-up. State `(θ, θ̇)` with θ = 0 upright;
//!   semi-implicit Euler with `dt = 0.05`, `|θ̇| ≤ 8`, `|u| ≤ 2`.
//! * `reacher`: planar point mass (double integrator with velocity damping)
//!   that must reach a target drawn at reset. State `(x, y, ẋ, ẏ, x*, y*)`.
//!
//! Rewards are functions of the *next* state and the applied action.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StateEncoding;

pub const PENDULUM_DT: f64 = 0.05;
pub const PENDULUM_G: f64 = 9.81;
pub const PENDULUM_MASS: f64 = 1.0;
pub const PENDULUM_LENGTH: f64 = 1.0;
pub const PENDULUM_MAX_SPEED: f64 = 8.0;
pub const PENDULUM_MAX_TORQUE: f64 = 2.0;

pub const REACHER_DT: f64 = 0.05;
pub const REACHER_DAMPING: f64 = 0.95;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Pendulum,
    Reacher,
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(EnvKind::Pendulum),
            "reacher" => Ok(EnvKind::Reacher),
            other => Err(Error::config(format!(
                "unknown environment {other:?} (expected \"pendulum\" or \"reacher\")"
            ))),
        }
    }
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Pendulum => "pendulum",
            EnvKind::Reacher => "reacher",
        }
    }

    pub fn state_dim(self) -> usize {
        self.state_names().len()
    }

    pub fn action_dim(self) -> usize {
        self.action_names().len()
    }

    pub fn state_names(self) -> &'static [&'static str] {
        match self {
            EnvKind::Pendulum => &["theta", "theta_dot"],
            EnvKind::Reacher => &["x", "y", "vx", "vy", "target_x", "target_y"],
        }
    }

    pub fn action_names(self) -> &'static [&'static str] {
        match self {
            EnvKind::Pendulum => &["torque"],
            EnvKind::Reacher => &["ax", "ay"],
        }
    }

    pub fn action_low(self) -> Vec<f64> {
        match self {
            EnvKind::Pendulum => vec![-PENDULUM_MAX_TORQUE],
            EnvKind::Reacher => vec![-1.0, -1.0],
        }
    }

    pub fn action_high(self) -> Vec<f64> {
        self.action_low().into_iter().map(|v| -v).collect()
    }

    pub fn encoding(self) -> StateEncoding {
        match self {
            EnvKind::Pendulum => StateEncoding::LeadingAngle,
            EnvKind::Reacher => StateEncoding::Identity,
        }
    }

    /// Nominal range per state dimension, used to scale observation noise.
    /// Reacher targets are known exactly and receive no noise.
    pub fn observation_scale(self) -> Vec<f64> {
        match self {
            EnvKind::Pendulum => vec![PI, PENDULUM_MAX_SPEED],
            EnvKind::Reacher => vec![2.0, 2.0, 2.0, 2.0, 0.0, 0.0],
        }
    }

    pub fn clip_action(self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low())
            .zip(self.action_high())
            .map(|((a, lo), hi)| if a.is_finite() { a.clamp(lo, hi) } else { 0.0 })
            .collect()
    }

    /// Deterministic transition `s_{t+1} = f(s_t, a_t)`; the action is
    /// clipped to its bounds first.
    pub fn transition(self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let u = self.clip_action(action);
        match self {
            EnvKind::Pendulum => {
                let (th, thdot) = (state[0], state[1]);
                let acc = 3.0 * PENDULUM_G / (2.0 * PENDULUM_LENGTH) * th.sin()
                    + 3.0 / (PENDULUM_MASS * PENDULUM_LENGTH * PENDULUM_LENGTH) * u[0];
                let new_thdot = (thdot + acc * PENDULUM_DT).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
                vec![th + new_thdot * PENDULUM_DT, new_thdot]
            }
            EnvKind::Reacher => vec![
                state[0] + REACHER_DT * state[2],
                state[1] + REACHER_DT * state[3],
                REACHER_DAMPING * state[2] + REACHER_DT * u[0],
                REACHER_DAMPING * state[3] + REACHER_DT * u[1],
                state[4],
                state[5],
            ],
        }
    }

    /// Reward of reaching `next_state` with `action`. The variance argument
    /// is accepted for the planner's interface and ignored.
    pub fn reward(self, next_state: &[f64], _variance: &[f64], action: &[f64]) -> f64 {
        match self {
            EnvKind::Pendulum => {
                let th = wrap_angle(next_state[0]);
                -(th * th + 0.1 * next_state[1] * next_state[1] + 0.001 * action[0] * action[0])
            }
            EnvKind::Reacher => {
                let dx = next_state[0] - next_state[4];
                let dy = next_state[1] - next_state[5];
                -((dx * dx + dy * dy).sqrt() + 0.01 * action.iter().map(|a| a * a).sum::<f64>())
            }
        }
    }

    /// Initial state of an episode.
    pub fn initial_state<R: Rng + ?Sized>(self, rng: &mut R) -> Vec<f64> {
        match self {
            // hanging, with a small perturbation
            EnvKind::Pendulum => vec![
                PI + rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            ],
            EnvKind::Reacher => vec![
                0.0,
                0.0,
                0.0,
                0.0,
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ],
        }
    }
}

/// Observation-noise setting: `std_i = factor · scale_i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub factor: f64,
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self { factor: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.factor.is_finite() || self.factor < 0.0 {
            return Err(Error::config(format!(
                "noise factor must be finite and ≥ 0, got {}",
                self.factor
            )));
        }
        Ok(())
    }
}

/// Noisy observation of `state`. A zero factor returns the state unchanged
/// and consumes no randomness.
pub fn observe<R: Rng + ?Sized>(state: &[f64], scale: &[f64], noise: NoiseConfig, rng: &mut R) -> Vec<f64> {
    if noise.factor == 0.0 {
        return state.to_vec();
    }
    state
        .iter()
        .zip(scale)
        .map(|(s, k)| {
            let z: f64 = StandardNormal.sample(rng);
            s + noise.factor * k * z
        })
        .collect()
}

/// A single-owner environment instance.
#[derive(Clone, Debug)]
pub struct Env {
    pub kind: EnvKind,
    state: Vec<f64>,
}

impl Env {
    pub fn new<R: Rng + ?Sized>(kind: EnvKind, rng: &mut R) -> Self {
        Self {
            kind,
            state: kind.initial_state(rng),
        }
    }

    pub fn with_state(kind: EnvKind, state: Vec<f64>) -> Self {
        Self { kind, state }
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[f64] {
        self.state = self.kind.initial_state(rng);
        &self.state
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    /// Advances the true state; returns `(next_state, reward)`.
    pub fn step(&mut self, action: &[f64]) -> (Vec<f64>, f64) {
        let u = self.kind.clip_action(action);
        let next = self.kind.transition(&self.state, &u);
        let r = self.kind.reward(&next, &[], &u);
        self.state = next.clone();
        (next, r)
    }
}
