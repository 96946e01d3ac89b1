//! Multi-pendulum swing-up environment.
//!
//! `N` independent pendulums are simulated side by side and observed jointly.
//! Only the first pendulum is driven by the agent and only it produces reward;
//! the other `N - 1` receive uniform random torques drawn from the
//! environment's own seeded stream, so they act as reward-irrelevant but fully
//! reproducible observation noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TWO_PI: f64 = 2.0 * PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub n_pendulums: usize,
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub dt: f64,
    pub max_torque: f64,
    pub max_speed: f64,
    pub episode_len: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_pendulums: 1,
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            dt: 0.05,
            max_torque: 2.0,
            max_speed: 8.0,
            episode_len: 200,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn with_pendulums(n_pendulums: usize) -> Self {
        Self {
            n_pendulums,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("env: {msg}")));
        if self.n_pendulums == 0 {
            return bad("n_pendulums must be >= 1");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be > 0");
        }
        if !(self.max_torque > 0.0) {
            return bad("max_torque must be > 0");
        }
        if !(self.max_speed > 0.0) {
            return bad("max_speed must be > 0");
        }
        if self.episode_len == 0 {
            return bad("episode_len must be >= 1");
        }
        if !(self.mass > 0.0 && self.length > 0.0 && self.gravity.is_finite()) {
            return bad("mass and length must be > 0, gravity finite");
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        3 * self.n_pendulums
    }

    /// The agent controls a single torque.
    pub fn action_dim(&self) -> usize {
        1
    }

    /// Most negative reward a single step can produce.
    pub fn min_reward(&self) -> f64 {
        -(PI * PI + 0.1 * self.max_speed * self.max_speed + 0.001 * self.max_torque * self.max_torque)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PendulumState {
    /// Raw angle accumulator, 0 is upright.
    pub theta: f64,
    pub theta_dot: f64,
}

impl PendulumState {
    pub fn new(theta: f64, theta_dot: f64) -> Self {
        Self { theta, theta_dot }
    }

    /// Recovers a state from its `[sin, cos, theta_dot]` observation triple.
    pub fn from_observation(triple: &[f64]) -> Self {
        Self {
            theta: triple[0].atan2(triple[1]),
            theta_dot: triple[2],
        }
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn angle_normalize(theta: f64) -> f64 {
    let wrapped = (theta + PI).rem_euclid(TWO_PI);
    // rem_euclid can round up to exactly 2*pi for tiny negative inputs
    let wrapped = if wrapped >= TWO_PI { 0.0 } else { wrapped };
    wrapped - PI
}

/// One semi-implicit Euler step; `torque` must already be clipped.
pub fn pendulum_step(state: PendulumState, torque: f64, config: &EnvConfig) -> PendulumState {
    let g = config.gravity;
    let m = config.mass;
    let l = config.length;
    let accel = 3.0 * g / (2.0 * l) * state.theta.sin() + 3.0 / (m * l * l) * torque;
    let theta_dot = (state.theta_dot + accel * config.dt).clamp(-config.max_speed, config.max_speed);
    PendulumState {
        theta: state.theta + theta_dot * config.dt,
        theta_dot,
    }
}

pub fn pendulum_reward(state: PendulumState, torque: f64) -> f64 {
    let th = angle_normalize(state.theta);
    -(th * th + 0.1 * state.theta_dot * state.theta_dot + 0.001 * torque * torque)
}

/// Lays states out as `[sin t1, cos t1, w1, ..., sin tN, cos tN, wN]`.
pub fn observe(states: &[PendulumState]) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * states.len());
    for s in states {
        let (sin, cos) = s.theta.sin_cos();
        out.extend_from_slice(&[sin, cos, s.theta_dot]);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct MultiPendulumEnv {
    config: EnvConfig,
    states: Vec<PendulumState>,
    step_count: usize,
    total_steps: u64,
    rng: ChaCha8Rng,
}

impl MultiPendulumEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            states: vec![PendulumState::default(); config.n_pendulums],
            step_count: 0,
            total_steps: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn states(&self) -> &[PendulumState] {
        &self.states
    }

    /// Overwrites the physical state without touching the rng or counters.
    pub fn set_states(&mut self, states: &[PendulumState]) -> Result<()> {
        crate::error::check_dim("set_states", self.config.n_pendulums, states.len())?;
        self.states.copy_from_slice(states);
        Ok(())
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Steps taken over the lifetime of this instance, across episodes.
    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step_count >= self.config.episode_len
    }

    pub fn observation(&self) -> Vec<f64> {
        observe(&self.states)
    }

    pub fn reset(&mut self, seed: Option<u64>) -> Vec<f64> {
        if let Some(seed) = seed {
            self.rng = ChaCha8Rng::seed_from_u64(seed);
        }
        for s in &mut self.states {
            s.theta = self.rng.random_range(-PI..PI);
            s.theta_dot = self.rng.random_range(-1.0..1.0);
        }
        self.step_count = 0;
        self.observation()
    }

    pub fn step(&mut self, action: f64) -> Result<Step> {
        if self.is_done() {
            return Err(Error::EpisodeFinished {
                steps: self.step_count,
            });
        }
        let cfg = self.config;
        let torque = action.clamp(-cfg.max_torque, cfg.max_torque);
        let reward = pendulum_reward(self.states[0], torque);
        self.states[0] = pendulum_step(self.states[0], torque, &cfg);
        for s in self.states.iter_mut().skip(1) {
            let noise = self.rng.random_range(-cfg.max_torque..cfg.max_torque);
            *s = pendulum_step(*s, noise, &cfg);
        }
        self.step_count += 1;
        self.total_steps += 1;
        Ok(Step {
            observation: self.observation(),
            reward,
            done: self.is_done(),
        })
    }
}
