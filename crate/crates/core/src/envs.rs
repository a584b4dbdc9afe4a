//! Desk-scale continuous-control environments.
//!
//! Two environments share one state layout, a 2-vector:
//! * `room_nav_2d`: an agent at `(x, y)` inside the walled room `[-1, 1]^2`,
//!   moving by `step_scale * action` per step.
//! * `line_walker`: `(position, velocity)` on an unbounded line, driven by a
//!   scalar acceleration. Position carries no reward signal of its own.
//!
//! Oracle rewards are used only to simulate preference labels and to score
//! evaluations; the learners never see them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState(pub [f64; STATE_DIM]);

impl EnvState {
    pub const ORIGIN: EnvState = EnvState([0.0, 0.0]);

    pub fn new(a: f64, b: f64) -> Self {
        EnvState([a, b])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn distance(&self, other: &EnvState) -> f64 {
        self.squared_distance(other).sqrt()
    }

    pub fn squared_distance(&self, other: &EnvState) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

/// Action components in `[-1, 1]`; out-of-range values are clamped on use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvAction(pub Vec<f64>);

impl EnvAction {
    pub fn clamped(&self) -> Vec<f64> {
        self.0.iter().map(|a| a.clamp(-1.0, 1.0)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    RoomNav2d,
    LineWalker,
}

impl EnvName {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnvName::RoomNav2d => "room_nav_2d",
            EnvName::LineWalker => "line_walker",
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "room_nav_2d" => Ok(EnvName::RoomNav2d),
            "line_walker" => Ok(EnvName::LineWalker),
            other => Err(Error::config(format!("unknown environment `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub env_name: EnvName,
    pub episode_length: usize,
    pub step_scale: f64,
    /// Center of the Gaussian oracle (room only).
    pub goal: [f64; 2],
    pub goal_sigma: f64,
    /// Speed limit (line walker only).
    pub v_max: f64,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::room_nav_2d()
    }
}

impl EnvConfig {
    pub fn room_nav_2d() -> Self {
        Self {
            env_name: EnvName::RoomNav2d,
            episode_length: 50,
            step_scale: 0.1,
            goal: [0.9, 0.9],
            goal_sigma: 0.2,
            v_max: 1.0,
            seed: 0,
        }
    }

    pub fn line_walker() -> Self {
        Self { env_name: EnvName::LineWalker, episode_length: 200, ..Self::room_nav_2d() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episode_length == 0 {
            return Err(Error::config("episode_length must be positive"));
        }
        if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            return Err(Error::config("step_scale must be a positive real"));
        }
        if !(self.goal_sigma > 0.0 && self.goal_sigma.is_finite()) {
            return Err(Error::config("goal_sigma must be a positive real"));
        }
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return Err(Error::config("v_max must be a positive real"));
        }
        if self.env_name == EnvName::RoomNav2d && self.goal.iter().any(|g| !(-1.0..=1.0).contains(g)) {
            return Err(Error::config("goal must lie inside the room [-1, 1]^2"));
        }
        Ok(())
    }
}

/// Axis-aligned box containing every reachable state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub low: [f64; STATE_DIM],
    pub high: [f64; STATE_DIM],
}

impl StateBox {
    pub fn contains(&self, s: &EnvState) -> bool {
        s.0.iter().enumerate().all(|(i, v)| *v >= self.low[i] && *v <= self.high[i])
    }

    pub fn volume(&self) -> f64 {
        self.low.iter().zip(&self.high).map(|(l, h)| h - l).product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleReward {
    GaussianGoal { goal: [f64; 2], sigma: f64 },
    BackwardVelocity,
}

impl OracleReward {
    pub fn evaluate(&self, state: &EnvState) -> f64 {
        match *self {
            OracleReward::GaussianGoal { goal, sigma } => {
                let d2 = state.squared_distance(&EnvState(goal));
                (-d2 / (2.0 * sigma * sigma)).exp()
            }
            OracleReward::BackwardVelocity => -state.0[1],
        }
    }

    pub fn total(&self, states: &[EnvState]) -> f64 {
        states.iter().map(|s| self.evaluate(s)).sum()
    }
}

pub type Polyline = Vec<[f64; 2]>;

/// A validated environment. All methods are pure functions of their inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    config: EnvConfig,
}

impl Environment {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn name(&self) -> EnvName {
        self.config.env_name
    }

    pub fn horizon(&self) -> usize {
        self.config.episode_length
    }

    pub fn action_dim(&self) -> usize {
        match self.config.env_name {
            EnvName::RoomNav2d => 2,
            EnvName::LineWalker => 1,
        }
    }

    pub fn state_dim(&self) -> usize {
        STATE_DIM
    }

    pub fn reset(&self) -> EnvState {
        EnvState::ORIGIN
    }

    pub fn step(&self, state: &EnvState, action: &EnvAction) -> Result<EnvState> {
        if action.0.len() != self.action_dim() {
            return Err(Error::input(format!(
                "{} expects {}-dimensional actions, got {}",
                self.config.env_name,
                self.action_dim(),
                action.0.len()
            )));
        }
        let a = action.clamped();
        let k = self.config.step_scale;
        Ok(match self.config.env_name {
            EnvName::RoomNav2d => EnvState([
                (state.0[0] + k * a[0]).clamp(-1.0, 1.0),
                (state.0[1] + k * a[1]).clamp(-1.0, 1.0),
            ]),
            EnvName::LineWalker => {
                let v_max = self.config.v_max;
                let velocity = (state.0[1] + k * a[0]).clamp(-v_max, v_max);
                EnvState([state.0[0] + velocity, velocity])
            }
        })
    }

    /// The box every state reachable within one episode lies in. For the
    /// line walker the position is bounded by `horizon * v_max`.
    pub fn state_box(&self) -> StateBox {
        match self.config.env_name {
            EnvName::RoomNav2d => StateBox { low: [-1.0, -1.0], high: [1.0, 1.0] },
            EnvName::LineWalker => {
                let v = self.config.v_max;
                let p = v * self.config.episode_length as f64;
                StateBox { low: [-p, -v], high: [p, v] }
            }
        }
    }

    pub fn oracle(&self) -> OracleReward {
        match self.config.env_name {
            EnvName::RoomNav2d => {
                OracleReward::GaussianGoal { goal: self.config.goal, sigma: self.config.goal_sigma }
            }
            EnvName::LineWalker => OracleReward::BackwardVelocity,
        }
    }

    pub fn goal(&self) -> Option<EnvState> {
        match self.config.env_name {
            EnvName::RoomNav2d => Some(EnvState(self.config.goal)),
            EnvName::LineWalker => None,
        }
    }

    /// Room trajectories map to their `(x, y)` path; line-walker
    /// trajectories map to the `(t, position)` curve.
    pub fn render_trajectory(&self, states: &[EnvState]) -> Result<Polyline> {
        if states.is_empty() {
            return Err(Error::input("cannot render an empty trajectory"));
        }
        Ok(match self.config.env_name {
            EnvName::RoomNav2d => states.iter().map(|s| s.0).collect(),
            EnvName::LineWalker => states.iter().enumerate().map(|(t, s)| [t as f64, s.0[0]]).collect(),
        })
    }
}
