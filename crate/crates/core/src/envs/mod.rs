//! Environments and their scripted expert policies.

pub mod grid;
pub mod path;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{Action, ActionSpace, Observation, Step, Trajectory};
pub use grid::{expert_action, GridAction, GridKind, GridState, GridStep, Pos};
pub use path::PathState;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("cannot step a terminal state")]
    Terminal,
    #[error("unknown environment `{0}`")]
    UnknownEnv(String),
    #[error("environment `{env}` has {count} experts, got index {expert}")]
    UnknownExpert { env: EnvId, expert: usize, count: usize },
    #[error("invalid action {0}")]
    InvalidAction(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnvId {
    Diagonal,
    Takeball,
    Extra,
    Pathfollowing,
}

impl EnvId {
    pub const ALL: [EnvId; 4] = [EnvId::Diagonal, EnvId::Takeball, EnvId::Extra, EnvId::Pathfollowing];

    pub fn name(self) -> &'static str {
        match self {
            EnvId::Diagonal => "diagonal",
            EnvId::Takeball => "takeball",
            EnvId::Extra => "extra",
            EnvId::Pathfollowing => "pathfollowing",
        }
    }

    pub fn grid_kind(self) -> Option<GridKind> {
        match self {
            EnvId::Diagonal => Some(GridKind::Diagonal),
            EnvId::Takeball => Some(GridKind::Takeball),
            EnvId::Extra => Some(GridKind::Extra),
            EnvId::Pathfollowing => None,
        }
    }

    pub fn expert_count(self) -> usize {
        self.grid_kind().map_or(3, GridKind::expert_count)
    }

    pub fn action_space(self) -> ActionSpace {
        match self {
            EnvId::Pathfollowing => ActionSpace::Continuous(2),
            _ => ActionSpace::Discrete(grid::NUM_ACTIONS),
        }
    }

    /// Number of observation channels for grid environments.
    pub fn channels(self) -> Option<usize> {
        self.grid_kind().map(GridKind::channels)
    }

    fn stream_id(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvId {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EnvId::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| EnvError::UnknownEnv(s.to_string()))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for one episode, a pure function of its coordinates so that
/// generation order and thread count do not matter.
pub fn episode_rng(seed: u64, env: EnvId, expert: usize, episode: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for part in [env.stream_id(), expert as u64, episode] {
        h = splitmix64(h ^ part);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Dynamics noise settings for rollouts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Noise {
    /// Action replacement probability in grid environments.
    pub action: f64,
    /// Per-axis displacement std in the continuous environment.
    pub position: f64,
}

impl Default for Noise {
    fn default() -> Self {
        Self {
            action: grid::DEFAULT_ACTION_NOISE,
            position: path::NOISE_STD,
        }
    }
}

impl Noise {
    pub const NONE: Noise = Noise {
        action: 0.0,
        position: 0.0,
    };
}

/// Runs one episode of `expert` (zero-based). Each step records the
/// observation before acting and the expert's intended action.
pub fn rollout<R: rand::Rng>(env: EnvId, expert: usize, noise: Noise, rng: &mut R) -> Result<Trajectory, EnvError> {
    let count = env.expert_count();
    if expert >= count {
        return Err(EnvError::UnknownExpert { env, expert, count });
    }
    let mut steps = Vec::new();
    match env.grid_kind() {
        Some(kind) => {
            let mut state = GridState::reset(kind, rng);
            while !state.done {
                let action = expert_action(kind, expert, &state);
                steps.push(Step {
                    obs: state.observe(),
                    action: Action::Discrete(action.index()),
                    reward: 0.0,
                });
                let out = state.step(action, noise.action, rng)?;
                steps.last_mut().expect("just pushed").reward = out.reward;
                state = out.state;
            }
        }
        None => {
            let mut state = PathState::reset(rng);
            while !state.done {
                let action = path::expert_action(expert, state.pos);
                steps.push(Step {
                    obs: Observation::Point(state.observe()),
                    action: Action::Continuous(action.to_vec()),
                    reward: 0.0,
                });
                let out = state.step(action, noise.position, rng)?;
                steps.last_mut().expect("just pushed").reward = out.reward;
                state = out.state;
            }
        }
    }
    Ok(Trajectory::new(steps))
}
