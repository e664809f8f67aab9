//! Continuous 2-D point navigation with three route-preferring experts.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::EnvError;

pub const STEP_SCALE: f64 = 0.1;
pub const NOISE_STD: f64 = 0.05;
pub const GOAL: [f64; 2] = [1.0, 1.0];
pub const HORIZON: u32 = 40;
pub const GOAL_RADIUS: f64 = 0.1;
pub const START_LOW: f64 = -1.5;
pub const START_HIGH: f64 = -0.5;

/// Detour waypoints of experts 2 and 3.
pub const UP_FIRST_WAYPOINT: [f64; 2] = [-1.0, 1.0];
pub const RIGHT_FIRST_WAYPOINT: [f64; 2] = [1.0, -1.0];
/// Coordinate past which a detour counts as completed. Cutting the corner
/// here keeps the detour routes within the horizon from every start.
const WAYPOINT_REACHED: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct PathState {
    pub pos: [f64; 2],
    pub t: u32,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathStep {
    pub state: PathState,
    pub reward: f64,
    pub done: bool,
}

impl PathState {
    pub fn reset<R: Rng>(rng: &mut R) -> Self {
        Self {
            pos: [
                rng.random_range(START_LOW..START_HIGH),
                rng.random_range(START_LOW..START_HIGH),
            ],
            t: 0,
            done: false,
        }
    }

    pub fn observe(&self) -> Vec<f64> {
        self.pos.to_vec()
    }

    /// Moves by `clamp(action, ±1) * STEP_SCALE` plus isotropic Gaussian
    /// noise with standard deviation `noise_std`.
    pub fn step<R: Rng>(&self, action: [f64; 2], noise_std: f64, rng: &mut R) -> Result<PathStep, EnvError> {
        if self.done {
            return Err(EnvError::Terminal);
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::InvalidAction(format!("{action:?}")));
        }
        let pos = displace(self.pos, action, noise_std, rng);
        let t = self.t + 1;
        let dist = ((pos[0] - GOAL[0]).powi(2) + (pos[1] - GOAL[1]).powi(2)).sqrt();
        let done = dist <= GOAL_RADIUS || t >= HORIZON;
        Ok(PathStep {
            state: PathState { pos, t, done },
            reward: 0.0,
            done,
        })
    }
}

/// One step of the point dynamics without episode bookkeeping.
pub fn displace<R: Rng>(pos: [f64; 2], action: [f64; 2], noise_std: f64, rng: &mut R) -> [f64; 2] {
    let mut out = pos;
    let noise = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("finite std"));
    for (o, a) in out.iter_mut().zip(action) {
        *o += a.clamp(-1.0, 1.0) * STEP_SCALE;
        if let Some(n) = &noise {
            *o += n.sample(rng);
        }
    }
    out
}

/// Velocity command of expert `expert` (zero-based) at `pos`.
///
/// Each expert steers proportionally toward its current waypoint. The
/// detour experts aim at their corner waypoint until they have crossed a
/// fixed coordinate on the way there, which keeps the rule a function of position
/// alone.
pub fn expert_action(expert: usize, pos: [f64; 2]) -> [f64; 2] {
    let target = match expert {
        1 if pos[1] < WAYPOINT_REACHED => UP_FIRST_WAYPOINT,
        2 if pos[0] < WAYPOINT_REACHED => RIGHT_FIRST_WAYPOINT,
        _ => GOAL,
    };
    [
        ((target[0] - pos[0]) / STEP_SCALE).clamp(-1.0, 1.0),
        ((target[1] - pos[1]) / STEP_SCALE).clamp(-1.0, 1.0),
    ]
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn noiseless_moves() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(displace([0.3, -0.2], [0.0, 0.0], 0.0, &mut rng), [0.3, -0.2]);
        let p = displace([0.0, 0.0], [1.0, 0.0], 0.0, &mut rng);
        assert!((p[0] - 0.1).abs() < 1e-15 && p[1] == 0.0);
        let clamped = displace([0.0, 0.0], [5.0, -5.0], 0.0, &mut rng);
        assert!((clamped[0] - 0.1).abs() < 1e-15 && (clamped[1] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn experts_prefer_their_axis() {
        let a = expert_action(1, [-1.0, -1.0]);
        assert!(a[1] > a[0].abs());
        let b = expert_action(2, [-1.0, -1.0]);
        assert!(b[0] > b[1].abs());
        let at_goal = expert_action(0, GOAL);
        assert_eq!(at_goal, [0.0, 0.0]);
    }

    #[test]
    fn noiseless_experts_reach_goal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (expert, start) in (0..3).flat_map(|e| [[-1.5, -1.5], [-0.5, -1.5], [-1.5, -0.5]].map(|p| (e, p))) {
            let mut s = PathState {
                pos: start,
                t: 0,
                done: false,
            };
            while !s.done {
                s = s.step(expert_action(expert, s.pos), 0.0, &mut rng).unwrap().state;
            }
            let d = ((s.pos[0] - 1.0).powi(2) + (s.pos[1] - 1.0).powi(2)).sqrt();
            assert!(d <= GOAL_RADIUS, "expert {expert} ended at {:?}", s.pos);
        }
    }

    #[test]
    fn non_finite_action_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = PathState::reset(&mut rng);
        assert!(s.step([f64::NAN, 0.0], 0.0, &mut rng).is_err());
    }
}
