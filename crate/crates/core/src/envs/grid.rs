//! The three discrete 9x9 gridworlds.
//!
//! Layouts, all fixed constants:
//!
//! * `diagonal`: open grid, start uniform over the top-left 3x3 block,
//!   goal at the bottom-right corner. Channels: walls, agent, goal.
//! * `takeball`: open grid, start at the centre, four balls one cell from
//!   each edge on the centre row and column (up, left, down, right), goal
//!   at the bottom-right corner. A ball is collected when the agent enters
//!   its cell; the goal ends the episode only once a ball is held.
//!   Channels: walls, agent, goal, one per ball.
//! * `extra`: a fresh random map per episode (wall density 0.15) with a
//!   start, a goal and two special cells, all mutually reachable. Special
//!   cells clear from the observation once visited. Channels: walls,
//!   agent, goal, one per special cell.

use std::collections::VecDeque;

use rand::Rng;

use super::EnvError;
use crate::dataset::{Observation, PackedGrid, GRID_CELLS, GRID_SIDE};

/// Maximum episode length.
pub const HORIZON: u32 = 40;
/// Probability that the intended action is replaced by a uniform one.
pub const DEFAULT_ACTION_NOISE: f64 = 0.3;
pub const NUM_ACTIONS: usize = 5;

const LAST: usize = GRID_SIDE - 1;
const EXTRA_WALL_DENSITY: f64 = 0.15;

/// Discrete moves. Declaration order is the tie-break priority.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GridAction {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Stay = 4,
}

impl GridAction {
    pub const ALL: [GridAction; NUM_ACTIONS] = [
        GridAction::Up,
        GridAction::Down,
        GridAction::Left,
        GridAction::Right,
        GridAction::Stay,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> (i32, i32) {
        match self {
            GridAction::Up => (-1, 0),
            GridAction::Down => (1, 0),
            GridAction::Left => (0, -1),
            GridAction::Right => (0, 1),
            GridAction::Stay => (0, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    fn bit(self) -> u128 {
        1u128 << (self.row * GRID_SIDE + self.col)
    }

    fn offset(self, action: GridAction) -> Option<Pos> {
        let (dr, dc) = action.delta();
        let row = self.row as i32 + dr;
        let col = self.col as i32 + dc;
        let range = 0..GRID_SIDE as i32;
        (range.contains(&row) && range.contains(&col)).then(|| Pos::new(row as usize, col as usize))
    }

    fn manhattan(self, other: Pos) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GridKind {
    Diagonal,
    Takeball,
    Extra,
}

impl GridKind {
    pub fn channels(self) -> usize {
        3 + self.item_count()
    }

    pub fn item_count(self) -> usize {
        match self {
            GridKind::Diagonal => 0,
            GridKind::Takeball => 4,
            GridKind::Extra => 2,
        }
    }

    pub fn expert_count(self) -> usize {
        match self {
            GridKind::Diagonal => 5,
            GridKind::Takeball => 4,
            GridKind::Extra => 3,
        }
    }
}

pub const TAKEBALL_START: Pos = Pos::new(4, 4);
pub const TAKEBALL_BALLS: [Pos; 4] = [Pos::new(1, 4), Pos::new(4, 1), Pos::new(7, 4), Pos::new(4, 7)];
pub const CORNER_GOAL: Pos = Pos::new(LAST, LAST);

/// Full state of a gridworld episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridState {
    pub kind: GridKind,
    pub agent: Pos,
    pub goal: Pos,
    /// Wall bitmap, bit `row * 9 + col`.
    pub walls: u128,
    /// Balls (takeball) or special cells (extra); `None` once visited.
    pub items: Vec<Option<Pos>>,
    pub collected: usize,
    pub t: u32,
    pub done: bool,
}

/// Result of one transition.
#[derive(Clone, Debug, PartialEq)]
pub struct GridStep {
    pub state: GridState,
    pub reward: f64,
    pub done: bool,
    /// The action the dynamics actually applied.
    pub executed: GridAction,
    /// Whether the noise replaced the intended action.
    pub substituted: bool,
}

impl GridState {
    /// Samples a start state.
    pub fn reset<R: Rng>(kind: GridKind, rng: &mut R) -> Self {
        match kind {
            GridKind::Diagonal => Self {
                kind,
                agent: Pos::new(rng.random_range(0..3), rng.random_range(0..3)),
                goal: CORNER_GOAL,
                walls: 0,
                items: Vec::new(),
                collected: 0,
                t: 0,
                done: false,
            },
            GridKind::Takeball => Self {
                kind,
                agent: TAKEBALL_START,
                goal: CORNER_GOAL,
                walls: 0,
                items: TAKEBALL_BALLS.iter().copied().map(Some).collect(),
                collected: 0,
                t: 0,
                done: false,
            },
            GridKind::Extra => random_extra_map(rng),
        }
    }

    pub fn is_wall(&self, p: Pos) -> bool {
        self.walls & p.bit() != 0
    }

    pub fn observe(&self) -> Observation {
        let mut planes = Vec::with_capacity(self.kind.channels());
        planes.push(self.walls);
        planes.push(self.agent.bit());
        planes.push(self.goal.bit());
        planes.extend(self.items.iter().map(|it| it.map_or(0, Pos::bit)));
        Observation::Grid(PackedGrid::new(planes))
    }

    fn goal_ends_episode(&self) -> bool {
        match self.kind {
            GridKind::Takeball => self.collected >= 1,
            _ => true,
        }
    }

    /// Applies `action`, replacing it with a uniform action with
    /// probability `noise`.
    pub fn step<R: Rng>(&self, action: GridAction, noise: f64, rng: &mut R) -> Result<GridStep, EnvError> {
        if self.done {
            return Err(EnvError::Terminal);
        }
        let substituted = noise > 0.0 && rng.random_bool(noise);
        let executed = if substituted {
            GridAction::ALL[rng.random_range(0..NUM_ACTIONS)]
        } else {
            action
        };

        let mut next = self.clone();
        if let Some(p) = self.agent.offset(executed).filter(|&p| !self.is_wall(p)) {
            next.agent = p;
        }
        for item in next.items.iter_mut() {
            if *item == Some(next.agent) {
                *item = None;
                next.collected += 1;
            }
        }
        next.t += 1;
        let at_goal = next.agent == next.goal && next.goal_ends_episode();
        next.done = at_goal || next.t >= HORIZON;
        Ok(GridStep {
            done: next.done,
            state: next,
            reward: 0.0,
            executed,
            substituted,
        })
    }

    /// Recovers the agent position from an observation's agent channel.
    pub fn agent_from_observation(obs: &Observation) -> Option<Pos> {
        let Observation::Grid(g) = obs else { return None };
        let plane = g.plane(1);
        (plane.count_ones() == 1).then(|| {
            let b = plane.trailing_zeros() as usize;
            Pos::new(b / GRID_SIDE, b % GRID_SIDE)
        })
    }

    /// ASCII picture: `#` wall, `A` agent, `G` goal, digits for items.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(GRID_CELLS + GRID_SIDE);
        for row in 0..GRID_SIDE {
            for col in 0..GRID_SIDE {
                let p = Pos::new(row, col);
                let ch = if p == self.agent {
                    'A'
                } else if self.is_wall(p) {
                    '#'
                } else if let Some(i) = self.items.iter().position(|it| *it == Some(p)) {
                    char::from_digit(i as u32 + 1, 10).unwrap_or('?')
                } else if p == self.goal {
                    'G'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

fn random_free_cell<R: Rng>(walls: u128, taken: &[Pos], rng: &mut R) -> Pos {
    loop {
        let p = Pos::new(rng.random_range(0..GRID_SIDE), rng.random_range(0..GRID_SIDE));
        if walls & p.bit() == 0 && !taken.contains(&p) {
            return p;
        }
    }
}

fn random_extra_map<R: Rng>(rng: &mut R) -> GridState {
    loop {
        let mut walls = 0u128;
        for b in 0..GRID_CELLS {
            if rng.random_bool(EXTRA_WALL_DENSITY) {
                walls |= 1 << b;
            }
        }
        let start = random_free_cell(walls, &[], rng);
        let goal = random_free_cell(walls, &[start], rng);
        let s1 = random_free_cell(walls, &[start, goal], rng);
        let s2 = random_free_cell(walls, &[start, goal, s1], rng);
        let dist = bfs_distances(walls, goal);
        if [start, s1, s2].iter().all(|p| dist[cell(*p)].is_some()) {
            return GridState {
                kind: GridKind::Extra,
                agent: start,
                goal,
                walls,
                items: vec![Some(s1), Some(s2)],
                collected: 0,
                t: 0,
                done: false,
            };
        }
    }
}

fn cell(p: Pos) -> usize {
    p.row * GRID_SIDE + p.col
}

/// Shortest-path distances to `target` through non-wall cells.
fn bfs_distances(walls: u128, target: Pos) -> Vec<Option<u32>> {
    let mut dist = vec![None; GRID_CELLS];
    if walls & target.bit() != 0 {
        return dist;
    }
    dist[cell(target)] = Some(0);
    let mut queue = VecDeque::from([target]);
    while let Some(p) = queue.pop_front() {
        let d = dist[cell(p)].unwrap();
        for a in &GridAction::ALL[..4] {
            if let Some(q) = p.offset(*a) {
                if walls & q.bit() == 0 && dist[cell(q)].is_none() {
                    dist[cell(q)] = Some(d + 1);
                    queue.push_back(q);
                }
            }
        }
    }
    dist
}

/// First action (by priority) whose move strictly reduces the remaining
/// distance to `target`; `Stay` when already there or unreachable.
fn step_toward(from: Pos, target: Pos, walls: u128) -> GridAction {
    if from == target {
        return GridAction::Stay;
    }
    if walls == 0 {
        let d = from.manhattan(target);
        return GridAction::ALL[..4]
            .iter()
            .copied()
            .find(|a| from.offset(*a).is_some_and(|q| q.manhattan(target) < d))
            .unwrap_or(GridAction::Stay);
    }
    let dist = bfs_distances(walls, target);
    let Some(d) = dist[cell(from)] else {
        return GridAction::Stay;
    };
    GridAction::ALL[..4]
        .iter()
        .copied()
        .find(|a| {
            from.offset(*a)
                .is_some_and(|q| walls & q.bit() == 0 && dist[cell(q)].is_some_and(|dq| dq < d))
        })
        .unwrap_or(GridAction::Stay)
}

/// Right or down, turned aside when the preferred move would leave the map.
fn right_or_down(p: Pos, prefer_right: bool) -> GridAction {
    match (prefer_right, p.col == LAST, p.row == LAST) {
        (_, true, true) => GridAction::Stay,
        (true, false, _) | (false, false, true) => GridAction::Right,
        _ => GridAction::Down,
    }
}

/// Deterministic expert decision rule; `expert` is zero-based.
pub fn expert_action(kind: GridKind, expert: usize, state: &GridState) -> GridAction {
    let p = state.agent;
    match kind {
        GridKind::Diagonal => {
            let black = (p.row + p.col).is_multiple_of(2);
            let prefer_right = match expert {
                0 => true,
                1 => false,
                // Strictly below the main diagonal.
                2 => p.row > p.col,
                3 => black,
                _ => !black,
            };
            right_or_down(p, prefer_right)
        }
        GridKind::Takeball => {
            let target = state.items.get(expert).copied().flatten().unwrap_or(state.goal);
            step_toward(p, target, state.walls)
        }
        GridKind::Extra => match expert {
            0 => {
                let remaining: Vec<Pos> = state.items.iter().flatten().copied().collect();
                let target = match remaining.as_slice() {
                    [] => state.goal,
                    [only] => *only,
                    [a, b, ..] => {
                        let from_a = bfs_distances(state.walls, *a);
                        let from_b = bfs_distances(state.walls, *b);
                        let route = |first: &[Option<u32>], second: Pos, second_d: &[Option<u32>]| {
                            let to_first = first[cell(p)].unwrap_or(u32::MAX / 4);
                            let between = first[cell(second)].unwrap_or(u32::MAX / 4);
                            let to_goal = second_d[cell(state.goal)].unwrap_or(u32::MAX / 4);
                            to_first + between + to_goal
                        };
                        if route(&from_a, *b, &from_b) <= route(&from_b, *a, &from_a) {
                            *a
                        } else {
                            *b
                        }
                    }
                };
                step_toward(p, target, state.walls)
            }
            1 => {
                let mut blocked = state.walls;
                for s in state.items.iter().flatten() {
                    blocked |= s.bit();
                }
                let a = step_toward(p, state.goal, blocked);
                if a == GridAction::Stay && p != state.goal {
                    step_toward(p, state.goal, state.walls)
                } else {
                    a
                }
            }
            _ => step_toward(p, state.goal, state.walls),
        },
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn open_state(kind: GridKind, agent: Pos) -> GridState {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = GridState::reset(kind, &mut rng);
        s.agent = agent;
        s
    }

    #[test]
    fn moves_and_wall_bumps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = open_state(GridKind::Diagonal, Pos::new(4, 4));
        let out = s.step(GridAction::Right, 0.0, &mut rng).unwrap();
        assert_eq!(out.state.agent, Pos::new(4, 5));
        let edge = open_state(GridKind::Diagonal, Pos::new(4, 8));
        let out = edge.step(GridAction::Right, 0.0, &mut rng).unwrap();
        assert_eq!(out.state.agent, Pos::new(4, 8));
        let mut walled = open_state(GridKind::Diagonal, Pos::new(4, 4));
        walled.walls = Pos::new(4, 5).bit();
        assert_eq!(
            walled.step(GridAction::Right, 0.0, &mut rng).unwrap().state.agent,
            Pos::new(4, 4)
        );
    }

    #[test]
    fn stepping_terminal_state_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = open_state(GridKind::Diagonal, Pos::new(4, 4));
        s.done = true;
        assert!(matches!(s.step(GridAction::Up, 0.0, &mut rng), Err(EnvError::Terminal)));
    }

    #[test]
    fn takeball_goal_needs_a_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = open_state(GridKind::Takeball, Pos::new(8, 7));
        let out = s.step(GridAction::Right, 0.0, &mut rng).unwrap();
        assert!(!out.done);
        let mut held = open_state(GridKind::Takeball, Pos::new(8, 7));
        held.items[0] = None;
        held.collected = 1;
        assert!(held.step(GridAction::Right, 0.0, &mut rng).unwrap().done);
    }

    #[test]
    fn ball_is_collected_on_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = open_state(GridKind::Takeball, Pos::new(2, 4));
        let out = s.step(GridAction::Up, 0.0, &mut rng).unwrap();
        assert_eq!(out.state.items[0], None);
        assert_eq!(out.state.collected, 1);
    }

    #[test]
    fn diagonal_expert_rules() {
        let origin = open_state(GridKind::Diagonal, Pos::new(0, 0));
        assert_eq!(expert_action(GridKind::Diagonal, 0, &origin), GridAction::Right);
        assert_eq!(expert_action(GridKind::Diagonal, 1, &origin), GridAction::Down);
        // (0,0) is black, (0,1) is white.
        assert_eq!(expert_action(GridKind::Diagonal, 3, &origin), GridAction::Right);
        let white = open_state(GridKind::Diagonal, Pos::new(0, 1));
        assert_eq!(expert_action(GridKind::Diagonal, 3, &white), GridAction::Down);
        assert_eq!(expert_action(GridKind::Diagonal, 4, &white), GridAction::Right);
        let below = open_state(GridKind::Diagonal, Pos::new(3, 1));
        assert_eq!(expert_action(GridKind::Diagonal, 2, &below), GridAction::Right);
        let above = open_state(GridKind::Diagonal, Pos::new(1, 3));
        assert_eq!(expert_action(GridKind::Diagonal, 2, &above), GridAction::Down);
        let right_wall = open_state(GridKind::Diagonal, Pos::new(3, 8));
        assert_eq!(expert_action(GridKind::Diagonal, 0, &right_wall), GridAction::Down);
        let bottom_wall = open_state(GridKind::Diagonal, Pos::new(8, 3));
        assert_eq!(expert_action(GridKind::Diagonal, 1, &bottom_wall), GridAction::Right);
    }

    #[test]
    fn takeball_experts_disagree_at_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = GridState::reset(GridKind::Takeball, &mut rng);
        let actions: Vec<GridAction> = (0..4).map(|e| expert_action(GridKind::Takeball, e, &s)).collect();
        assert_eq!(
            actions,
            vec![GridAction::Up, GridAction::Left, GridAction::Down, GridAction::Right]
        );
    }

    #[test]
    fn extra_maps_are_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let s = GridState::reset(GridKind::Extra, &mut rng);
            let dist = bfs_distances(s.walls, s.goal);
            assert!(dist[cell(s.agent)].is_some());
            for it in s.items.iter().flatten() {
                assert!(dist[cell(*it)].is_some());
            }
        }
    }

    #[test]
    fn render_marks_entities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = GridState::reset(GridKind::Takeball, &mut rng);
        let pic = s.render();
        assert_eq!(pic.lines().count(), 9);
        assert_eq!(pic.lines().nth(4).unwrap(), ".2..A..4.");
        assert!(pic.lines().nth(8).unwrap().ends_with('G'));
    }
}
