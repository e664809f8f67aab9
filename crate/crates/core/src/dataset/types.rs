use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Side length of the gridworld maps.
pub const GRID_SIDE: usize = 9;
pub const GRID_CELLS: usize = GRID_SIDE * GRID_SIDE;

/// Binary channel planes of a 9x9 grid, one `u128` bitmap per channel
/// (bit `row * 9 + col`).
///
/// Cloning shares the planes. Hashing uses a fingerprint computed once at
/// construction, so observations double as cheap hash keys.
#[derive(Clone)]
pub struct PackedGrid {
    planes: Arc<[u128]>,
    fingerprint: u64,
}

impl PackedGrid {
    pub fn new(planes: Vec<u128>) -> Self {
        debug_assert!(planes.iter().all(|p| p >> GRID_CELLS == 0));
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for p in &planes {
            for half in [*p as u64, (*p >> 64) as u64] {
                h ^= half;
                h = h.wrapping_mul(0x0100_0000_01b3).rotate_left(29);
            }
        }
        Self {
            planes: planes.into(),
            fingerprint: h,
        }
    }

    pub fn channels(&self) -> usize {
        self.planes.len()
    }

    pub fn plane(&self, channel: usize) -> u128 {
        self.planes[channel]
    }

    pub fn planes(&self) -> &[u128] {
        &self.planes
    }

    pub fn is_set(&self, channel: usize, row: usize, col: usize) -> bool {
        self.planes[channel] >> (row * GRID_SIDE + col) & 1 == 1
    }

    /// Number of set cells in a channel.
    pub fn count(&self, channel: usize) -> u32 {
        self.planes[channel].count_ones()
    }

    /// Indices of the set bits in the flattened `channels x 81` feature
    /// vector.
    pub fn active_features(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for (c, &plane) in self.planes.iter().enumerate() {
            let mut bits = plane;
            while bits != 0 {
                let b = bits.trailing_zeros();
                out.push((c * GRID_CELLS) as u32 + b);
                bits &= bits - 1;
            }
        }
        out
    }

    /// Canonical text form: `g:` then one 21-digit hex plane per channel,
    /// separated by `.`.
    pub fn encode(&self) -> String {
        let mut s = String::with_capacity(2 + self.planes.len() * 22);
        s.push_str("g:");
        for (i, p) in self.planes.iter().enumerate() {
            if i > 0 {
                s.push('.');
            }
            s.push_str(&format!("{p:021x}"));
        }
        s
    }

    pub fn decode(text: &str) -> Option<Self> {
        let body = text.strip_prefix("g:")?;
        let planes = body
            .split('.')
            .map(|h| u128::from_str_radix(h, 16).ok().filter(|p| p >> GRID_CELLS == 0))
            .collect::<Option<Vec<_>>>()?;
        Some(Self::new(planes))
    }
}

impl PartialEq for PackedGrid {
    fn eq(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint && self.planes == other.planes
    }
}

impl Eq for PackedGrid {}

impl Hash for PackedGrid {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.fingerprint);
    }
}

impl fmt::Debug for PackedGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

/// What the agent sees at one step.
#[derive(Clone, Debug, PartialEq)]
pub enum Observation {
    /// Stacked binary planes of a gridworld.
    Grid(PackedGrid),
    /// Real-valued observation of a continuous environment.
    Point(Vec<f64>),
    /// Opaque symbolic state used by constructed datasets.
    Symbol(u32),
}

/// Default cell width when discretising continuous observations into keys.
pub const DEFAULT_KEY_CELL: f64 = 0.05;

/// Canonical hashable identity of a state.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum StateKey {
    Grid(PackedGrid),
    Cell(Box<[i64]>),
    Symbol(u32),
}

impl Observation {
    /// Key of this observation; continuous points are binned into cells of
    /// width `cell`.
    pub fn state_key(&self, cell: f64) -> StateKey {
        match self {
            Observation::Grid(g) => StateKey::Grid(g.clone()),
            Observation::Point(p) => StateKey::Cell(p.iter().map(|v| (v / cell).floor() as i64).collect()),
            Observation::Symbol(s) => StateKey::Symbol(*s),
        }
    }

    pub fn key(&self) -> StateKey {
        self.state_key(DEFAULT_KEY_CELL)
    }
}

impl StateKey {
    pub fn encode(&self) -> String {
        match self {
            StateKey::Grid(g) => g.encode(),
            StateKey::Cell(c) => {
                let parts: Vec<String> = c.iter().map(i64::to_string).collect();
                format!("c:{}", parts.join(","))
            }
            StateKey::Symbol(s) => format!("s:{s}"),
        }
    }

    pub fn decode(text: &str) -> Option<Self> {
        if text.starts_with("g:") {
            return PackedGrid::decode(text).map(StateKey::Grid);
        }
        if let Some(body) = text.strip_prefix("c:") {
            let cells = body.split(',').map(|v| v.parse().ok()).collect::<Option<Vec<i64>>>()?;
            return Some(StateKey::Cell(cells.into()));
        }
        text.strip_prefix("s:")?.parse().ok().map(StateKey::Symbol)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Continuous(_) => None,
        }
    }

    pub fn continuous(&self) -> Option<&[f64]> {
        match self {
            Action::Continuous(v) => Some(v),
            Action::Discrete(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionSpace {
    /// `n` actions indexed `0..n`.
    Discrete(usize),
    /// Real vectors of the given dimension.
    Continuous(usize),
}

impl ActionSpace {
    pub fn contains(&self, action: &Action) -> bool {
        match (self, action) {
            (ActionSpace::Discrete(n), Action::Discrete(a)) => a < n,
            (ActionSpace::Continuous(d), Action::Continuous(v)) => v.len() == *d,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn new(steps: Vec<Step>) -> Self {
        Self { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn keys(&self, cell: f64) -> impl Iterator<Item = StateKey> + '_ {
        self.steps.iter().map(move |s| s.obs.state_key(cell))
    }

    /// Concatenation of two trajectories.
    pub fn concat(&self, other: &Trajectory) -> Trajectory {
        let mut steps = self.steps.clone();
        steps.extend(other.steps.iter().cloned());
        Trajectory { steps }
    }
}

/// Provenance of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: String,
    pub experts: Vec<usize>,
    pub seed: u64,
    pub actions: ActionSpace,
}

/// Trajectories plus optional ground-truth source labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
    pub labels: Option<Vec<usize>>,
}

impl LabeledDataset {
    pub fn unlabeled(meta: DatasetMeta, trajectories: Vec<Trajectory>) -> Self {
        Self {
            meta,
            trajectories,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Same trajectories with labels removed.
    pub fn without_labels(&self) -> Self {
        Self {
            meta: self.meta.clone(),
            trajectories: self.trajectories.clone(),
            labels: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_grid_text_form_round_trips() {
        let g = PackedGrid::new(vec![0, 1 << 80, 0x1f, (1 << 81) - 1]);
        let text = g.encode();
        assert_eq!(PackedGrid::decode(&text), Some(g.clone()));
        assert_eq!(StateKey::decode(&text), Some(StateKey::Grid(g)));
    }

    #[test]
    fn active_features_index_channels() {
        let g = PackedGrid::new(vec![0b10, 1 << 5]);
        assert_eq!(g.active_features(), vec![1, 81 + 5]);
        assert!(g.is_set(1, 0, 5));
    }

    #[test]
    fn point_keys_bin_by_cell() {
        let o = Observation::Point(vec![0.12, -0.01]);
        assert_eq!(o.state_key(0.05), StateKey::Cell(vec![2, -1].into()));
        let text = o.key().encode();
        assert_eq!(text, "c:2,-1");
        assert_eq!(StateKey::decode(&text), Some(o.key()));
    }

    #[test]
    fn malformed_keys_are_rejected() {
        assert_eq!(StateKey::decode("g:zz"), None);
        assert_eq!(StateKey::decode("x:1"), None);
        assert_eq!(StateKey::decode(&format!("g:{:x}", 1u128 << 90)), None);
    }
}
