use std::ops::Range;
use std::sync::Arc;

use rustc_hash::FxHashMap;

use super::{Action, ActionSpace, LabeledDataset, Observation, StateKey, Trajectory, DEFAULT_KEY_CELL, GRID_CELLS};
use crate::numerics::{SparseRows, Tensor};

/// Model input of every step, in the same order as the flattened steps.
#[derive(Clone, Debug)]
pub enum StepFeatures {
    /// Binary features given by active indices (grid planes or symbols).
    Sparse(Arc<SparseRows>),
    /// Real-valued observations, one row per step.
    Dense(Tensor),
}

impl StepFeatures {
    pub fn width(&self) -> usize {
        match self {
            StepFeatures::Sparse(s) => s.width,
            StepFeatures::Dense(t) => t.cols(),
        }
    }

    /// Features of the selected steps, in the given order.
    pub fn select(&self, steps: &[usize]) -> StepFeatures {
        match self {
            StepFeatures::Sparse(s) => StepFeatures::Sparse(Arc::new(SparseRows {
                width: s.width,
                rows: steps.iter().map(|&i| s.rows[i].clone()).collect(),
            })),
            StepFeatures::Dense(t) => {
                let c = t.cols();
                let mut data = Vec::with_capacity(steps.len() * c);
                for &i in steps {
                    data.extend_from_slice(t.row(i));
                }
                StepFeatures::Dense(Tensor::matrix(steps.len(), c, data).expect("consistent width"))
            }
        }
    }
}

/// How observations map to model features; fixed when a model is fitted so
/// that later inputs are embedded identically.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "width")]
pub enum FeatureLayout {
    /// Grid planes flattened as `channels x 81` binary features.
    Grid(usize),
    /// Symbols one-hot encoded; unknown symbols give an all-zero row.
    Symbol(usize),
    /// Points used as they are.
    Point(usize),
}

impl FeatureLayout {
    /// Chooses a layout that covers every observation in `trajectories`.
    pub fn infer<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> Option<Self> {
        let mut layout: Option<FeatureLayout> = None;
        for step in trajectories.into_iter().flat_map(|t| &t.steps) {
            let here = match &step.obs {
                Observation::Grid(g) => FeatureLayout::Grid(g.channels() * GRID_CELLS),
                Observation::Symbol(s) => FeatureLayout::Symbol(*s as usize + 1),
                Observation::Point(p) => FeatureLayout::Point(p.len()),
            };
            layout = Some(match (layout, here) {
                (None, h) => h,
                (Some(FeatureLayout::Symbol(a)), FeatureLayout::Symbol(b)) => FeatureLayout::Symbol(a.max(b)),
                (Some(a), b) if a == b => a,
                (Some(_), _) => return None,
            });
        }
        layout
    }

    pub fn width(&self) -> usize {
        match *self {
            FeatureLayout::Grid(w) | FeatureLayout::Symbol(w) | FeatureLayout::Point(w) => w,
        }
    }

    pub fn is_sparse(&self) -> bool {
        !matches!(self, FeatureLayout::Point(_))
    }

    /// Embeds observations, rejecting any that do not fit the layout.
    pub fn embed<'a>(&self, observations: impl IntoIterator<Item = &'a Observation>) -> Option<StepFeatures> {
        let width = self.width();
        match self {
            FeatureLayout::Point(_) => {
                let mut data = Vec::new();
                let mut rows = 0;
                for obs in observations {
                    match obs {
                        Observation::Point(p) if p.len() == width => data.extend_from_slice(p),
                        _ => return None,
                    }
                    rows += 1;
                }
                Some(StepFeatures::Dense(Tensor::matrix(rows, width, data).ok()?))
            }
            FeatureLayout::Grid(_) => {
                let rows = observations
                    .into_iter()
                    .map(|obs| match obs {
                        Observation::Grid(g) if g.channels() * GRID_CELLS == width => Some(g.active_features()),
                        _ => None,
                    })
                    .collect::<Option<Vec<_>>>()?;
                Some(StepFeatures::Sparse(Arc::new(SparseRows { width, rows })))
            }
            FeatureLayout::Symbol(_) => {
                let rows = observations
                    .into_iter()
                    .map(|obs| match obs {
                        Observation::Symbol(s) if (*s as usize) < width => Some(vec![*s]),
                        Observation::Symbol(_) => Some(Vec::new()),
                        _ => None,
                    })
                    .collect::<Option<Vec<_>>>()?;
                Some(StepFeatures::Sparse(Arc::new(SparseRows { width, rows })))
            }
        }
    }
}

/// Step-level actions of a flattened dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum StepActions {
    Discrete(Vec<usize>),
    /// Row-major `steps x dim` matrix.
    Continuous(Tensor),
}

/// Flattened, index-based view of a dataset for fast repeated passes.
///
/// Steps of trajectory `i` occupy `segments[i]` in every per-step array.
#[derive(Clone, Debug)]
pub struct EncodedDataset {
    pub actions: ActionSpace,
    pub segments: Arc<Vec<Range<usize>>>,
    /// Index into `keys` of each step's state.
    pub state_ids: Vec<u32>,
    /// Timestep of each step within its trajectory.
    pub times: Vec<u16>,
    pub keys: Vec<StateKey>,
    pub step_actions: StepActions,
    pub layout: FeatureLayout,
    pub features: StepFeatures,
}

#[derive(Debug, thiserror::Error)]
pub enum EncodeError {
    #[error("observations of different kinds or sizes in one dataset")]
    MixedObservations,
    #[error("trajectory {index} has an action outside {space:?}")]
    InvalidAction { index: usize, space: ActionSpace },
}

impl EncodedDataset {
    pub fn new(dataset: &LabeledDataset) -> Result<Self, EncodeError> {
        Self::from_trajectories(&dataset.trajectories, dataset.meta.actions)
    }

    pub fn from_trajectories(trajectories: &[Trajectory], actions: ActionSpace) -> Result<Self, EncodeError> {
        let layout = FeatureLayout::infer(trajectories)
            .or_else(|| {
                trajectories
                    .iter()
                    .all(Trajectory::is_empty)
                    .then_some(FeatureLayout::Grid(0))
            })
            .ok_or(EncodeError::MixedObservations)?;
        let mut segments = Vec::with_capacity(trajectories.len());
        let mut state_ids = Vec::new();
        let mut times = Vec::new();
        let mut keys = Vec::new();
        let mut index: FxHashMap<StateKey, u32> = FxHashMap::default();
        let mut discrete = Vec::new();
        let mut continuous = Vec::new();
        for (i, traj) in trajectories.iter().enumerate() {
            let start = state_ids.len();
            for (t, step) in traj.steps.iter().enumerate() {
                if !actions.contains(&step.action) {
                    return Err(EncodeError::InvalidAction {
                        index: i,
                        space: actions,
                    });
                }
                let key = step.obs.state_key(DEFAULT_KEY_CELL);
                let next = keys.len() as u32;
                let id = *index.entry(key).or_insert_with_key(|k| {
                    keys.push(k.clone());
                    next
                });
                state_ids.push(id);
                times.push(t.min(u16::MAX as usize) as u16);
                match &step.action {
                    Action::Discrete(a) => discrete.push(*a),
                    Action::Continuous(v) => continuous.extend_from_slice(v),
                }
            }
            segments.push(start..state_ids.len());
        }
        let step_actions = match actions {
            ActionSpace::Discrete(_) => StepActions::Discrete(discrete),
            ActionSpace::Continuous(d) => {
                StepActions::Continuous(Tensor::matrix(state_ids.len(), d, continuous).expect("validated action width"))
            }
        };
        let features = layout
            .embed(trajectories.iter().flat_map(|t| t.steps.iter().map(|s| &s.obs)))
            .ok_or(EncodeError::MixedObservations)?;
        Ok(Self {
            actions,
            segments: Arc::new(segments),
            state_ids,
            times,
            keys,
            step_actions,
            layout,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.state_ids.len()
    }

    pub fn steps_of(&self, trajectory: usize) -> Range<usize> {
        self.segments[trajectory].clone()
    }

    /// Context ids per step and the `(state id, timestep)` of each context.
    /// Without `timestep` a context is just the state.
    pub fn contexts(&self, timestep: bool) -> (Vec<u32>, Vec<(u32, u16)>) {
        if !timestep {
            let table = (0..self.keys.len() as u32).map(|s| (s, 0)).collect();
            return (self.state_ids.clone(), table);
        }
        let mut index: FxHashMap<(u32, u16), u32> = FxHashMap::default();
        let mut table = Vec::new();
        let ids = self
            .state_ids
            .iter()
            .zip(&self.times)
            .map(|(&s, &t)| {
                *index.entry((s, t)).or_insert_with(|| {
                    table.push((s, t));
                    table.len() as u32 - 1
                })
            })
            .collect();
        (ids, table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Step;

    fn sym_traj(states: &[u32], actions: &[usize]) -> Trajectory {
        Trajectory::new(
            states
                .iter()
                .zip(actions)
                .map(|(&s, &a)| Step {
                    obs: Observation::Symbol(s),
                    action: Action::Discrete(a),
                    reward: 0.0,
                })
                .collect(),
        )
    }

    #[test]
    fn state_ids_are_shared_across_trajectories() {
        let trajs = vec![sym_traj(&[3, 1], &[0, 1]), sym_traj(&[1, 3, 3], &[1, 0, 0])];
        let enc = EncodedDataset::from_trajectories(&trajs, ActionSpace::Discrete(2)).unwrap();
        assert_eq!(enc.state_ids, vec![0, 1, 1, 0, 0]);
        assert_eq!(enc.steps_of(1), 2..5);
        assert_eq!(enc.layout, FeatureLayout::Symbol(4));
        let (ctx, table) = enc.contexts(true);
        assert_eq!(ctx, vec![0, 1, 2, 3, 4]);
        assert_eq!(table[2], (1, 0));
    }

    #[test]
    fn invalid_actions_are_rejected() {
        let trajs = vec![sym_traj(&[0], &[4])];
        assert!(EncodedDataset::from_trajectories(&trajs, ActionSpace::Discrete(2)).is_err());
    }

    #[test]
    fn unknown_symbols_embed_as_zero_rows() {
        let obs = [Observation::Symbol(1), Observation::Symbol(9)];
        match FeatureLayout::Symbol(3).embed(obs.iter()) {
            Some(StepFeatures::Sparse(s)) => assert_eq!(s.rows, vec![vec![1], vec![]]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
