//! Conditional action distributions `P(a | s)` and their maximum-likelihood
//! fitting (behavior cloning).

mod neural;
mod tabular;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    Action, ActionSpace, EncodeError, EncodedDataset, FeatureLayout, Observation, StateKey, StepActions, StepFeatures,
    Trajectory, DEFAULT_KEY_CELL,
};
use crate::numerics::{read_checkpoint, write_checkpoint, NumericsError, ParamSet, SparseRows, Tensor};
pub(crate) use neural::{gaussian_log_probs, select_actions};
pub use neural::{GradConfig, Head, NeuralPolicy};
pub use tabular::{TabularContexts, TabularPolicy, TabularTable};

/// Default Laplace smoothing of tabular policies.
pub const DEFAULT_EPSILON: f64 = 1.0;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("action does not belong to the policy's action space")]
    ActionSpace,
    #[error("observation does not match the policy's input layout")]
    Observation,
    #[error("family `{family}` cannot model {space:?} actions")]
    Family { family: FamilyKind, space: ActionSpace },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad policy checkpoint: {0}")]
    Checkpoint(String),
}

/// Policy family identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    Tabular,
    LinearSoftmax,
    MlpCategorical,
    LinearGaussian,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 4] = [
        FamilyKind::Tabular,
        FamilyKind::LinearSoftmax,
        FamilyKind::MlpCategorical,
        FamilyKind::LinearGaussian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Tabular => "tabular",
            FamilyKind::LinearSoftmax => "linear-softmax",
            FamilyKind::MlpCategorical => "mlp-categorical",
            FamilyKind::LinearGaussian => "linear-gaussian",
        }
    }

    /// Default family for an action space.
    pub fn default_for(space: ActionSpace) -> Self {
        match space {
            ActionSpace::Discrete(_) => FamilyKind::Tabular,
            ActionSpace::Continuous(_) => FamilyKind::LinearGaussian,
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FamilyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FamilyKind::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown policy family `{s}`"))
    }
}

/// A family together with its fitting settings.
#[derive(Clone, Debug, PartialEq)]
pub enum Family {
    Tabular { epsilon: f64, timestep: bool },
    LinearSoftmax(GradConfig),
    MlpCategorical(GradConfig),
    LinearGaussian(GradConfig),
}

impl Family {
    pub fn tabular() -> Self {
        Family::Tabular {
            epsilon: DEFAULT_EPSILON,
            timestep: false,
        }
    }

    /// Default settings of a family; the MLP gets two hidden layers of 128.
    pub fn from_kind(kind: FamilyKind) -> Self {
        match kind {
            FamilyKind::Tabular => Family::tabular(),
            FamilyKind::LinearSoftmax => Family::LinearSoftmax(GradConfig::default()),
            FamilyKind::MlpCategorical => Family::MlpCategorical(GradConfig {
                hidden: vec![128, 128],
                ..GradConfig::default()
            }),
            FamilyKind::LinearGaussian => Family::LinearGaussian(GradConfig::default()),
        }
    }

    pub fn kind(&self) -> FamilyKind {
        match self {
            Family::Tabular { .. } => FamilyKind::Tabular,
            Family::LinearSoftmax(_) => FamilyKind::LinearSoftmax,
            Family::MlpCategorical(_) => FamilyKind::MlpCategorical,
            Family::LinearGaussian(_) => FamilyKind::LinearGaussian,
        }
    }

    /// Same family with a different training seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut f = self.clone();
        match &mut f {
            Family::Tabular { .. } => {}
            Family::LinearSoftmax(c) | Family::MlpCategorical(c) | Family::LinearGaussian(c) => c.seed = seed,
        }
        f
    }

    pub fn check(&self, space: ActionSpace) -> Result<(), PolicyError> {
        let ok = matches!(
            (self, space),
            (Family::LinearGaussian(_), ActionSpace::Continuous(_))
                | (
                    Family::Tabular { .. } | Family::LinearSoftmax(_) | Family::MlpCategorical(_),
                    ActionSpace::Discrete(_)
                )
        );
        if ok {
            Ok(())
        } else {
            Err(PolicyError::Family {
                family: self.kind(),
                space,
            })
        }
    }
}

/// A fitted policy.
#[derive(Clone, Debug, PartialEq)]
pub enum PolicyModel {
    Tabular(TabularPolicy),
    Neural(NeuralPolicy),
    /// Fallback for clusters without data: uniform over discrete actions,
    /// standard normal over continuous ones.
    Uniform(ActionSpace),
}

/// Fits `family` on `trajectories`; an empty list yields
/// [`PolicyModel::Uniform`].
pub fn fit(family: &Family, trajectories: &[&Trajectory], space: ActionSpace) -> Result<PolicyModel, PolicyError> {
    family.check(space)?;
    if trajectories.iter().all(|t| t.is_empty()) {
        return Ok(PolicyModel::Uniform(space));
    }
    if let (Family::Tabular { epsilon, timestep }, ActionSpace::Discrete(n)) = (family, space) {
        for t in trajectories {
            if t.steps.iter().any(|s| !space.contains(&s.action)) {
                return Err(PolicyError::ActionSpace);
            }
        }
        return Ok(PolicyModel::Tabular(TabularPolicy::fit(
            trajectories.iter().copied(),
            n,
            *epsilon,
            *timestep,
        )));
    }
    let owned: Vec<Trajectory> = trajectories.iter().map(|t| (*t).clone()).collect();
    let data = EncodedDataset::from_trajectories(&owned, space)?;
    let members: Vec<usize> = (0..data.len()).collect();
    Ok(fit_encoded(family, &data, &members)?.0)
}

/// Fits on a subset of an encoded dataset. Also returns the per-epoch
/// training NLL of gradient families (empty for tabular fits).
pub fn fit_encoded(
    family: &Family,
    data: &EncodedDataset,
    members: &[usize],
) -> Result<(PolicyModel, Vec<f64>), PolicyError> {
    family.check(data.actions)?;
    let steps: Vec<usize> = members.iter().flat_map(|&i| data.steps_of(i)).collect();
    if steps.is_empty() {
        return Ok((PolicyModel::Uniform(data.actions), Vec::new()));
    }
    let (head, config) = match (family, data.actions) {
        (Family::Tabular { epsilon, timestep }, _) => {
            let ctx = TabularContexts::new(data, *timestep);
            let table = TabularTable::fit(data, &ctx, members, *epsilon);
            return Ok((PolicyModel::Tabular(table.to_policy(data, &ctx)), Vec::new()));
        }
        (Family::LinearSoftmax(c), ActionSpace::Discrete(n)) => (
            Head::Categorical(n),
            GradConfig {
                hidden: Vec::new(),
                ..c.clone()
            },
        ),
        (Family::MlpCategorical(c), ActionSpace::Discrete(n)) => (Head::Categorical(n), c.clone()),
        (Family::LinearGaussian(c), ActionSpace::Continuous(d)) => (
            Head::Gaussian(d),
            GradConfig {
                hidden: Vec::new(),
                ..c.clone()
            },
        ),
        _ => unreachable!("family checked against the action space"),
    };
    let mut policy = NeuralPolicy::init(head, data.layout.clone(), &config.hidden, config.min_std, config.seed);
    let x = data.features.select(&steps);
    let a = select_actions(&data.step_actions, &steps);
    let history = policy.train(&x, &a, &config)?;
    Ok((PolicyModel::Neural(policy), history))
}

fn standard_normal_log_density(v: &[f64]) -> f64 {
    v.iter()
        .map(|x| -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln())
        .sum()
}

impl PolicyModel {
    pub fn action_space(&self) -> ActionSpace {
        match self {
            PolicyModel::Tabular(t) => ActionSpace::Discrete(t.n_actions),
            PolicyModel::Neural(n) => match n.head {
                Head::Categorical(k) => ActionSpace::Discrete(k),
                Head::Gaussian(d) => ActionSpace::Continuous(d),
            },
            PolicyModel::Uniform(s) => *s,
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, PolicyModel::Uniform(_))
    }

    /// `log P(action | obs)` at timestep `t`.
    pub fn step_log_prob(&self, obs: &Observation, t: usize, action: &Action) -> Result<f64, PolicyError> {
        let space = self.action_space();
        if !space.contains(action) {
            return Err(PolicyError::ActionSpace);
        }
        match self {
            PolicyModel::Tabular(p) => Ok(p.log_prob(&obs.state_key(DEFAULT_KEY_CELL), t, action.discrete().unwrap())),
            PolicyModel::Uniform(ActionSpace::Discrete(n)) => Ok(-(*n as f64).ln()),
            PolicyModel::Uniform(ActionSpace::Continuous(_)) => {
                Ok(standard_normal_log_density(action.continuous().unwrap()))
            }
            PolicyModel::Neural(n) => {
                let x = n.layout.embed([obs]).ok_or(PolicyError::Observation)?;
                let a = match action {
                    Action::Discrete(a) => StepActions::Discrete(vec![*a]),
                    Action::Continuous(v) => StepActions::Continuous(Tensor::matrix(1, v.len(), v.clone())?),
                };
                Ok(n.step_log_probs(&x, &a)?[0])
            }
        }
    }

    /// `Σ_t log P(a_t | s_t)` over a trajectory.
    pub fn log_likelihood(&self, trajectory: &Trajectory) -> Result<f64, PolicyError> {
        if let PolicyModel::Neural(n) = self {
            if trajectory.is_empty() {
                return Ok(0.0);
            }
            let x = n
                .layout
                .embed(trajectory.steps.iter().map(|s| &s.obs))
                .ok_or(PolicyError::Observation)?;
            let a = match self.action_space() {
                ActionSpace::Discrete(_) => StepActions::Discrete(
                    trajectory
                        .steps
                        .iter()
                        .map(|s| s.action.discrete().ok_or(PolicyError::ActionSpace))
                        .collect::<Result<_, _>>()?,
                ),
                ActionSpace::Continuous(d) => {
                    let mut flat = Vec::with_capacity(trajectory.len() * d);
                    for s in &trajectory.steps {
                        match s.action.continuous() {
                            Some(v) if v.len() == d => flat.extend_from_slice(v),
                            _ => return Err(PolicyError::ActionSpace),
                        }
                    }
                    StepActions::Continuous(Tensor::matrix(trajectory.len(), d, flat)?)
                }
            };
            return Ok(n.step_log_probs(&x, &a)?.iter().sum());
        }
        trajectory
            .steps
            .iter()
            .enumerate()
            .map(|(t, s)| self.step_log_prob(&s.obs, t, &s.action))
            .sum()
    }

    /// Log-likelihood of every trajectory of an encoded dataset.
    pub fn log_likelihoods(&self, data: &EncodedDataset) -> Result<Vec<f64>, PolicyError> {
        if self.action_space() != data.actions {
            return Err(PolicyError::ActionSpace);
        }
        let per_step: Vec<f64> = match (self, &data.step_actions) {
            (PolicyModel::Neural(n), actions) => match (&n.layout, &data.layout, &data.features) {
                (a, b, x) if a == b => n.step_log_probs(x, actions)?,
                (FeatureLayout::Symbol(w), FeatureLayout::Symbol(_), StepFeatures::Sparse(rows)) => {
                    let rows = rows
                        .rows
                        .iter()
                        .map(|r| r.iter().copied().filter(|&i| (i as usize) < *w).collect())
                        .collect();
                    let x = StepFeatures::Sparse(std::sync::Arc::new(SparseRows { width: *w, rows }));
                    n.step_log_probs(&x, actions)?
                }
                _ => return Err(PolicyError::Observation),
            },
            (PolicyModel::Uniform(ActionSpace::Discrete(k)), _) => vec![-(*k as f64).ln(); data.total_steps()],
            (PolicyModel::Uniform(ActionSpace::Continuous(_)), StepActions::Continuous(a)) => {
                (0..a.rows()).map(|r| standard_normal_log_density(a.row(r))).collect()
            }
            (PolicyModel::Tabular(p), StepActions::Discrete(a)) => data
                .state_ids
                .iter()
                .zip(&data.times)
                .zip(a)
                .map(|((&s, &t), &act)| p.log_prob(&data.keys[s as usize], t as usize, act))
                .collect(),
            _ => return Err(PolicyError::ActionSpace),
        };
        Ok(data
            .segments
            .iter()
            .map(|seg| per_step[seg.clone()].iter().sum())
            .collect())
    }

    /// Draws an action from `P(· | obs)`.
    pub fn sample_action<R: Rng>(&self, obs: &Observation, t: usize, rng: &mut R) -> Result<Action, PolicyError> {
        Ok(match self {
            PolicyModel::Tabular(p) => Action::Discrete(p.sample(&obs.state_key(DEFAULT_KEY_CELL), t, rng)),
            PolicyModel::Uniform(ActionSpace::Discrete(n)) => Action::Discrete(rng.random_range(0..*n)),
            PolicyModel::Uniform(ActionSpace::Continuous(d)) => {
                Action::Continuous((0..*d).map(|_| StandardNormal.sample(rng)).collect())
            }
            PolicyModel::Neural(n) => {
                let x = n.layout.embed([obs]).ok_or(PolicyError::Observation)?;
                let v = n.sample(&x, rng)?;
                match n.head {
                    Head::Categorical(_) => Action::Discrete(v[0] as usize),
                    Head::Gaussian(_) => Action::Continuous(v),
                }
            }
        })
    }

    /// Checkpoint records: a `meta` record describing the model, then the
    /// parameters (network weights, or per-state action counts).
    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let space_code = |s: ActionSpace| match s {
            ActionSpace::Discrete(n) => [0.0, n as f64],
            ActionSpace::Continuous(d) => [1.0, d as f64],
        };
        match self {
            PolicyModel::Uniform(s) => {
                let [k, n] = space_code(*s);
                vec![("meta:uniform".into(), Tensor::vector(vec![k, n]))]
            }
            PolicyModel::Tabular(p) => {
                let mut out = vec![(
                    "meta:tabular".to_string(),
                    Tensor::vector(vec![p.n_actions as f64, p.epsilon, f64::from(u8::from(p.timestep))]),
                )];
                let mut rows: Vec<(String, Tensor)> = p
                    .counts
                    .iter()
                    .map(|((key, t), c)| (format!("count:{t}:{}", key.encode()), Tensor::vector(c.clone())))
                    .collect();
                rows.sort_by(|a, b| a.0.cmp(&b.0));
                out.extend(rows);
                out
            }
            PolicyModel::Neural(n) => {
                let (head_kind, outputs) = match n.head {
                    Head::Categorical(k) => (0.0, k),
                    Head::Gaussian(d) => (1.0, d),
                };
                let (layout_kind, width) = match n.layout {
                    FeatureLayout::Grid(w) => (0.0, w),
                    FeatureLayout::Symbol(w) => (1.0, w),
                    FeatureLayout::Point(w) => (2.0, w),
                };
                let mut meta = vec![head_kind, outputs as f64, layout_kind, width as f64, n.min_std];
                meta.extend(n.hidden.iter().map(|&h| h as f64));
                let mut out = vec![("meta:neural".to_string(), Tensor::vector(meta))];
                out.extend(n.params.records().into_iter().map(|(k, v)| (format!("param:{k}"), v)));
                out
            }
        }
    }

    pub fn from_records(records: Vec<(String, Tensor)>) -> Result<Self, PolicyError> {
        let bad = |m: &str| PolicyError::Checkpoint(m.to_string());
        let mut it = records.into_iter();
        let (name, meta) = it.next().ok_or_else(|| bad("no records"))?;
        let m = meta.data();
        let space = |k: f64, n: f64| {
            if k == 0.0 {
                ActionSpace::Discrete(n as usize)
            } else {
                ActionSpace::Continuous(n as usize)
            }
        };
        match name.as_str() {
            "meta:uniform" if m.len() == 2 => Ok(PolicyModel::Uniform(space(m[0], m[1]))),
            "meta:tabular" if m.len() == 3 => {
                let mut p = TabularPolicy::empty(m[0] as usize, m[1], m[2] != 0.0);
                for (name, counts) in it {
                    let rest = name
                        .strip_prefix("count:")
                        .ok_or_else(|| bad("expected count record"))?;
                    let (t, key) = rest.split_once(':').ok_or_else(|| bad("malformed count record"))?;
                    let t: u16 = t.parse().map_err(|_| bad("malformed timestep"))?;
                    let key = StateKey::decode(key).ok_or_else(|| bad("malformed state key"))?;
                    if counts.len() != p.n_actions || counts.data().iter().any(|&c| c < 0.0) {
                        return Err(bad("count row does not match the action count"));
                    }
                    p.counts.insert((key, t), counts.into_data());
                }
                Ok(PolicyModel::Tabular(p))
            }
            "meta:neural" if m.len() >= 5 => {
                let head = if m[0] == 0.0 {
                    Head::Categorical(m[1] as usize)
                } else {
                    Head::Gaussian(m[1] as usize)
                };
                let width = m[3] as usize;
                let layout = match m[2] as u8 {
                    0 => FeatureLayout::Grid(width),
                    1 => FeatureLayout::Symbol(width),
                    _ => FeatureLayout::Point(width),
                };
                let hidden: Vec<usize> = m[5..].iter().map(|&h| h as usize).collect();
                let mut params = Vec::new();
                for (name, t) in it {
                    let key = name
                        .strip_prefix("param:")
                        .ok_or_else(|| bad("expected param record"))?;
                    params.push((key.to_string(), t));
                }
                let template = NeuralPolicy::init(head, layout.clone(), &hidden, m[4], 0);
                let loaded = ParamSet::from_records(params);
                if loaded.names() != template.params.names()
                    || loaded
                        .tensors()
                        .iter()
                        .zip(template.params.tensors())
                        .any(|(a, b)| a.shape() != b.shape())
                {
                    return Err(bad("parameter names or shapes do not match the architecture"));
                }
                Ok(PolicyModel::Neural(NeuralPolicy {
                    head,
                    layout,
                    hidden,
                    min_std: m[4],
                    params: loaded,
                }))
            }
            _ => Err(bad("unknown or malformed meta record")),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(file, &self.to_records())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_records(read_checkpoint(file)?)
    }
}
