use rand::Rng;
use rustc_hash::FxHashMap;

use crate::dataset::{EncodedDataset, StateKey, StepActions, Trajectory, DEFAULT_KEY_CELL};

/// Smoothed count tables keyed by state (and optionally timestep).
///
/// `P(a | s) = (c(s, a) + ε) / (c(s) + |A| ε)`; states without counts get
/// the uniform distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    pub n_actions: usize,
    pub epsilon: f64,
    pub timestep: bool,
    pub counts: FxHashMap<(StateKey, u16), Vec<f64>>,
}

impl TabularPolicy {
    pub fn empty(n_actions: usize, epsilon: f64, timestep: bool) -> Self {
        Self {
            n_actions,
            epsilon,
            timestep,
            counts: FxHashMap::default(),
        }
    }

    pub fn fit<'a>(
        trajectories: impl IntoIterator<Item = &'a Trajectory>,
        n_actions: usize,
        epsilon: f64,
        timestep: bool,
    ) -> Self {
        let mut policy = Self::empty(n_actions, epsilon, timestep);
        for traj in trajectories {
            for (t, step) in traj.steps.iter().enumerate() {
                if let Some(a) = step.action.discrete() {
                    let key = (step.obs.state_key(DEFAULT_KEY_CELL), policy.time_slot(t));
                    policy.counts.entry(key).or_insert_with(|| vec![0.0; n_actions])[a] += 1.0;
                }
            }
        }
        policy
    }

    pub fn time_slot(&self, t: usize) -> u16 {
        if self.timestep {
            t.min(u16::MAX as usize) as u16
        } else {
            0
        }
    }

    /// Action distribution at a state.
    pub fn probs(&self, key: &StateKey, t: usize) -> Vec<f64> {
        smoothed(
            self.counts.get(&(key.clone(), self.time_slot(t))).map(Vec::as_slice),
            self.n_actions,
            self.epsilon,
        )
    }

    pub fn log_prob(&self, key: &StateKey, t: usize, action: usize) -> f64 {
        let counts = self.counts.get(&(key.clone(), self.time_slot(t)));
        log_prob_from_counts(counts.map(Vec::as_slice), self.n_actions, self.epsilon, action)
    }

    pub fn sample<R: Rng>(&self, key: &StateKey, t: usize, rng: &mut R) -> usize {
        let probs = self.probs(key, t);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        // Rounding can leave `acc` a hair below 1.
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

fn smoothed(counts: Option<&[f64]>, n_actions: usize, epsilon: f64) -> Vec<f64> {
    let uniform = vec![1.0 / n_actions as f64; n_actions];
    let Some(c) = counts else { return uniform };
    let total: f64 = c.iter().sum::<f64>() + n_actions as f64 * epsilon;
    if total <= 0.0 {
        return uniform;
    }
    c.iter().map(|v| (v + epsilon) / total).collect()
}

fn log_prob_from_counts(counts: Option<&[f64]>, n_actions: usize, epsilon: f64, action: usize) -> f64 {
    match counts {
        Some(c) => {
            let total: f64 = c.iter().sum::<f64>() + n_actions as f64 * epsilon;
            if total <= 0.0 {
                -(n_actions as f64).ln()
            } else {
                ((c[action] + epsilon) / total).ln()
            }
        }
        None => -(n_actions as f64).ln(),
    }
}

/// Tabular policy over the dense context ids of an [`EncodedDataset`]; the
/// fast path used inside clustering loops.
#[derive(Clone, Debug)]
pub struct TabularTable {
    pub n_actions: usize,
    pub epsilon: f64,
    /// `contexts x n_actions` counts.
    pub counts: Vec<f64>,
    /// `contexts x n_actions` log-probabilities.
    pub log_probs: Vec<f64>,
}

/// Context assignment of every step of an encoded dataset.
#[derive(Clone, Debug)]
pub struct TabularContexts {
    pub timestep: bool,
    pub step_context: Vec<u32>,
    /// `(state id, timestep)` of each context.
    pub table: Vec<(u32, u16)>,
}

impl TabularContexts {
    pub fn new(data: &EncodedDataset, timestep: bool) -> Self {
        let (step_context, table) = data.contexts(timestep);
        Self {
            timestep,
            step_context,
            table,
        }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl TabularTable {
    /// Fits on the given trajectories (indices into `data`).
    pub fn fit(data: &EncodedDataset, ctx: &TabularContexts, members: &[usize], epsilon: f64) -> Self {
        let StepActions::Discrete(actions) = &data.step_actions else {
            panic!("tabular policies need discrete actions");
        };
        let n_actions = match data.actions {
            crate::dataset::ActionSpace::Discrete(n) => n,
            crate::dataset::ActionSpace::Continuous(_) => unreachable!(),
        };
        let mut counts = vec![0.0; ctx.len() * n_actions];
        for &i in members {
            for s in data.steps_of(i) {
                counts[ctx.step_context[s] as usize * n_actions + actions[s]] += 1.0;
            }
        }
        let mut log_probs = vec![0.0; counts.len()];
        for (c, lp) in counts
            .chunks(n_actions.max(1))
            .zip(log_probs.chunks_mut(n_actions.max(1)))
        {
            let seen = c.iter().any(|&v| v > 0.0);
            for (a, out) in lp.iter_mut().enumerate() {
                *out = log_prob_from_counts(seen.then_some(c), n_actions, epsilon, a);
            }
        }
        Self {
            n_actions,
            epsilon,
            counts,
            log_probs,
        }
    }

    pub fn trajectory_log_likelihood(&self, data: &EncodedDataset, ctx: &TabularContexts, i: usize) -> f64 {
        let StepActions::Discrete(actions) = &data.step_actions else {
            return f64::NAN;
        };
        data.steps_of(i)
            .map(|s| self.log_probs[ctx.step_context[s] as usize * self.n_actions + actions[s]])
            .sum()
    }

    /// Log density of the symmetric Dirichlet(1 + ε) prior over every
    /// context's distribution, up to a constant: `ε Σ log P`. Adding it to
    /// the likelihood gives the objective the smoothed fit maximizes.
    pub fn log_prior(&self) -> f64 {
        if self.epsilon == 0.0 {
            return 0.0;
        }
        self.epsilon * self.log_probs.iter().sum::<f64>()
    }

    /// Keyed copy of the table, dropping contexts without counts.
    pub fn to_policy(&self, data: &EncodedDataset, ctx: &TabularContexts) -> TabularPolicy {
        let mut policy = TabularPolicy::empty(self.n_actions, self.epsilon, ctx.timestep);
        for (c, &(state, t)) in ctx.table.iter().enumerate() {
            let row = &self.counts[c * self.n_actions..(c + 1) * self.n_actions];
            if row.iter().any(|&v| v > 0.0) {
                policy
                    .counts
                    .insert((data.keys[state as usize].clone(), t), row.to_vec());
            }
        }
        policy
    }
}
