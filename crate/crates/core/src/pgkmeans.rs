//! Hard-EM clustering of trajectories around behavior-cloned center
//! policies, with best-of-N restarts and over-clustering followed by merging.
//!
//! The objective is `J(W, θ) = Σ_i Σ_t log P(a_{i,t} | θ_{c(i)}, s_{i,t})`.
//! The M-step fits one policy per cluster; the E-step moves every trajectory
//! to the policy that explains it best.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{EncodedDataset, StepActions};
use crate::policies::{fit_encoded, Family, PolicyError, PolicyModel, TabularContexts, TabularTable};

pub const DEFAULT_MAX_ITERS: usize = 50;

#[derive(Debug, Error)]
pub enum PgkError {
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("max iterations must be at least 1")]
    ZeroIterations,
    #[error("best-of-n needs n >= 1")]
    ZeroRuns,
    #[error("cannot merge {current} clusters down to {target}")]
    MergeTarget { current: usize, target: usize },
    #[error("assignment has {got} entries for {expected} trajectories")]
    AssignmentLength { got: usize, expected: usize },
    #[error("cluster id {id} out of range for {k} clusters")]
    ClusterId { id: usize, k: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// How the initial assignment is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// Every trajectory gets a uniformly random cluster.
    #[default]
    Uniform,
    /// Seed trajectories are picked one at a time, favouring those the
    /// existing seed policies explain worst; everything is then assigned to
    /// the best seed policy.
    LikelihoodSpread,
}

/// Pair-selection rule of the merge phase, over the cross-likelihood
/// `Σ_{τ ∈ D_j} log P(τ | θ_i)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeRule {
    /// Merge the pair whose cross-likelihood is highest.
    #[default]
    MostCompatible,
    /// Merge the pair whose cross-likelihood is lowest.
    LeastCompatible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PgkConfig {
    pub k: usize,
    pub k_star: Option<usize>,
    pub max_iters: usize,
    pub family: Family,
    pub init: Init,
    pub merge_rule: MergeRule,
    pub seed: u64,
}

impl PgkConfig {
    pub fn new(k: usize, family: Family) -> Self {
        Self {
            k,
            k_star: None,
            max_iters: DEFAULT_MAX_ITERS,
            family,
            init: Init::Uniform,
            merge_rule: MergeRule::MostCompatible,
            seed: 0,
        }
    }
}

/// Outcome of one clustering run.
#[derive(Clone, Debug)]
pub struct PgkRun {
    pub seed: u64,
    /// Assignment entering each iteration's M-step.
    pub assignment_history: Vec<Vec<usize>>,
    /// `J(W^{t-1}, θ^t)` after each M-step.
    pub objective_history: Vec<f64>,
    /// The same plus the smoothing prior of tabular policies (the quantity
    /// smoothed tabular EM increases); empty for other families.
    pub penalized_history: Vec<f64>,
    pub iterations: usize,
    /// Whether the assignment stopped changing before the iteration cap.
    pub converged: bool,
    /// Final assignment, after merging when requested.
    pub assignment: Vec<usize>,
    pub policies: Vec<PolicyModel>,
    /// `J` of the final assignment and policies.
    pub objective: f64,
}

impl PgkRun {
    pub fn k(&self) -> usize {
        self.policies.len()
    }
}

/// Cluster policies in the form the inner loop scores with.
enum Centers {
    Tables(TabularContexts, Vec<TabularTable>),
    Models(Vec<PolicyModel>),
}

impl Centers {
    fn fit(
        data: &EncodedDataset,
        family: &Family,
        members: &[Vec<usize>],
        ctx: Option<&TabularContexts>,
    ) -> Result<Self, PgkError> {
        match (family, ctx) {
            (Family::Tabular { epsilon, .. }, Some(ctx)) => {
                let tables = members
                    .par_iter()
                    .map(|m| TabularTable::fit(data, ctx, m, *epsilon))
                    .collect();
                Ok(Centers::Tables(ctx.clone(), tables))
            }
            _ => {
                let models = members
                    .par_iter()
                    .enumerate()
                    .map(|(j, m)| fit_encoded(&family.reseeded(family_seed(family, j)), data, m).map(|r| r.0))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(Centers::Models(models))
            }
        }
    }

    /// `scores[i * k + j] = log P(τ_i | θ_j)`.
    fn scores(&self, data: &EncodedDataset) -> Result<Vec<f64>, PgkError> {
        match self {
            Centers::Tables(ctx, tables) => {
                let k = tables.len();
                let mut out = vec![0.0; data.len() * k];
                out.par_chunks_mut(k.max(1)).enumerate().for_each(|(i, row)| {
                    for (j, t) in tables.iter().enumerate() {
                        row[j] = t.trajectory_log_likelihood(data, ctx, i);
                    }
                });
                Ok(out)
            }
            Centers::Models(models) => {
                let k = models.len();
                let per_model = models
                    .par_iter()
                    .map(|m| m.log_likelihoods(data))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut out = vec![0.0; data.len() * k];
                for (j, col) in per_model.iter().enumerate() {
                    for (i, v) in col.iter().enumerate() {
                        out[i * k + j] = *v;
                    }
                }
                Ok(out)
            }
        }
    }

    fn log_prior(&self) -> Option<f64> {
        match self {
            Centers::Tables(_, tables) => Some(tables.iter().map(TabularTable::log_prior).sum()),
            Centers::Models(_) => None,
        }
    }

    fn into_models(self, data: &EncodedDataset) -> Vec<PolicyModel> {
        match self {
            Centers::Tables(ctx, tables) => tables
                .iter()
                .map(|t| {
                    if t.counts.iter().all(|&c| c == 0.0) {
                        PolicyModel::Uniform(data.actions)
                    } else {
                        PolicyModel::Tabular(t.to_policy(data, &ctx))
                    }
                })
                .collect(),
            Centers::Models(m) => m,
        }
    }
}

fn family_seed(family: &Family, cluster: usize) -> u64 {
    match family {
        Family::Tabular { .. } => 0,
        Family::LinearSoftmax(c) | Family::MlpCategorical(c) | Family::LinearGaussian(c) => mix(c.seed, cluster as u64),
    }
}

fn mix(seed: u64, i: u64) -> u64 {
    let mut z = seed ^ i.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn members_of(assignment: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut m = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        m[c].push(i);
    }
    m
}

fn tabular_contexts(data: &EncodedDataset, family: &Family) -> Option<TabularContexts> {
    match (family, &data.step_actions) {
        (Family::Tabular { timestep, .. }, StepActions::Discrete(_)) => Some(TabularContexts::new(data, *timestep)),
        _ => None,
    }
}

fn validate(data: &EncodedDataset, assignment: &[usize], k: usize) -> Result<(), PgkError> {
    if assignment.len() != data.len() {
        return Err(PgkError::AssignmentLength {
            got: assignment.len(),
            expected: data.len(),
        });
    }
    if let Some(&id) = assignment.iter().find(|&&c| c >= k) {
        return Err(PgkError::ClusterId { id, k });
    }
    Ok(())
}

/// Best cluster of row `scores`; ties go to `keep` when it is among the
/// maximisers, otherwise to the lowest index.
fn best_cluster(scores: &[f64], keep: Option<usize>) -> usize {
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = j;
        }
    }
    match keep {
        Some(c) if scores[c] == scores[best] => c,
        _ => best,
    }
}

fn assign(scores: &[f64], k: usize, current: Option<&[usize]>) -> Vec<usize> {
    scores
        .chunks(k)
        .enumerate()
        .map(|(i, row)| best_cluster(row, current.map(|c| c[i])))
        .collect()
}

fn objective_from_scores(scores: &[f64], k: usize, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &c)| scores[i * k + c]).sum()
}

/// `J` of an assignment under the given policies.
pub fn objective(data: &EncodedDataset, assignment: &[usize], policies: &[PolicyModel]) -> Result<f64, PgkError> {
    validate(data, assignment, policies.len())?;
    let scores = Centers::Models(policies.to_vec()).scores(data)?;
    Ok(objective_from_scores(&scores, policies.len(), assignment))
}

/// Assigns every trajectory to its most likely policy, lowest index on ties.
pub fn e_step(data: &EncodedDataset, policies: &[PolicyModel]) -> Result<Vec<usize>, PgkError> {
    if policies.is_empty() {
        return Err(PgkError::ZeroClusters);
    }
    let scores = Centers::Models(policies.to_vec()).scores(data)?;
    Ok(assign(&scores, policies.len(), None))
}

/// Fits one policy per cluster; empty clusters get the uniform policy.
pub fn m_step(
    data: &EncodedDataset,
    assignment: &[usize],
    k: usize,
    family: &Family,
) -> Result<Vec<PolicyModel>, PgkError> {
    validate(data, assignment, k)?;
    let members = members_of(assignment, k);
    let ctx = tabular_contexts(data, family);
    Ok(Centers::fit(data, family, &members, ctx.as_ref())?.into_models(data))
}

fn initial_assignment(
    data: &EncodedDataset,
    config: &PgkConfig,
    ctx: Option<&TabularContexts>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, PgkError> {
    let n = data.len();
    match config.init {
        Init::Uniform => Ok((0..n).map(|_| rng.random_range(0..config.k)).collect()),
        Init::LikelihoodSpread => {
            if n == 0 {
                return Ok(Vec::new());
            }
            let mut seeds = vec![rng.random_range(0..n)];
            let mut best = vec![f64::NEG_INFINITY; n];
            loop {
                let last = vec![vec![*seeds.last().unwrap()]];
                let center = Centers::fit(data, &config.family, &last, ctx)?;
                for (b, s) in best.iter_mut().zip(center.scores(data)?) {
                    *b = b.max(s);
                }
                if seeds.len() == config.k {
                    break;
                }
                // Per-step average keeps long trajectories from dominating.
                let weights: Vec<f64> = best
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| {
                        let len = data.steps_of(i).len().max(1) as f64;
                        (-b / len).max(0.0)
                    })
                    .collect();
                let total: f64 = weights.iter().sum();
                let pick = if total > 0.0 && total.is_finite() {
                    let mut u = rng.random::<f64>() * total;
                    weights
                        .iter()
                        .position(|&w| {
                            if u < w {
                                true
                            } else {
                                u -= w;
                                false
                            }
                        })
                        .unwrap_or(n - 1)
                } else {
                    rng.random_range(0..n)
                };
                seeds.push(pick);
            }
            let members: Vec<Vec<usize>> = seeds.iter().map(|&s| vec![s]).collect();
            let centers = Centers::fit(data, &config.family, &members, ctx)?;
            Ok(assign(&centers.scores(data)?, config.k, None))
        }
    }
}

/// One clustering run: alternate M- and E-steps until the assignment stops
/// changing or `max_iters` M-steps have run, then merge to `k_star` if set.
pub fn run(data: &EncodedDataset, config: &PgkConfig) -> Result<PgkRun, PgkError> {
    if config.k == 0 {
        return Err(PgkError::ZeroClusters);
    }
    if config.max_iters == 0 {
        return Err(PgkError::ZeroIterations);
    }
    if let Some(target) = config.k_star {
        if target > config.k || target == 0 {
            return Err(PgkError::MergeTarget {
                current: config.k,
                target,
            });
        }
    }
    config.family.check(data.actions)?;
    let k = config.k;
    let ctx = tabular_contexts(data, &config.family);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut assignment = initial_assignment(data, config, ctx.as_ref(), &mut rng)?;
    let mut run = PgkRun {
        seed: config.seed,
        assignment_history: Vec::new(),
        objective_history: Vec::new(),
        penalized_history: Vec::new(),
        iterations: 0,
        converged: false,
        assignment: Vec::new(),
        policies: Vec::new(),
        objective: f64::NAN,
    };
    let mut centers;
    let mut scores;
    loop {
        centers = Centers::fit(data, &config.family, &members_of(&assignment, k), ctx.as_ref())?;
        scores = centers.scores(data)?;
        let j = objective_from_scores(&scores, k, &assignment);
        run.iterations += 1;
        run.objective_history.push(j);
        if let Some(prior) = centers.log_prior() {
            run.penalized_history.push(j + prior);
        }
        run.assignment_history.push(assignment.clone());
        let next = assign(&scores, k, Some(&assignment));
        if next == assignment {
            run.converged = true;
            break;
        }
        if run.iterations >= config.max_iters {
            break;
        }
        assignment = next;
    }
    let mut objective = objective_from_scores(&scores, k, &assignment);
    let mut policies = centers.into_models(data);
    if let Some(target) = config.k_star {
        let merged = merge(data, &assignment, policies, target, &config.family, config.merge_rule)?;
        assignment = merged.0;
        policies = merged.1;
        let kk = policies.len();
        objective = objective_from_scores(&Centers::Models(policies.clone()).scores(data)?, kk, &assignment);
    }
    run.assignment = assignment;
    run.policies = policies;
    run.objective = objective;
    Ok(run)
}

/// Merges clusters until `k_star` remain. Each round picks the pair `(i, j)`
/// by `rule` over the cross-likelihood of `D_j` under `θ_i`, folds `D_j`
/// into `D_i`, drops `θ_j`, refits `θ_i`, and renumbers the clusters above
/// `j` down by one. Empty clusters are removed before any non-empty merge.
pub fn merge(
    data: &EncodedDataset,
    assignment: &[usize],
    policies: Vec<PolicyModel>,
    k_star: usize,
    family: &Family,
    rule: MergeRule,
) -> Result<(Vec<usize>, Vec<PolicyModel>), PgkError> {
    let mut k = policies.len();
    if k_star > k || k_star == 0 {
        return Err(PgkError::MergeTarget {
            current: k,
            target: k_star,
        });
    }
    validate(data, assignment, k)?;
    let mut assignment = assignment.to_vec();
    let mut policies = policies;
    while k > k_star {
        let members = members_of(&assignment, k);
        let (keep, drop) = match members.iter().position(Vec::is_empty) {
            Some(j) => (if j == 0 { 1 } else { 0 }, j),
            None => {
                let scores = Centers::Models(policies.clone()).scores(data)?;
                let mut cross = vec![0.0; k * k];
                for (i, &c) in assignment.iter().enumerate() {
                    for p in 0..k {
                        cross[p * k + c] += scores[i * k + p];
                    }
                }
                let mut best: Option<(usize, usize)> = None;
                for i in 0..k {
                    for j in 0..k {
                        if i == j {
                            continue;
                        }
                        let v = cross[i * k + j];
                        let better = match best {
                            None => true,
                            Some((bi, bj)) => match rule {
                                MergeRule::MostCompatible => v > cross[bi * k + bj],
                                MergeRule::LeastCompatible => v < cross[bi * k + bj],
                            },
                        };
                        if better {
                            best = Some((i, j));
                        }
                    }
                }
                best.expect("k >= 2 here")
            }
        };
        for c in assignment.iter_mut() {
            if *c == drop {
                *c = keep;
            }
        }
        let merged: Vec<usize> = (0..assignment.len()).filter(|&i| assignment[i] == keep).collect();
        let ctx = tabular_contexts(data, family);
        let refit = Centers::fit(data, family, &[merged], ctx.as_ref())?.into_models(data);
        policies[keep] = refit.into_iter().next().expect("one cluster");
        policies.remove(drop);
        for c in assignment.iter_mut() {
            if *c > drop {
                *c -= 1;
            }
        }
        k -= 1;
    }
    Ok((assignment, policies))
}

/// Seed of restart `i` of a best-of-n search.
pub fn restart_seed(seed: u64, i: usize) -> u64 {
    mix(seed, i as u64 + 1)
}

/// Runs `n` independently seeded restarts and keeps the one with the
/// highest final `J` (earliest restart on ties). Restart 0 uses the
/// configured seed, so `n = 1` is the plain run.
pub fn best_of_n(data: &EncodedDataset, n: usize, config: &PgkConfig) -> Result<PgkRun, PgkError> {
    Ok(best_of_n_all(data, n, config)?.0)
}

/// Like [`best_of_n`], also returning the final `J` of every restart.
pub fn best_of_n_all(data: &EncodedDataset, n: usize, config: &PgkConfig) -> Result<(PgkRun, Vec<f64>), PgkError> {
    if n == 0 {
        return Err(PgkError::ZeroRuns);
    }
    let runs = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = if i == 0 {
                config.seed
            } else {
                restart_seed(config.seed, i)
            };
            run(data, &PgkConfig { seed, ..config.clone() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let objectives: Vec<f64> = runs.iter().map(|r| r.objective).collect();
    let mut best = 0;
    for (i, &j) in objectives.iter().enumerate() {
        if j > objectives[best] {
            best = i;
        }
    }
    Ok((runs.into_iter().nth(best).expect("n >= 1"), objectives))
}
