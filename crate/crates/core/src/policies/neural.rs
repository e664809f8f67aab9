use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::PolicyError;
use crate::dataset::{FeatureLayout, StepActions, StepFeatures};
use crate::numerics::{adam_step, AdamState, Gradients, ParamSet, Tape, Tensor, Var};

/// Output distribution of a network policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Softmax over `n` logits.
    Categorical(usize),
    /// Diagonal Gaussian with state-dependent mean and a learned
    /// state-independent log standard deviation.
    Gaussian(usize),
}

impl Head {
    pub fn outputs(self) -> usize {
        match self {
            Head::Categorical(n) | Head::Gaussian(n) => n,
        }
    }
}

/// Optimisation settings of the gradient-trained families.
#[derive(Clone, Debug, PartialEq)]
pub struct GradConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
    /// Added to the learned Gaussian standard deviation.
    pub min_std: f64,
}

impl Default for GradConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            learning_rate: crate::numerics::DEFAULT_LEARNING_RATE,
            hidden: Vec::new(),
            seed: 0,
            min_std: 1e-3,
        }
    }
}

/// Feed-forward policy: ReLU hidden layers over the step features, then a
/// linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralPolicy {
    pub head: Head,
    pub layout: FeatureLayout,
    pub hidden: Vec<usize>,
    pub min_std: f64,
    pub params: ParamSet,
}

/// Outputs of one forward pass.
struct Forward {
    out: Var,
    log_std: Option<Var>,
}

impl NeuralPolicy {
    pub fn init(head: Head, layout: FeatureLayout, hidden: &[usize], min_std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut width = layout.width();
        for (l, &h) in hidden.iter().enumerate() {
            params.push_glorot(&format!("w{l}"), width, h, &mut rng);
            params.push_zeros(&format!("b{l}"), &[1, h]);
            width = h;
        }
        params.push_glorot("w_out", width, head.outputs(), &mut rng);
        params.push_zeros("b_out", &[1, head.outputs()]);
        if let Head::Gaussian(d) = head {
            params.push_zeros("log_std", &[1, d]);
        }
        Self {
            head,
            layout,
            hidden: hidden.to_vec(),
            min_std,
            params,
        }
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], x: &StepFeatures) -> Result<Forward, PolicyError> {
        let mut h: Option<Var> = None;
        let layers = self.hidden.len() + 1;
        for l in 0..layers {
            let (w, b) = (vars[2 * l], vars[2 * l + 1]);
            let z = match (h, x) {
                (Some(prev), _) => tape.matmul(prev, w)?,
                (None, StepFeatures::Sparse(s)) => tape.sparse_matmul(Arc::clone(s), w)?,
                (None, StepFeatures::Dense(t)) => {
                    let input = tape.constant(t.clone());
                    tape.matmul(input, w)?
                }
            };
            let z = tape.add_row(z, b)?;
            h = Some(if l + 1 < layers { tape.relu(z) } else { z });
        }
        let log_std = matches!(self.head, Head::Gaussian(_)).then(|| vars[2 * layers]);
        Ok(Forward {
            out: h.expect("at least one layer"),
            log_std,
        })
    }

    /// Per-step log-likelihood terms of `actions`, as an `n x 1` column.
    fn step_log_probs_var(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: &StepFeatures,
        actions: &StepActions,
    ) -> Result<Var, PolicyError> {
        let fwd = self.forward(tape, vars, x)?;
        match (self.head, actions) {
            (Head::Categorical(_), StepActions::Discrete(a)) => {
                let lp = tape.log_softmax(fwd.out);
                Ok(tape.pick(lp, Arc::new(a.clone()))?)
            }
            (Head::Gaussian(_), StepActions::Continuous(a)) => {
                let raw = fwd.log_std.expect("gaussian head");
                Ok(gaussian_log_probs(tape, fwd.out, raw, a, self.min_std)?)
            }
            _ => Err(PolicyError::ActionSpace),
        }
    }

    /// `log P(a_t | s_t)` of every step.
    pub fn step_log_probs(&self, x: &StepFeatures, actions: &StepActions) -> Result<Vec<f64>, PolicyError> {
        if step_count(x) == 0 {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let col = self.step_log_probs_var(&mut tape, &vars, x, actions)?;
        Ok(tape.value(col).data().to_vec())
    }

    /// Logits (categorical) or means (Gaussian) of every step.
    pub fn outputs(&self, x: &StepFeatures) -> Result<Tensor, PolicyError> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let fwd = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(fwd.out).clone())
    }

    pub fn stds(&self) -> Option<Vec<f64>> {
        let ix = self.params.index_of("log_std")?;
        Some(
            self.params
                .get(ix)
                .data()
                .iter()
                .map(|v| v.exp() + self.min_std)
                .collect(),
        )
    }

    /// Mean negative log-likelihood and its gradients on one batch.
    fn loss_and_grads(
        &self,
        x: &StepFeatures,
        actions: &StepActions,
    ) -> Result<(f64, Gradients, Vec<Var>), PolicyError> {
        let n = step_count(x);
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let col = self.step_log_probs_var(&mut tape, &vars, x, actions)?;
        let total = tape.sum(col);
        let loss = tape.scale(total, -1.0 / n as f64);
        let value = tape.value(loss).item();
        Ok((value, tape.backward(loss)?, vars))
    }

    /// Minibatch Adam on the negative log-likelihood. Returns the full-data
    /// mean NLL after each epoch.
    pub fn train(
        &mut self,
        x: &StepFeatures,
        actions: &StepActions,
        config: &GradConfig,
    ) -> Result<Vec<f64>, PolicyError> {
        let n = step_count(x);
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x05ee_d0fb_a7c4);
        let mut state = AdamState::new(self.params.tensors());
        let mut order: Vec<usize> = (0..n).collect();
        let mut history = Vec::with_capacity(config.epochs);
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch_size.max(1)) {
                let bx = x.select(batch);
                let ba = select_actions(actions, batch);
                let (_, mut grads, vars) = self.loss_and_grads(&bx, &ba)?;
                let grads: Vec<Tensor> = vars
                    .iter()
                    .zip(self.params.tensors())
                    .map(|(v, p)| grads.take_or_zeros(*v, p.shape()))
                    .collect();
                adam_step(self.params.tensors_mut(), &grads, &mut state, config.learning_rate)?;
            }
            let lp = self.step_log_probs(x, actions)?;
            history.push(-lp.iter().sum::<f64>() / n as f64);
        }
        Ok(history)
    }

    pub fn sample<R: Rng>(&self, x: &StepFeatures, rng: &mut R) -> Result<Vec<f64>, PolicyError> {
        let out = self.outputs(x)?;
        let row = out.row(0).to_vec();
        Ok(match self.head {
            Head::Categorical(_) => {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                vec![pick as f64]
            }
            Head::Gaussian(_) => {
                let stds = self.stds().expect("gaussian head");
                row.iter()
                    .zip(stds)
                    .map(|(m, s)| {
                        let e: f64 = StandardNormal.sample(rng);
                        m + s * e
                    })
                    .collect()
            }
        })
    }
}

/// Log-density of each row of `actions` under a diagonal Gaussian with
/// per-row means `mean` and standard deviation `exp(raw_log_std) + min_std`.
pub(crate) fn gaussian_log_probs(
    tape: &mut Tape,
    mean: Var,
    raw_log_std: Var,
    actions: &Tensor,
    min_std: f64,
) -> Result<Var, crate::numerics::NumericsError> {
    let (n, d) = (actions.rows(), actions.cols());
    let target = tape.constant(actions.clone());
    let diff = tape.sub(target, mean)?;
    let std = tape.exp(raw_log_std);
    let floor = tape.constant(Tensor::full(&[1, d], min_std));
    let std = tape.add(std, floor)?;
    let log_std = tape.log(std);
    let neg = tape.scale(log_std, -1.0);
    let inv = tape.exp(neg);
    let ones = tape.constant(Tensor::full(&[n, 1], 1.0));
    let inv_rows = tape.matmul(ones, inv)?;
    let log_std_rows = tape.matmul(ones, log_std)?;
    let z = tape.mul(diff, inv_rows)?;
    let z2 = tape.mul(z, z)?;
    let half = tape.scale(z2, -0.5);
    let per_dim = tape.sub(half, log_std_rows)?;
    let sum_dims = tape.constant(Tensor::full(&[d, 1], 1.0));
    let col = tape.matmul(per_dim, sum_dims)?;
    let shift = tape.constant(Tensor::full(&[1, 1], -0.5 * d as f64 * (2.0 * PI).ln()));
    tape.add_row(col, shift)
}

pub(crate) fn step_count(x: &StepFeatures) -> usize {
    match x {
        StepFeatures::Sparse(s) => s.rows.len(),
        StepFeatures::Dense(t) => t.rows(),
    }
}

pub(crate) fn select_actions(actions: &StepActions, steps: &[usize]) -> StepActions {
    match actions {
        StepActions::Discrete(a) => StepActions::Discrete(steps.iter().map(|&i| a[i]).collect()),
        StepActions::Continuous(t) => {
            let d = t.cols();
            let mut data = Vec::with_capacity(steps.len() * d);
            for &i in steps {
                data.extend_from_slice(t.row(i));
            }
            StepActions::Continuous(Tensor::matrix(steps.len(), d, data).expect("consistent width"))
        }
    }
}
