//! Centroid-attracted autoencoder.
//!
//! Each trajectory is encoded into a latent vector by embedding its
//! (observation, action) steps and pooling them with learned attention. A
//! decoder reconstructs every action from the latent and the observation,
//! while a learnable codebook attracts each latent to its nearest centroid.
//! A capped separation reward keeps the centroids from collapsing together.
//! Trajectories are clustered by their nearest centroid.

use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    Action, ActionSpace, EncodeError, EncodedDataset, FeatureLayout, Observation, StepActions, StepFeatures, Trajectory,
};
use crate::numerics::{
    adam_step, read_checkpoint, write_checkpoint, AdamState, NumericsError, ParamSet, SparseRows, Tape, Tensor, Var,
    DEFAULT_LEARNING_RATE,
};
use crate::policies::{gaussian_log_probs, select_actions, Head};

pub const DEFAULT_LATENT_DIM: usize = 16;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_SEPARATION_WEIGHT: f64 = 1.0;
pub const DEFAULT_EPOCHS: usize = 50;
pub const DEFAULT_BATCH_SIZE: usize = 64;

/// Trajectories encoded per forward pass when embedding a whole dataset.
const EMBED_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum CaaeError {
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset has no trajectories")]
    EmptyDataset,
    #[error("trajectory {0} has no steps")]
    EmptyTrajectory(usize),
    #[error("input does not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaaeConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    /// The first layer reads the latent and the observation together.
    pub decoder_hidden: Vec<usize>,
    /// Weight of the attraction term.
    pub alpha: f64,
    /// Weight of the centroid separation term; 0 disables it.
    pub separation_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Floor added to the standard deviation of continuous actions.
    pub min_std: f64,
    /// Standard deviation of the initial centroids.
    pub codebook_scale: f64,
    /// After each epoch, give centroids that own no trajectory half of the
    /// most spread-out cluster.
    pub revive_dead_centroids: bool,
    /// For this many initial epochs, replace the codebook at the end of the
    /// epoch by k-means centres of the latents.
    pub reseed_epochs: usize,
}

impl Default for CaaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: DEFAULT_LATENT_DIM,
            encoder_hidden: vec![128, 128],
            decoder_hidden: vec![128, 32, 32],
            alpha: DEFAULT_ALPHA,
            separation_weight: DEFAULT_SEPARATION_WEIGHT,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            min_std: 1e-3,
            codebook_scale: 1.0,
            revive_dead_centroids: true,
            reseed_epochs: 10,
        }
    }
}

impl CaaeConfig {
    fn check(&self) -> Result<(), CaaeError> {
        let bad = |m: &str| Err(CaaeError::Config(m.into()));
        if self.latent_dim == 0 {
            return bad("latent dimension must be positive");
        }
        if self.encoder_hidden.is_empty() || self.decoder_hidden.is_empty() {
            return bad("encoder and decoder need at least one hidden layer");
        }
        if self.encoder_hidden.contains(&0) || self.decoder_hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(self.alpha >= 0.0 && self.separation_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.min_std >= 0.0 && self.codebook_scale.is_finite()) {
            return bad("learning rate, minimum std and codebook scale must be valid");
        }
        Ok(())
    }
}

/// Loss terms of one batch. `attraction` and `separation` are unweighted;
/// `total` applies the model's weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Negative log-likelihood of the actions.
    pub reconstruction: f64,
    /// Sum over trajectories of the squared distance to the nearest centroid.
    pub attraction: f64,
    /// `-(1/m²) Σ_{i,j} min(1, ‖μ_i − μ_j‖²)` over ordered centroid pairs.
    pub separation: f64,
    pub total: f64,
}

/// Loss terms accumulated over one training epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub reconstruction: f64,
    pub attraction: f64,
    /// Value at the end of the epoch.
    pub separation: f64,
    pub total: f64,
}

/// Latent code of one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEmbedding {
    pub index: usize,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaaeModel {
    pub head: Head,
    pub layout: FeatureLayout,
    pub k: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub alpha: f64,
    pub separation_weight: f64,
    pub min_std: f64,
    pub params: ParamSet,
}

/// Steps of several trajectories, laid out contiguously.
struct Batch {
    encoder_input: StepFeatures,
    observations: StepFeatures,
    actions: StepActions,
    segments: Arc<Vec<Range<usize>>>,
    owner: Arc<Vec<usize>>,
}

struct LossVars {
    latents: Var,
    total: Var,
    reconstruction: Var,
    attraction: Var,
    separation: Var,
}

fn head_for(actions: ActionSpace) -> Head {
    match actions {
        ActionSpace::Discrete(n) => Head::Categorical(n),
        ActionSpace::Continuous(d) => Head::Gaussian(d),
    }
}

fn linear_in(tape: &mut Tape, x: &StepFeatures, w: Var) -> Result<Var, NumericsError> {
    match x {
        StepFeatures::Sparse(s) => tape.sparse_matmul(Arc::clone(s), w),
        StepFeatures::Dense(t) => {
            let input = tape.constant(t.clone());
            tape.matmul(input, w)
        }
    }
}

/// Observation features followed by the action (one-hot when discrete).
fn encoder_input(obs: &StepFeatures, actions: &StepActions, action_width: usize) -> StepFeatures {
    let obs_width = obs.width();
    if let (StepFeatures::Sparse(s), StepActions::Discrete(a)) = (obs, actions) {
        let rows = s
            .rows
            .iter()
            .zip(a)
            .map(|(r, &a)| {
                let mut r = r.clone();
                r.push((obs_width + a) as u32);
                r
            })
            .collect();
        return StepFeatures::Sparse(Arc::new(SparseRows {
            width: obs_width + action_width,
            rows,
        }));
    }
    let n = match actions {
        StepActions::Discrete(a) => a.len(),
        StepActions::Continuous(t) => t.rows(),
    };
    let width = obs_width + action_width;
    let mut data = vec![0.0; n * width];
    for r in 0..n {
        let row = &mut data[r * width..(r + 1) * width];
        match obs {
            StepFeatures::Sparse(s) => s.rows[r].iter().for_each(|&i| row[i as usize] = 1.0),
            StepFeatures::Dense(t) => row[..obs_width].copy_from_slice(t.row(r)),
        }
        match actions {
            StepActions::Discrete(a) => row[obs_width + a[r]] = 1.0,
            StepActions::Continuous(t) => row[obs_width..].copy_from_slice(t.row(r)),
        }
    }
    StepFeatures::Dense(Tensor::matrix(n, width, data).expect("sized above"))
}

/// Index of the nearest row of `codebook` for each row of `latents`; ties
/// go to the lowest index.
pub fn nearest_centroid(latents: &Tensor, codebook: &Tensor) -> Vec<usize> {
    (0..latents.rows())
        .map(|i| {
            let z = latents.row(i);
            let mut best = (0, f64::INFINITY);
            for j in 0..codebook.rows() {
                let d: f64 = z.iter().zip(codebook.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

/// `-(1/m²) Σ_{i,j} min(1, ‖μ_i − μ_j‖²)` over all ordered pairs.
pub fn separation_term(codebook: &Tensor) -> f64 {
    let m = codebook.rows();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            let d: f64 = codebook
                .row(i)
                .iter()
                .zip(codebook.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += d.min(1.0);
        }
    }
    -total / (m * m) as f64
}

impl CaaeModel {
    pub fn init(
        layout: FeatureLayout,
        actions: ActionSpace,
        k: usize,
        config: &CaaeConfig,
        seed: u64,
    ) -> Result<Self, CaaeError> {
        if k == 0 {
            return Err(CaaeError::ZeroClusters);
        }
        config.check()?;
        let head = head_for(actions);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let dz = config.latent_dim;
        let mut width = layout.width() + head.outputs();
        for (l, &h) in config.encoder_hidden.iter().enumerate() {
            params.push_glorot(&format!("enc_w{l}"), width, h, &mut rng);
            params.push_zeros(&format!("enc_b{l}"), &[1, h]);
            width = h;
        }
        params.push_glorot("att_w", width, 1, &mut rng);
        params.push_glorot("z_w", width, dz, &mut rng);
        params.push_zeros("z_b", &[1, dz]);
        let first = config.decoder_hidden[0];
        params.push_glorot("dec_wz", dz, first, &mut rng);
        params.push_glorot("dec_wx", layout.width(), first, &mut rng);
        params.push_zeros("dec_b0", &[1, first]);
        let mut width = first;
        for (l, &h) in config.decoder_hidden.iter().enumerate().skip(1) {
            params.push_glorot(&format!("dec_w{l}"), width, h, &mut rng);
            params.push_zeros(&format!("dec_b{l}"), &[1, h]);
            width = h;
        }
        params.push_glorot("out_w", width, head.outputs(), &mut rng);
        params.push_zeros("out_b", &[1, head.outputs()]);
        if let Head::Gaussian(d) = head {
            params.push_zeros("log_std", &[1, d]);
        }
        let centroids = (0..k * dz)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                e * config.codebook_scale
            })
            .collect();
        params.push("codebook", Tensor::matrix(k, dz, centroids)?);
        Ok(Self {
            head,
            layout,
            k,
            latent_dim: dz,
            encoder_hidden: config.encoder_hidden.clone(),
            decoder_hidden: config.decoder_hidden.clone(),
            alpha: config.alpha,
            separation_weight: config.separation_weight,
            min_std: config.min_std,
            params,
        })
    }

    pub fn action_space(&self) -> ActionSpace {
        match self.head {
            Head::Categorical(n) => ActionSpace::Discrete(n),
            Head::Gaussian(d) => ActionSpace::Continuous(d),
        }
    }

    fn slot(&self, name: &str) -> usize {
        self.params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))
    }

    pub fn codebook(&self) -> &Tensor {
        self.params.get(self.slot("codebook"))
    }

    pub fn codebook_mut(&mut self) -> &mut Tensor {
        let ix = self.slot("codebook");
        self.params.get_mut(ix)
    }

    /// Current value of the separation term.
    pub fn separation(&self) -> f64 {
        separation_term(self.codebook())
    }

    fn check_data(&self, data: &EncodedDataset) -> Result<(), CaaeError> {
        if data.actions != self.action_space() {
            return Err(CaaeError::Mismatch(format!(
                "actions {:?}, model expects {:?}",
                data.actions,
                self.action_space()
            )));
        }
        let fits = match (&data.layout, &self.layout) {
            (FeatureLayout::Symbol(a), FeatureLayout::Symbol(b)) => a <= b,
            (a, b) => a == b,
        };
        if !fits {
            return Err(CaaeError::Mismatch(format!(
                "layout {:?}, model expects {:?}",
                data.layout, self.layout
            )));
        }
        Ok(())
    }

    fn batch(&self, data: &EncodedDataset, trajectories: &[usize]) -> Result<Batch, CaaeError> {
        let mut steps = Vec::new();
        let mut segments = Vec::with_capacity(trajectories.len());
        let mut owner = Vec::new();
        for (b, &i) in trajectories.iter().enumerate() {
            let range = data.steps_of(i);
            if range.is_empty() {
                return Err(CaaeError::EmptyTrajectory(i));
            }
            let start = steps.len();
            owner.extend(std::iter::repeat_n(b, range.len()));
            steps.extend(range);
            segments.push(start..steps.len());
        }
        let observations = match data.features.select(&steps) {
            // Symbol datasets may index fewer symbols than the model knows.
            StepFeatures::Sparse(s) => StepFeatures::Sparse(Arc::new(SparseRows {
                width: self.layout.width(),
                rows: Arc::try_unwrap(s).map_or_else(|s| s.rows.clone(), |s| s.rows),
            })),
            dense => dense,
        };
        let actions = select_actions(&data.step_actions, &steps);
        Ok(self.assemble(observations, actions, segments, owner))
    }

    fn assemble(
        &self,
        observations: StepFeatures,
        actions: StepActions,
        segments: Vec<Range<usize>>,
        owner: Vec<usize>,
    ) -> Batch {
        Batch {
            encoder_input: encoder_input(&observations, &actions, self.head.outputs()),
            observations,
            actions,
            segments: Arc::new(segments),
            owner: Arc::new(owner),
        }
    }

    fn trajectory_batch(&self, trajectory: &Trajectory) -> Result<Batch, CaaeError> {
        if trajectory.is_empty() {
            return Err(CaaeError::EmptyTrajectory(0));
        }
        let observations = self
            .layout
            .embed(trajectory.steps.iter().map(|s| &s.obs))
            .ok_or_else(|| CaaeError::Mismatch("observation does not fit the model layout".into()))?;
        let actions = self.step_actions(trajectory.steps.iter().map(|s| &s.action))?;
        let n = trajectory.len();
        Ok(self.assemble(observations, actions, std::iter::once(0..n).collect(), vec![0; n]))
    }

    fn step_actions<'a>(&self, actions: impl Iterator<Item = &'a Action>) -> Result<StepActions, CaaeError> {
        let space = self.action_space();
        let actions: Vec<&Action> = actions.collect();
        if let Some(bad) = actions.iter().find(|a| !space.contains(a)) {
            return Err(CaaeError::Mismatch(format!("action {bad:?} outside {space:?}")));
        }
        Ok(match space {
            ActionSpace::Discrete(_) => StepActions::Discrete(actions.iter().filter_map(|a| a.discrete()).collect()),
            ActionSpace::Continuous(d) => {
                let data = actions
                    .iter()
                    .filter_map(|a| a.continuous())
                    .flatten()
                    .copied()
                    .collect();
                StepActions::Continuous(Tensor::matrix(actions.len(), d, data)?)
            }
        })
    }

    fn encode_var(&self, tape: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Var, NumericsError> {
        let mut h: Option<Var> = None;
        for l in 0..self.encoder_hidden.len() {
            let (w, b) = (
                vars[self.slot(&format!("enc_w{l}"))],
                vars[self.slot(&format!("enc_b{l}"))],
            );
            let pre = match h {
                None => linear_in(tape, &batch.encoder_input, w)?,
                Some(prev) => tape.matmul(prev, w)?,
            };
            let pre = tape.add_row(pre, b)?;
            h = Some(tape.relu(pre));
        }
        let h = h.expect("checked non-empty encoder");
        let scores = tape.matmul(h, vars[self.slot("att_w")])?;
        let weights = tape.segment_softmax(scores, Arc::clone(&batch.segments))?;
        let pooled = tape.segment_weighted_sum(weights, h, Arc::clone(&batch.segments))?;
        let z = tape.matmul(pooled, vars[self.slot("z_w")])?;
        tape.add_row(z, vars[self.slot("z_b")])
    }

    /// Per-step action log-likelihoods, `steps x 1`.
    fn decode_var(&self, tape: &mut Tape, vars: &[Var], z: Var, batch: &Batch) -> Result<Var, CaaeError> {
        let from_z = tape.matmul(z, vars[self.slot("dec_wz")])?;
        let from_z = tape.gather_rows(from_z, Arc::clone(&batch.owner))?;
        let from_x = linear_in(tape, &batch.observations, vars[self.slot("dec_wx")])?;
        let pre = tape.add(from_z, from_x)?;
        let pre = tape.add_row(pre, vars[self.slot("dec_b0")])?;
        let mut h = tape.relu(pre);
        for l in 1..self.decoder_hidden.len() {
            let pre = tape.matmul(h, vars[self.slot(&format!("dec_w{l}"))])?;
            let pre = tape.add_row(pre, vars[self.slot(&format!("dec_b{l}"))])?;
            h = tape.relu(pre);
        }
        let out = tape.matmul(h, vars[self.slot("out_w")])?;
        let out = tape.add_row(out, vars[self.slot("out_b")])?;
        match (&batch.actions, self.head) {
            (StepActions::Discrete(a), Head::Categorical(_)) => {
                let lp = tape.log_softmax(out);
                Ok(tape.pick(lp, Arc::new(a.clone()))?)
            }
            (StepActions::Continuous(a), Head::Gaussian(_)) => Ok(gaussian_log_probs(
                tape,
                out,
                vars[self.slot("log_std")],
                a,
                self.min_std,
            )?),
            _ => Err(CaaeError::Mismatch("action kind differs from the decoder head".into())),
        }
    }

    fn loss_vars(&self, tape: &mut Tape, vars: &[Var], batch: &Batch) -> Result<LossVars, CaaeError> {
        let z = self.encode_var(tape, vars, batch)?;
        let lp = self.decode_var(tape, vars, z, batch)?;
        let ll = tape.sum(lp);
        let reconstruction = tape.scale(ll, -1.0);
        let mu = vars[self.slot("codebook")];
        let dist = tape.sq_dist(z, mu)?;
        let nearest = tape.row_min(dist);
        let attraction = tape.sum(nearest);
        let spread = tape.sq_dist(mu, mu)?;
        let capped = tape.clamp_max(spread, 1.0);
        let capped = tape.sum(capped);
        let separation = tape.scale(capped, -1.0 / (self.k * self.k) as f64);
        let weighted_attraction = tape.scale(attraction, self.alpha);
        let weighted_separation = tape.scale(separation, self.separation_weight);
        let partial = tape.add(reconstruction, weighted_attraction)?;
        let total = tape.add(partial, weighted_separation)?;
        Ok(LossVars {
            latents: z,
            total,
            reconstruction,
            attraction,
            separation,
        })
    }

    fn parts(tape: &Tape, v: &LossVars) -> LossParts {
        LossParts {
            reconstruction: tape.value(v.reconstruction).item(),
            attraction: tape.value(v.attraction).item(),
            separation: tape.value(v.separation).item(),
            total: tape.value(v.total).item(),
        }
    }

    /// Loss on the listed trajectories of `data`.
    pub fn loss(&self, data: &EncodedDataset, trajectories: &[usize]) -> Result<LossParts, CaaeError> {
        self.check_data(data)?;
        if trajectories.is_empty() {
            return Err(CaaeError::EmptyDataset);
        }
        let batch = self.batch(data, trajectories)?;
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let v = self.loss_vars(&mut tape, &vars, &batch)?;
        Ok(Self::parts(&tape, &v))
    }

    /// Loss plus its gradient with respect to every parameter, in the order
    /// of `self.params`.
    pub fn loss_and_gradients(
        &self,
        data: &EncodedDataset,
        trajectories: &[usize],
    ) -> Result<(LossParts, Vec<Tensor>), CaaeError> {
        self.training_step(data, trajectories)
            .map(|(parts, grads, _)| (parts, grads))
    }

    /// Loss, gradients and the batch latents.
    fn training_step(
        &self,
        data: &EncodedDataset,
        trajectories: &[usize],
    ) -> Result<(LossParts, Vec<Tensor>, Tensor), CaaeError> {
        self.check_data(data)?;
        if trajectories.is_empty() {
            return Err(CaaeError::EmptyDataset);
        }
        let batch = self.batch(data, trajectories)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let v = self.loss_vars(&mut tape, &vars, &batch)?;
        let parts = Self::parts(&tape, &v);
        let latents = tape.value(v.latents).clone();
        let mut grads = tape.backward(v.total)?;
        let grads = vars
            .iter()
            .zip(self.params.tensors())
            .map(|(var, p)| grads.take_or_zeros(*var, p.shape()))
            .collect();
        Ok((parts, grads, latents))
    }

    fn latents(&self, batch: &Batch) -> Result<Tensor, CaaeError> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let z = self.encode_var(&mut tape, &vars, batch)?;
        Ok(tape.value(z).clone())
    }

    /// Latent code of one trajectory.
    pub fn encode(&self, trajectory: &Trajectory) -> Result<Vec<f64>, CaaeError> {
        Ok(self.latents(&self.trajectory_batch(trajectory)?)?.into_data())
    }

    /// Latent codes of every trajectory, `N x latent_dim`.
    pub fn encode_dataset(&self, data: &EncodedDataset) -> Result<Tensor, CaaeError> {
        self.check_data(data)?;
        let mut out = Vec::with_capacity(data.len() * self.latent_dim);
        let all: Vec<usize> = (0..data.len()).collect();
        for chunk in all.chunks(EMBED_CHUNK) {
            out.extend(self.latents(&self.batch(data, chunk)?)?.into_data());
        }
        Ok(Tensor::matrix(data.len(), self.latent_dim, out)?)
    }

    pub fn embeddings(&self, data: &EncodedDataset) -> Result<Vec<LatentEmbedding>, CaaeError> {
        let z = self.encode_dataset(data)?;
        Ok((0..z.rows())
            .map(|index| LatentEmbedding {
                index,
                z: z.row(index).to_vec(),
            })
            .collect())
    }

    /// `log P(action | z, observation)` under the decoder.
    pub fn decode_logprob(&self, z: &[f64], obs: &Observation, action: &Action) -> Result<f64, CaaeError> {
        if z.len() != self.latent_dim {
            return Err(CaaeError::Mismatch(format!(
                "latent of length {}, expected {}",
                z.len(),
                self.latent_dim
            )));
        }
        let observations = self
            .layout
            .embed(std::iter::once(obs))
            .ok_or_else(|| CaaeError::Mismatch("observation does not fit the model layout".into()))?;
        let actions = self.step_actions(std::iter::once(action))?;
        let batch = self.assemble(observations, actions, std::iter::once(0..1).collect(), vec![0]);
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let z = tape.constant(Tensor::matrix(1, self.latent_dim, z.to_vec())?);
        let lp = self.decode_var(&mut tape, &vars, z, &batch)?;
        Ok(tape.value(lp).item())
    }

    /// Nearest-centroid cluster of every trajectory.
    pub fn assign(&self, data: &EncodedDataset) -> Result<Vec<usize>, CaaeError> {
        Ok(nearest_centroid(&self.encode_dataset(data)?, self.codebook()))
    }

    /// Scales the encoder's output map and the codebook by `lambda` and the
    /// decoder's latent input weights by `1/lambda`. Reconstruction is
    /// unchanged while every latent-to-centroid distance shrinks by `lambda`.
    pub fn rescaled(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        for name in ["z_w", "z_b", "codebook"] {
            let ix = out.slot(name);
            out.params.get_mut(ix).scale_in_place(lambda);
        }
        let ix = out.slot("dec_wz");
        out.params.get_mut(ix).scale_in_place(1.0 / lambda);
        out
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let (head_kind, head_n) = match self.head {
            Head::Categorical(n) => (0.0, n),
            Head::Gaussian(d) => (1.0, d),
        };
        let (layout_kind, width) = match self.layout {
            FeatureLayout::Grid(w) => (0.0, w),
            FeatureLayout::Symbol(w) => (1.0, w),
            FeatureLayout::Point(w) => (2.0, w),
        };
        let mut meta = vec![
            head_kind,
            head_n as f64,
            layout_kind,
            width as f64,
            self.k as f64,
            self.latent_dim as f64,
            self.alpha,
            self.separation_weight,
            self.min_std,
            self.encoder_hidden.len() as f64,
        ];
        meta.extend(self.encoder_hidden.iter().map(|&h| h as f64));
        meta.push(self.decoder_hidden.len() as f64);
        meta.extend(self.decoder_hidden.iter().map(|&h| h as f64));
        let mut out = vec![("meta:caae".to_string(), Tensor::vector(meta))];
        out.extend(
            self.params
                .records()
                .into_iter()
                .map(|(k, v)| (format!("param:{k}"), v)),
        );
        out
    }

    pub fn from_records(records: Vec<(String, Tensor)>) -> Result<Self, CaaeError> {
        let bad = |m: &str| CaaeError::Checkpoint(m.to_string());
        let mut it = records.into_iter();
        let (name, meta) = it.next().ok_or_else(|| bad("no records"))?;
        if name != "meta:caae" {
            return Err(bad("not an autoencoder checkpoint"));
        }
        let m = meta.data();
        let mut cursor = m.iter().copied();
        let mut next = || cursor.next().ok_or_else(|| bad("truncated metadata"));
        let head = match next()? {
            0.0 => Head::Categorical(next()? as usize),
            _ => Head::Gaussian(next()? as usize),
        };
        let layout = match (next()? as u8, next()? as usize) {
            (0, w) => FeatureLayout::Grid(w),
            (1, w) => FeatureLayout::Symbol(w),
            (_, w) => FeatureLayout::Point(w),
        };
        let (k, latent_dim) = (next()? as usize, next()? as usize);
        let (alpha, separation_weight, min_std) = (next()?, next()?, next()?);
        let n_enc = next()? as usize;
        let encoder_hidden = (0..n_enc)
            .map(|_| next().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n_dec = next()? as usize;
        let decoder_hidden = (0..n_dec)
            .map(|_| next().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let params = it
            .map(|(name, t)| {
                name.strip_prefix("param:")
                    .map(|n| (n.to_string(), t))
                    .ok_or_else(|| bad("expected parameter record"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let model = Self {
            head,
            layout,
            k,
            latent_dim,
            encoder_hidden,
            decoder_hidden,
            alpha,
            separation_weight,
            min_std,
            params: ParamSet::from_records(params),
        };
        // Shapes must match a freshly initialised model of the same architecture.
        let config = CaaeConfig {
            latent_dim,
            encoder_hidden: model.encoder_hidden.clone(),
            decoder_hidden: model.decoder_hidden.clone(),
            alpha,
            separation_weight,
            min_std,
            ..CaaeConfig::default()
        };
        let template = Self::init(model.layout.clone(), model.action_space(), k, &config, 0)
            .map_err(|e| bad(&format!("invalid architecture: {e}")))?;
        let same = template.params.names() == model.params.names()
            && template
                .params
                .tensors()
                .iter()
                .zip(model.params.tensors())
                .all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(bad("parameters do not match the architecture"));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CaaeError> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(file, &self.to_records())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CaaeError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_records(read_checkpoint(file)?)
    }
}

/// Trains a model with `k` centroids by minibatch Adam. Returns the model
/// and one log record per epoch.
pub fn train(
    data: &EncodedDataset,
    k: usize,
    config: &CaaeConfig,
    seed: u64,
) -> Result<(CaaeModel, Vec<EpochLog>), CaaeError> {
    train_with(data, k, config, seed, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    data: &EncodedDataset,
    k: usize,
    config: &CaaeConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(CaaeModel, Vec<EpochLog>), CaaeError> {
    if data.is_empty() {
        return Err(CaaeError::EmptyDataset);
    }
    if let Some(i) = (0..data.len()).find(|&i| data.steps_of(i).is_empty()) {
        return Err(CaaeError::EmptyTrajectory(i));
    }
    let mut model = CaaeModel::init(data.layout.clone(), data.actions, k, config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00ca_aef0_0d5e_ed00);
    let mut state = AdamState::new(model.params.tensors());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let dz = model.latent_dim;
    let mut latents = Tensor::zeros(&[data.len(), dz]);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut reconstruction, mut attraction) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let (parts, grads, z) = model.training_step(data, chunk)?;
            reconstruction += parts.reconstruction;
            attraction += parts.attraction;
            for (r, &i) in chunk.iter().enumerate() {
                latents.row_mut(i).copy_from_slice(z.row(r));
            }
            adam_step(model.params.tensors_mut(), &grads, &mut state, config.learning_rate)?;
        }
        if epoch < config.reseed_epochs {
            let points: Vec<Vec<f64>> = (0..latents.rows()).map(|i| latents.row(i).to_vec()).collect();
            if let Ok(km) = crate::metrics::kmeans(&points, k, seed ^ epoch as u64) {
                let flat: Vec<f64> = km.centers.concat();
                model.codebook_mut().data_mut().copy_from_slice(&flat);
            }
        }
        if config.revive_dead_centroids {
            revive_dead_centroids(model.codebook_mut(), &latents);
        }
        let separation = model.separation();
        let entry = EpochLog {
            epoch,
            reconstruction,
            attraction,
            separation,
            total: reconstruction + model.alpha * attraction + model.separation_weight * separation,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((model, log))
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gives every centroid that is nearest to no latent a share of the most
/// spread-out cluster: that cluster is split by a few 2-means iterations,
/// seeded with its centroid and its farthest member, and the two halves'
/// means become the old and the revived centroid. Returns the revived
/// centroid indices.
pub fn revive_dead_centroids(codebook: &mut Tensor, latents: &Tensor) -> Vec<usize> {
    const SPLIT_ITERS: usize = 10;
    let mut labels = nearest_centroid(latents, codebook);
    let mut revived = Vec::new();
    for dead in 0..codebook.rows() {
        if labels.contains(&dead) {
            continue;
        }
        let mut spread = vec![0.0; codebook.rows()];
        for (i, &c) in labels.iter().enumerate() {
            spread[c] += sq(latents.row(i), codebook.row(c));
        }
        let (victim, worst) = spread
            .iter()
            .enumerate()
            .fold((0, 0.0), |best, (c, &v)| if v > best.1 { (c, v) } else { best });
        if worst <= 0.0 {
            break;
        }
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == victim).collect();
        let far = *members
            .iter()
            .max_by(|&&a, &&b| {
                let (da, db) = (
                    sq(latents.row(a), codebook.row(victim)),
                    sq(latents.row(b), codebook.row(victim)),
                );
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("a spread cluster has members");
        let mut centers = [codebook.row(victim).to_vec(), latents.row(far).to_vec()];
        let mut side = vec![0usize; members.len()];
        for _ in 0..SPLIT_ITERS {
            for (s, &i) in side.iter_mut().zip(&members) {
                let z = latents.row(i);
                *s = usize::from(sq(z, &centers[1]) < sq(z, &centers[0]));
            }
            for (h, center) in centers.iter_mut().enumerate() {
                let picked: Vec<usize> = members
                    .iter()
                    .zip(&side)
                    .filter(|(_, &s)| s == h)
                    .map(|(&i, _)| i)
                    .collect();
                if picked.is_empty() {
                    continue;
                }
                center.iter_mut().for_each(|v| *v = 0.0);
                for &i in &picked {
                    center
                        .iter_mut()
                        .zip(latents.row(i))
                        .for_each(|(c, z)| *c += z / picked.len() as f64);
                }
            }
        }
        codebook.row_mut(victim).copy_from_slice(&centers[0]);
        codebook.row_mut(dead).copy_from_slice(&centers[1]);
        for (&i, &s) in members.iter().zip(&side) {
            if s == 1 {
                labels[i] = dead;
            }
        }
        revived.push(dead);
    }
    revived
}
