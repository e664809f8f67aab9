//! Trajectory datasets: generation from experts, the line-delimited file
//! format, and label hiding for clustering runs.

mod encoded;
mod types;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{episode_rng, rollout, EnvError, EnvId, Noise};
pub use encoded::*;
pub use types::*;

/// Format tag written in every dataset header.
pub const FORMAT_VERSION: &str = "trajclust-v1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("episodes per expert must be at least 1")]
    NoEpisodes,
    #[error("no experts given")]
    NoExperts,
    #[error("dataset file is empty")]
    MissingHeader,
    #[error("line 1: bad header: {0}")]
    Header(String),
    #[error("unsupported dataset format `{0}`, expected `{FORMAT_VERSION}`")]
    Version(String),
    #[error("line {line} (record {index}): {message}")]
    Record { line: usize, index: usize, message: String },
    #[error("dataset has no labels")]
    Unlabeled,
}

/// Generates `episodes_per_expert` episodes for each listed expert under
/// the default dynamics noise. Labels are positions in `experts`.
pub fn generate(
    env: EnvId,
    experts: &[usize],
    episodes_per_expert: usize,
    seed: u64,
) -> Result<LabeledDataset, DatasetError> {
    generate_with_noise(env, experts, episodes_per_expert, seed, Noise::default())
}

pub fn generate_with_noise(
    env: EnvId,
    experts: &[usize],
    episodes_per_expert: usize,
    seed: u64,
    noise: Noise,
) -> Result<LabeledDataset, DatasetError> {
    if experts.is_empty() {
        return Err(DatasetError::NoExperts);
    }
    if episodes_per_expert == 0 {
        return Err(DatasetError::NoEpisodes);
    }
    let count = env.expert_count();
    if let Some(&expert) = experts.iter().find(|&&e| e >= count) {
        return Err(EnvError::UnknownExpert { env, expert, count }.into());
    }
    let jobs: Vec<(usize, usize, usize)> = experts
        .iter()
        .enumerate()
        .flat_map(|(label, &expert)| (0..episodes_per_expert).map(move |ep| (label, expert, ep)))
        .collect();
    let trajectories = jobs
        .par_iter()
        .map(|&(_, expert, ep)| {
            let mut rng = episode_rng(seed, env, expert, ep as u64);
            rollout(env, expert, noise, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LabeledDataset {
        meta: DatasetMeta {
            env: env.name().to_string(),
            experts: experts.to_vec(),
            seed,
            actions: env.action_space(),
        },
        trajectories,
        labels: Some(jobs.iter().map(|j| j.0).collect()),
    })
}

/// Randomly permutes the trajectories and removes the labels, returning
/// them separately in the new order. `None` keeps the original order.
pub fn shuffle_and_strip(
    dataset: &LabeledDataset,
    seed: Option<u64>,
) -> Result<(LabeledDataset, Vec<usize>), DatasetError> {
    let labels = dataset.labels.as_ref().ok_or(DatasetError::Unlabeled)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let trajectories = order.iter().map(|&i| dataset.trajectories[i].clone()).collect();
    let hidden = order.iter().map(|&i| labels[i]).collect();
    Ok((LabeledDataset::unlabeled(dataset.meta.clone(), trajectories), hidden))
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    #[serde(flatten)]
    meta: DatasetMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StepRecord {
    Discrete(String, usize, f64),
    Continuous(String, Vec<f64>, f64, Vec<f64>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    label: Option<usize>,
    steps: Vec<StepRecord>,
}

fn step_record(step: &Step) -> StepRecord {
    let key = step.obs.key().encode();
    match &step.action {
        Action::Discrete(a) => StepRecord::Discrete(key, *a, step.reward),
        Action::Continuous(v) => {
            let obs = match &step.obs {
                Observation::Point(p) => p.clone(),
                _ => Vec::new(),
            };
            StepRecord::Continuous(key, v.clone(), step.reward, obs)
        }
    }
}

fn parse_step(rec: StepRecord) -> Result<Step, String> {
    match rec {
        StepRecord::Discrete(key, a, reward) => {
            let obs = match StateKey::decode(&key) {
                Some(StateKey::Grid(g)) => Observation::Grid(g),
                Some(StateKey::Symbol(s)) => Observation::Symbol(s),
                _ => return Err(format!("malformed state key `{key}`")),
            };
            Ok(Step {
                obs,
                action: Action::Discrete(a),
                reward,
            })
        }
        StepRecord::Continuous(key, action, reward, obs) => {
            let obs = Observation::Point(obs);
            if obs.key().encode() != key {
                return Err(format!("state key `{key}` does not match its observation"));
            }
            Ok(Step {
                obs,
                action: Action::Continuous(action),
                reward,
            })
        }
    }
}

/// Writes the header line and one record per trajectory.
pub fn write_dataset<W: Write>(dataset: &LabeledDataset, mut out: W) -> Result<(), DatasetError> {
    let header = Header {
        format: FORMAT_VERSION.to_string(),
        meta: dataset.meta.clone(),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for (i, traj) in dataset.trajectories.iter().enumerate() {
        let record = Record {
            label: dataset.labels.as_ref().map(|l| l[i]),
            steps: traj.steps.iter().map(step_record).collect(),
        };
        serde_json::to_writer(&mut out, &record).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<LabeledDataset, DatasetError> {
    let mut lines = BufReader::new(input).lines();
    let first = lines.next().ok_or(DatasetError::MissingHeader)??;
    let raw: serde_json::Value = serde_json::from_str(&first).map_err(|e| DatasetError::Header(e.to_string()))?;
    match raw.get("format").and_then(|f| f.as_str()) {
        Some(FORMAT_VERSION) => {}
        Some(other) => return Err(DatasetError::Version(other.to_string())),
        None => return Err(DatasetError::Header("missing `format` field".into())),
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| DatasetError::Header(e.to_string()))?;
    let meta = header.meta;

    let mut trajectories = Vec::new();
    let mut labels = Vec::new();
    let mut labeled = None;
    for (index, line) in lines.enumerate() {
        let line_no = index + 2;
        let err = |message: String| DatasetError::Record {
            line: line_no,
            index,
            message,
        };
        let line = line?;
        let record: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        match (labeled, record.label) {
            (None, l) => labeled = Some(l.is_some()),
            (Some(true), Some(_)) | (Some(false), None) => {}
            _ => return Err(err("records mix labeled and unlabeled trajectories".into())),
        }
        if let Some(l) = record.label {
            if l >= meta.experts.len().max(1) {
                return Err(err(format!(
                    "label {l} out of range for {} experts",
                    meta.experts.len()
                )));
            }
            labels.push(l);
        }
        let steps = record
            .steps
            .into_iter()
            .map(parse_step)
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        if let Some(bad) = steps.iter().find(|s| !meta.actions.contains(&s.action)) {
            return Err(err(format!("action {:?} outside the action space", bad.action)));
        }
        trajectories.push(Trajectory::new(steps));
    }
    let labels = match labeled {
        Some(true) => Some(labels),
        Some(false) => None,
        // No records: keep an empty dataset labeled so it round-trips
        // when the source was labeled.
        None => Some(Vec::new()),
    };
    Ok(LabeledDataset {
        meta,
        trajectories,
        labels,
    })
}

pub fn save(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_dataset(dataset, BufWriter::new(File::create(path)?))
}

pub fn load(path: impl AsRef<Path>) -> Result<LabeledDataset, DatasetError> {
    read_dataset(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(ds: &LabeledDataset) -> LabeledDataset {
        let mut buf = Vec::new();
        write_dataset(ds, &mut buf).unwrap();
        read_dataset(buf.as_slice()).unwrap()
    }

    #[test]
    fn balanced_labels() {
        let ds = generate(EnvId::Takeball, &[0, 1, 2, 3], 10, 7).unwrap();
        assert_eq!(ds.len(), 40);
        let labels = ds.labels.as_ref().unwrap();
        for l in 0..4 {
            assert_eq!(labels.iter().filter(|&&x| x == l).count(), 10);
        }
    }

    #[test]
    fn continuous_round_trip() {
        let ds = generate(EnvId::Pathfollowing, &[0, 1, 2], 3, 1).unwrap();
        assert_eq!(round_trip(&ds), ds);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(matches!(
            generate(EnvId::Diagonal, &[5], 1, 0),
            Err(DatasetError::Env(_))
        ));
        assert!(matches!(
            generate(EnvId::Diagonal, &[0], 0, 0),
            Err(DatasetError::NoEpisodes)
        ));
        assert!(matches!(
            generate(EnvId::Diagonal, &[], 1, 0),
            Err(DatasetError::NoExperts)
        ));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let text = r#"{"format":"trajclust-v0","env":"x","experts":[],"seed":0,"actions":{"discrete":5}}"#;
        assert!(matches!(read_dataset(text.as_bytes()), Err(DatasetError::Version(v)) if v == "trajclust-v0"));
    }

    #[test]
    fn unlabeled_shuffle_fails() {
        let ds = generate(EnvId::Diagonal, &[0], 2, 0).unwrap().without_labels();
        assert!(matches!(shuffle_and_strip(&ds, Some(1)), Err(DatasetError::Unlabeled)));
    }
}
