//! Clustering unlabeled trajectory datasets by the policy that generated them.

pub mod caae;
pub mod cli;
pub mod coloring;
pub mod dataset;
pub mod envs;
pub mod metrics;
pub mod numerics;
pub mod pgkmeans;
pub mod policies;
