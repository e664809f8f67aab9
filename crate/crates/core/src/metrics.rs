//! Clustering quality (NMI), a k-means implementation for the baselines,
//! and report records.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledDataset;
use crate::numerics::Tensor;

pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("labelings must be non-empty")]
    Empty,
    #[error("k = {k} is invalid for {distinct} distinct points")]
    DegenerateK { k: usize, distinct: usize },
    #[error("points have inconsistent dimensions")]
    Ragged,
    #[error("not applicable: every trajectory has the same return")]
    NotApplicable,
    #[error("report i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("report line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Relabels so that labels are `0..m` in order of first appearance.
pub fn canonicalize(labels: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Normalized mutual information `2 I(C, L) / (H(C) + H(L))`, natural
/// logs. Two constant labelings score 1; one constant labeling against a
/// non-constant one scores 0.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    let a = canonicalize(pred);
    let b = canonicalize(truth);
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let n = a.len() as f64;
    let mut joint = vec![0usize; ka * kb];
    let mut ca = vec![0usize; ka];
    let mut cb = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(&b) {
        joint[x * kb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let entropy = |counts: &[usize]| -> f64 {
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let (ha, hb) = (entropy(&ca), entropy(&cb));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (ca[x] as f64 * cb[y] as f64)).ln();
            }
        }
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// Result of [`kmeans`].
#[derive(Clone, Debug, PartialEq)]
pub struct KmeansResult {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    /// Within-cluster sum of squares of the returned clustering.
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            d2.iter()
                .position(|&w| {
                    if u < w {
                        true
                    } else {
                        u -= w;
                        false
                    }
                })
                .unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap_or(0))
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().unwrap()));
        }
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> KmeansResult {
    let dim = points[0].len();
    let mut labels = vec![0; points.len()];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut inertia = 0.0;
        for (l, p) in labels.iter_mut().zip(points) {
            let (j, d) = nearest(p, &centers);
            *l = j;
            inertia += d;
        }
        history.push(inertia);
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut moved = false;
        for (j, c) in centers.iter_mut().enumerate() {
            if counts[j] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            if next != *c {
                moved = true;
                *c = next;
            }
        }
        if !moved {
            break;
        }
    }
    let inertia = *history.last().unwrap_or(&0.0);
    KmeansResult {
        labels,
        centers,
        inertia,
        inertia_history: history,
    }
}

/// Lloyd's algorithm with k-means++ seeding; the best of
/// [`KMEANS_RESTARTS`] restarts by inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KmeansResult, MetricsError> {
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return Err(MetricsError::Ragged);
    }
    let mut distinct: Vec<&Vec<f64>> = points.iter().collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    if k == 0 || k > distinct.len() {
        return Err(MetricsError::DegenerateK {
            k,
            distinct: distinct.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KmeansResult> = None;
    for _ in 0..KMEANS_RESTARTS {
        let init = kmeans_pp(points, k, &mut rng);
        let r = lloyd(points, init);
        if best.as_ref().is_none_or(|b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Clusters trajectories by their scalar episode return.
pub fn return_kmeans_baseline(dataset: &LabeledDataset, k: usize, seed: u64) -> Result<Vec<usize>, MetricsError> {
    let returns: Vec<Vec<f64>> = dataset.trajectories.iter().map(|t| vec![t.episode_return()]).collect();
    if returns.windows(2).all(|w| w[0] == w[1]) {
        return Err(MetricsError::NotApplicable);
    }
    Ok(kmeans(&returns, k, seed)?.labels)
}

/// Clusters trajectories by k-means on their latent codes, one row per
/// trajectory.
pub fn latent_kmeans_baseline(latents: &Tensor, k: usize, seed: u64) -> Result<Vec<usize>, MetricsError> {
    let points: Vec<Vec<f64>> = (0..latents.rows()).map(|i| latents.row(i).to_vec()).collect();
    Ok(kmeans(&points, k, seed)?.labels)
}

/// Summary of one clustering result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    /// Trajectory count of every cluster id up to the largest used.
    pub sizes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmi: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_curve: Vec<f64>,
}

pub fn cluster_report(
    assignment: &[usize],
    truth: Option<&[usize]>,
    objective_curve: Option<&[f64]>,
) -> Result<ClusterReport, MetricsError> {
    let mut sizes = vec![0; assignment.iter().max().map_or(0, |m| m + 1)];
    for &c in assignment {
        sizes[c] += 1;
    }
    let nmi = match truth {
        Some(t) if !t.is_empty() => Some(nmi(assignment, t)?),
        _ => None,
    };
    Ok(ClusterReport {
        sizes,
        nmi,
        objective_curve: objective_curve.map(<[f64]>::to_vec).unwrap_or_default(),
    })
}

/// One line of a report file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub run_id: String,
    pub method: String,
    pub env: String,
    pub k: usize,
    #[serde(default)]
    pub k_star: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub iterations: Option<usize>,
    /// Final objective `J` for PG-Kmeans or final training loss for CAAE.
    #[serde(default)]
    pub final_value: Option<f64>,
    #[serde(flatten)]
    pub report: ClusterReport,
}

pub fn write_reports<W: Write>(records: &[ReportRecord], mut out: W) -> Result<(), MetricsError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_reports<R: BufRead>(input: R) -> Result<Vec<ReportRecord>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MetricsError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independent_labelings_score_zero() {
        assert_eq!(nmi(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn permuted_labels_score_one() {
        assert!((nmi(&[2, 2, 0, 1], &[0, 0, 1, 5]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_entropy_conventions() {
        assert_eq!(nmi(&[3, 3, 3], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0], &[0, 1, 1]).unwrap(), 0.0);
        assert!(nmi(&[0], &[0, 1]).is_err());
        assert!(nmi(&[], &[]).is_err());
    }

    #[test]
    fn canonical_labels_follow_first_appearance() {
        assert_eq!(canonicalize(&[7, 3, 7, 9]), vec![0, 1, 0, 2]);
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let pts = vec![vec![0.0], vec![0.0], vec![1.0]];
        assert!(kmeans(&pts, 3, 0).is_err());
        assert!(kmeans(&pts, 0, 0).is_err());
        assert_eq!(kmeans(&pts, 1, 0).unwrap().labels, vec![0, 0, 0]);
    }

    #[test]
    fn latent_kmeans_separates_blobs() {
        let z = Tensor::from_rows(&[&[0.0, 0.1], &[5.0, 5.0], &[0.1, 0.0], &[5.1, 4.9]]).unwrap();
        let labels = latent_kmeans_baseline(&z, 2, 3).unwrap();
        assert_eq!(nmi(&labels, &[0, 1, 0, 1]).unwrap(), 1.0);
    }
}
