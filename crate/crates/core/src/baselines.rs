//! Comparison labellers: Lloyd's K-means with k-means++ seeding, and the
//! unconstrained argmax relabelling that degenerates without a balance constraint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::matrix::FeatureMatrix;
use crate::metrics::Labeling;
use crate::ot::{HardAssignment, LogPredictionMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansState {
    /// `K x D` centroids.
    pub centroids: FeatureMatrix,
    pub assignments: Labeling,
    /// `(1/N) sum_i ||x_i - mu_{y_i}||^2`.
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after seeding and after every Lloyd iteration.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (lowest index on ties) and its squared distance, per point.
fn assign(x: &FeatureMatrix, centroids: &FeatureMatrix) -> Vec<(usize, f64)> {
    (0..x.rows())
        .into_par_iter()
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for c in 0..centroids.rows() {
                let d = sq_dist(x.row(i), centroids.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .collect()
}

fn inertia_of(assigned: &[(usize, f64)]) -> f64 {
    assigned.iter().map(|a| a.1).sum::<f64>() / assigned.len() as f64
}

/// Greedy k-means++: each new centre is the best of `2 + ln K` candidates
/// drawn with probability proportional to the squared distance.
fn kmeans_plus_plus(x: &FeatureMatrix, k: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    let n = x.rows();
    let trials = 2 + (k as f64).ln() as usize;
    let mut centroids = FeatureMatrix::zeros(k, x.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(x.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let mut best: Option<(f64, Vec<f64>, usize)> = None;
        for _ in 0..trials {
            let pick = if total > 0.0 {
                let target = rng.random::<f64>() * total;
                let mut acc = 0.0;
                dist.iter()
                    .position(|d| {
                        acc += d;
                        acc > target
                    })
                    .unwrap_or(n - 1)
            } else {
                rng.random_range(0..n)
            };
            let candidate: Vec<f64> = (0..n).map(|i| dist[i].min(sq_dist(x.row(i), x.row(pick)))).collect();
            let potential: f64 = candidate.iter().sum();
            if best.as_ref().map_or(true, |b| potential < b.0) {
                best = Some((potential, candidate, pick));
            }
        }
        let (_, next, pick) = best.expect("at least two trials");
        centroids.row_mut(c).copy_from_slice(x.row(pick));
        dist = next;
    }
    centroids
}

/// Lloyd iterations from k-means++ seeding until the inertia improves by
/// less than `tol` or `max_iter` iterations have run. An empty cluster is
/// re-seeded at the point farthest from its current centroid.
pub fn kmeans(x: &FeatureMatrix, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansState> {
    let n = x.rows();
    if k == 0 {
        return Err(invalid("K must be positive"));
    }
    if n < k {
        return Err(invalid(format!("K-means needs N >= K, got N = {n}, K = {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(x, k, &mut rng);
    let mut assigned = assign(x, &centroids);
    let mut inertia = inertia_of(&assigned);
    let mut trace = vec![inertia];
    let mut iterations = 0;
    let d = x.cols();
    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assigned.iter().enumerate() {
            counts[c] += 1;
            sums[c * d..(c + 1) * d]
                .iter_mut()
                .zip(x.row(i))
                .for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centroids
                    .row_mut(c)
                    .iter_mut()
                    .zip(&sums[c * d..(c + 1) * d])
                    .for_each(|(m, s)| *m = s * inv);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| assigned[a].1.total_cmp(&assigned[b].1).then(b.cmp(&a)))
                    .unwrap();
                centroids.row_mut(c).copy_from_slice(x.row(far));
                assigned[far] = (c, 0.0);
            }
        }
        assigned = assign(x, &centroids);
        let next = inertia_of(&assigned);
        trace.push(next);
        let improvement = inertia - next;
        inertia = next;
        if improvement < tol {
            break;
        }
    }
    let labels = assigned.iter().map(|a| a.0).collect();
    Ok(KMeansState {
        centroids,
        assignments: Labeling::new(labels, k)?,
        inertia,
        iterations,
        inertia_trace: trace,
    })
}

/// Argmax relabelling with no balance constraint.
pub fn unconstrained_self_label(log_p: &LogPredictionMatrix) -> HardAssignment {
    let labels = (0..log_p.points()).map(|i| log_p.argmax(i)).collect();
    HardAssignment::new(labels, log_p.classes()).expect("argmax labels are in range")
}
