//! Cluster-separation statistics for latent exports.

use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use rand::seq::SliceRandom;

use crate::rng::RngStream;

/// Row-major `n × n` Euclidean distance matrix.
pub fn pairwise_distances(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            let s = s.sqrt();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Mean silhouette coefficient given a distance matrix; points in singleton clusters score 0.
pub fn silhouette_from_distances(dist: &[f64], labels: &[usize]) -> f64 {
    let n = labels.len();
    assert_eq!(dist.len(), n * n);
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|c| **c > 0).count() < 2 {
        return 0.0;
    }
    let mut sums = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            sums[labels[j]] += dist[i * n + j];
        }
        let own = labels[i];
        if counts[own] < 2 {
            continue;
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k).filter(|&c| c != own && counts[c] > 0).map(|c| sums[c] / counts[c] as f64).fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    silhouette_from_distances(&pairwise_distances(points), labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PermutationTest {
    pub observed: f64,
    /// Largest silhouette among the label permutations.
    pub null_max: f64,
    pub null_mean: f64,
    /// `(1 + #{null ≥ observed}) / (1 + permutations)`.
    pub p_value: f64,
}

/// Compares the silhouette of `labels` with that of random relabelings.
pub fn silhouette_permutation_test(
    points: &[Vec<f64>],
    labels: &[usize],
    permutations: usize,
    rng: &mut RngStream,
) -> PermutationTest {
    let dist = pairwise_distances(points);
    let observed = silhouette_from_distances(&dist, labels);
    let mut shuffled = labels.to_vec();
    let mut hits = 0;
    let mut null_max = f64::NEG_INFINITY;
    let mut null_sum = 0.0;
    for _ in 0..permutations {
        shuffled.shuffle(rng);
        let s = silhouette_from_distances(&dist, &shuffled);
        if s >= observed {
            hits += 1;
        }
        null_max = null_max.max(s);
        null_sum += s;
    }
    PermutationTest {
        observed,
        null_max,
        null_mean: null_sum / permutations.max(1) as f64,
        p_value: (1 + hits) as f64 / (1 + permutations) as f64,
    }
}
