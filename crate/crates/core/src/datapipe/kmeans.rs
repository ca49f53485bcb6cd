//! One-dimensional K-means over dense degrees.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const MAX_LLOYD_ITERS: usize = 300;

/// Level assignment of a set of dense degrees.
///
/// `centroids[l]` is the mean D of level `l`. Level 0 is the sparsest (largest D), so
/// centroids strictly decrease in D as the level rises.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityClustering {
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
}

impl DensityClustering {
    pub fn levels(&self) -> usize {
        self.centroids.len()
    }

    /// Level whose centroid is nearest to `d`; `+inf` maps to level 0.
    pub fn nearest_level(&self, d: f64) -> usize {
        nearest(&self.centroids, d)
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.levels()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn nearest(centroids: &[f64], d: f64) -> usize {
    if !d.is_finite() {
        return 0;
    }
    let mut best = 0;
    for (i, c) in centroids.iter().enumerate() {
        if (d - c).abs() < (d - centroids[best]).abs() {
            best = i;
        }
    }
    best
}

/// Within-cluster sum of squared deviations from each cluster's mean.
pub fn within_sse(values: &[f64], labels: &[usize], k: usize) -> f64 {
    let mut sum = vec![0.0; k];
    let mut n = vec![0usize; k];
    for (&v, &l) in values.iter().zip(labels) {
        sum[l] += v;
        n[l] += 1;
    }
    values
        .iter()
        .zip(labels)
        .map(|(&v, &l)| {
            let m = sum[l] / n[l] as f64;
            (v - m) * (v - m)
        })
        .sum()
}

/// Lloyd iterations from the given centroids (any order). Returns centroids and
/// labels at the assignment fixpoint, or after `max_iters`. Empty clusters keep
/// their previous centroid.
pub fn lloyd(values: &[f64], init: &[f64], max_iters: usize) -> (Vec<f64>, Vec<usize>, usize) {
    let k = init.len();
    let mut centroids = init.to_vec();
    let mut labels: Vec<usize> = values.iter().map(|&v| nearest(&centroids, v)).collect();
    let mut iters = 0;
    while iters < max_iters {
        iters += 1;
        let mut sum = vec![0.0; k];
        let mut n = vec![0usize; k];
        for (&v, &l) in values.iter().zip(&labels) {
            sum[l] += v;
            n[l] += 1;
        }
        for c in 0..k {
            if n[c] > 0 {
                centroids[c] = sum[c] / n[c] as f64;
            }
        }
        let next: Vec<usize> = values.iter().map(|&v| nearest(&centroids, v)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    (centroids, labels, iters)
}

/// Centroids at the `(i + 1/2) / k` quantiles of the sorted values.
pub fn quantile_midpoints(sorted: &[f64], k: usize) -> Vec<f64> {
    (0..k)
        .map(|i| {
            let idx = ((2 * i + 1) * sorted.len()) / (2 * k);
            sorted[idx.min(sorted.len() - 1)]
        })
        .collect()
}

/// Globally optimal contiguous partition of sorted values into `k` groups,
/// returned as group start indices.
fn optimal_partition(sorted: &[f64], k: usize) -> Vec<usize> {
    let n = sorted.len();
    let mut prefix = vec![0.0; n + 1];
    let mut prefix_sq = vec![0.0; n + 1];
    let mean = sorted.iter().sum::<f64>() / n as f64;
    for (i, &v) in sorted.iter().enumerate() {
        let c = v - mean;
        prefix[i + 1] = prefix[i] + c;
        prefix_sq[i + 1] = prefix_sq[i] + c * c;
    }
    let cost = |a: usize, b: usize| {
        let s = prefix[b] - prefix[a];
        (prefix_sq[b] - prefix_sq[a] - s * s / (b - a) as f64).max(0.0)
    };
    let mut dp = vec![vec![f64::INFINITY; n + 1]; k + 1];
    let mut arg = vec![vec![0usize; n + 1]; k + 1];
    dp[0][0] = 0.0;
    for g in 1..=k {
        for end in g..=n {
            for start in g - 1..end {
                let c = dp[g - 1][start] + cost(start, end);
                if c < dp[g][end] {
                    dp[g][end] = c;
                    arg[g][end] = start;
                }
            }
        }
    }
    let mut starts = vec![0; k];
    let mut end = n;
    for g in (1..=k).rev() {
        starts[g - 1] = arg[g][end];
        end = arg[g][end];
    }
    starts
}

/// Clusters dense degrees into `n` levels.
///
/// Lloyd's algorithm runs on the finite values from a quantile-midpoint start. The
/// exact dynamic-programming optimum over contiguous partitions is also computed and
/// refined by Lloyd; whichever fixpoint has the lower SSE is kept. `+inf` entries join
/// the sparsest level afterwards.
pub fn cluster_density_levels(ds: &[f64], n: usize) -> Result<DensityClustering> {
    if n == 0 {
        return invalid("need at least one density level");
    }
    let finite: Vec<f64> = ds.iter().copied().filter(|d| d.is_finite()).collect();
    if ds.iter().any(|d| d.is_nan()) {
        return invalid("dense degree is NaN");
    }
    let mut sorted = finite.clone();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < n {
        return invalid(format!(
            "{} distinct finite dense degrees cannot form {n} levels",
            distinct.len()
        ));
    }

    let (c1, l1, iters) = lloyd(&finite, &quantile_midpoints(&sorted, n), MAX_LLOYD_ITERS);
    let mut best = (within_sse(&finite, &l1, n), c1);
    log::debug!("k-means: lloyd converged in {iters} iterations, sse {}", best.0);
    if n > 1 {
        let starts = optimal_partition(&sorted, n);
        let init: Vec<f64> = (0..n)
            .map(|g| {
                let end = starts.get(g + 1).copied().unwrap_or(sorted.len());
                sorted[starts[g]..end].iter().sum::<f64>() / (end - starts[g]) as f64
            })
            .collect();
        let (c2, l2, _) = lloyd(&finite, &init, MAX_LLOYD_ITERS);
        let sse = within_sse(&finite, &l2, n);
        if sse < best.0 * (1.0 - 1e-12) {
            log::debug!("k-means: exact partition improves sse to {sse}");
            best = (sse, c2);
        }
    }

    // Relabel: level 0 has the largest centroid.
    let mut centroids = best.1;
    centroids.sort_by(|a, b| b.total_cmp(a));
    let assignments = ds.iter().map(|&d| nearest(&centroids, d)).collect();
    Ok(DensityClustering { centroids, assignments })
}
