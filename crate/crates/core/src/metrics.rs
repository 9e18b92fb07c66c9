//! Retrieval and clustering metrics: recall@k, k-means, NMI, NMI+ and
//! class-collapse diagnostics.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{diameter, set_distance, sq_dist_rows, EmbeddingSet};
use crate::par;

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;

/// Fraction of queries whose `k` nearest neighbors (self excluded, ties by
/// index) contain a sample with the same label, for every `k` in `ks`.
pub fn recall_at_k(emb: &EmbeddingSet, labels: &[usize], ks: &[usize]) -> Result<Vec<f64>> {
    let n = emb.len();
    check_labels(n, labels)?;
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k >= n) {
        return Err(Error::invalid(format!("recall@{k} needs 1 ≤ k < n = {n}")));
    }
    // Rank of the nearest same-label neighbor (0-based), or n if none.
    let first_hit = par::map_range(n, |q| {
        let xq = emb.row(q);
        let best = (0..n)
            .filter(|&j| j != q && labels[j] == labels[q])
            .map(|j| (sq_dist_rows(xq, emb.row(j)), j))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        match best {
            None => n,
            Some((db, jb)) => (0..n)
                .filter(|&j| j != q)
                .filter(|&j| {
                    let d = sq_dist_rows(xq, emb.row(j));
                    d < db || (d == db && j < jb)
                })
                .count(),
        }
    });
    Ok(ks.iter().map(|&k| first_hit.iter().filter(|&&r| r < k).count() as f64 / n as f64).collect())
}

fn check_labels(n: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape { expected: format!("{n} labels"), actual: labels.len().to_string() });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Within-cluster sum of squares after every assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

pub fn kmeans(emb: &EmbeddingSet, k: usize, seed: u64) -> Result<Vec<usize>> {
    kmeans_detailed(emb, k, seed).map(|r| r.assignments)
}

/// Lloyd iterations from k-means++ seeding. Empty clusters are re-seeded
/// with the point farthest from its current centroid.
pub fn kmeans_detailed(emb: &EmbeddingSet, k: usize, seed: u64) -> Result<KMeansResult> {
    let n = emb.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k-means needs 1 ≤ K ≤ n = {n}, got K = {k}")));
    }
    let x = emb.coords();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::zeros((k, emb.dim()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&x.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist_rows(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist_rows(x.row(i), x.row(pick)));
        }
    }

    let mut assignments = vec![0usize; n];
    let mut inertia = Vec::new();
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITER {
        iterations += 1;
        let assigned = par::map_range(n, |i| {
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..k {
                let d = sq_dist_rows(x.row(i), centroids.row(c));
                if d < best.0 {
                    best = (d, c);
                }
            }
            best
        });
        for (a, &(_, c)) in assignments.iter_mut().zip(&assigned) {
            *a = c;
        }
        let mut dist: Vec<f64> = assigned.iter().map(|&(d, _)| d).collect();
        inertia.push(dist.iter().sum());

        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("K ≤ n leaves a cluster with two points");
                counts[assignments[far]] -= 1;
                assignments[far] = c;
                counts[c] = 1;
                dist[far] = 0.0;
            }
        }

        let mut next = Array2::<f64>::zeros(centroids.dim());
        for (i, &a) in assignments.iter().enumerate() {
            let mut row = next.row_mut(a);
            row += &x.row(i);
        }
        for c in 0..k {
            let mut row = next.row_mut(c);
            row /= counts[c] as f64;
        }
        let shift = (0..k).map(|c| sq_dist_rows(next.row(c), centroids.row(c))).fold(0.0f64, f64::max).sqrt();
        centroids = next;
        if shift <= KMEANS_TOL {
            break;
        }
    }
    Ok(KMeansResult { assignments, centroids, inertia, iterations })
}

/// Normalized mutual information with arithmetic-mean normalization and
/// natural logarithms. Two single-cluster partitions score 1; exactly one
/// single-cluster partition scores 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape { expected: format!("{} assignments", a.len()), actual: b.len().to_string() });
    }
    if a.is_empty() {
        return Err(Error::Empty("nmi needs at least one sample"));
    }
    let n = a.len() as f64;
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut joint = Array2::<f64>::zeros((ka, kb));
    for (&x, &y) in a.iter().zip(b) {
        joint[[x, y]] += 1.0;
    }
    let pa: Array1<f64> = joint.sum_axis(ndarray::Axis(1)) / n;
    let pb: Array1<f64> = joint.sum_axis(ndarray::Axis(0)) / n;
    let entropy = |p: &Array1<f64>| -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
    let (ha, hb) = (entropy(&pa), entropy(&pb));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let pxy = joint[[x, y]] / n;
            if pxy > 0.0 {
                mi += pxy * (pxy / (pa[x] * pb[y])).ln();
            }
        }
    }
    Ok((mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0))
}

fn class_count(labels: &[usize]) -> usize {
    let mut seen: Vec<usize> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// NMI between labels and k-means with `multiplier × #classes` clusters.
pub fn nmi_plus(emb: &EmbeddingSet, labels: &[usize], multiplier: usize, seed: u64) -> Result<f64> {
    check_labels(emb.len(), labels)?;
    let k = multiplier * class_count(labels);
    if multiplier == 0 || k > emb.len() {
        return Err(Error::invalid(format!("{multiplier} × classes = {k} clusters exceeds n = {}", emb.len())));
    }
    nmi(&kmeans(emb, k, seed)?, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseDiagnostics {
    /// `(label, diameter)` in ascending label order.
    pub class_diameters: Vec<(usize, f64)>,
    pub min_inter_class_distance: f64,
    /// Max class diameter over the min inter-class distance; 0 at exact
    /// collapse, infinite when two classes touch.
    pub collapse_score: f64,
}

/// Unsquared class diameters, the smallest distance between two classes, and
/// their ratio.
pub fn collapse_diagnostics(emb: &EmbeddingSet, labels: &[usize]) -> Result<CollapseDiagnostics> {
    check_labels(emb.len(), labels)?;
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::precondition("collapse diagnostics need at least two classes"));
    }
    let members: Vec<Vec<usize>> =
        classes.iter().map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect()).collect();
    let diams = par::map_slice(&members, |m| diameter(emb, m));
    let mut min_inter = f64::INFINITY;
    for a in 0..members.len() {
        for b in a + 1..members.len() {
            min_inter = min_inter.min(set_distance(emb, &members[a], &members[b]));
        }
    }
    let max_diam = diams.iter().copied().fold(0.0, f64::max);
    let collapse_score = if max_diam == 0.0 {
        0.0
    } else if min_inter == 0.0 {
        f64::INFINITY
    } else {
        max_diam / min_inter
    };
    Ok(CollapseDiagnostics {
        class_diameters: classes.into_iter().zip(diams).collect(),
        min_inter_class_distance: min_inter,
        collapse_score,
    })
}
