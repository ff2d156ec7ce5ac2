//! k-means (Lloyd iterations, k-means++ seeding) and external clustering
//! scores.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::squared_distance;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

const MAX_LLOYD_ITERS: usize = 300;

fn plus_plus_seeds<P: AsRef<[f64]>>(points: &[P], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].as_ref().to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p.as_ref(), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = points[next].as_ref().to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p.as_ref(), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = squared_distance(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn lloyd<P: AsRef<[f64]>>(points: &[P], mut centroids: Vec<Vec<f64>>) -> KMeans {
    let n = points.len();
    let k = centroids.len();
    let dim = centroids[0].len();
    let mut assignments = vec![usize::MAX; n];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p.as_ref(), &centroids);
            dists[i] = d;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p.as_ref()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Empty cluster: re-seed from the point farthest from its centroid.
                let far = (0..n)
                    .max_by(|a, b| dists[*a].total_cmp(&dists[*b]).then(b.cmp(a)))
                    .unwrap();
                centroids[c] = points[far].as_ref().to_vec();
                dists[far] = 0.0;
                assignments[far] = c;
                changed = true;
            } else {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &c)| squared_distance(p.as_ref(), &centroids[c]))
        .sum();
    KMeans {
        assignments,
        centroids,
        inertia,
    }
}

/// Best-inertia k-means over `restarts` k-means++ initializations.
pub fn kmeans<P: AsRef<[f64]>>(points: &[P], k: usize, restarts: usize, rng: &mut impl Rng) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::Config(format!("k = {k} with {} points", points.len())));
    }
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(points, plus_plus_seeds(points, k, rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

fn contingency(clusters: &[usize], labels: &[u8]) -> BTreeMap<(usize, u8), usize> {
    let mut m = BTreeMap::new();
    for (c, l) in clusters.iter().zip(labels) {
        *m.entry((*c, *l)).or_insert(0) += 1;
    }
    m
}

/// `(1/N) sum_c max_j |c ∩ class_j|`.
pub fn purity(clusters: &[usize], labels: &[u8]) -> f64 {
    if clusters.is_empty() {
        return 0.0;
    }
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for ((c, _), n) in contingency(clusters, labels) {
        let b = best.entry(c).or_insert(0);
        *b = (*b).max(n);
    }
    best.values().sum::<usize>() as f64 / clusters.len() as f64
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|c| *c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `2 I(C; L) / (H(C) + H(L))` with natural
/// logarithms. Two single-block partitions score 1.
pub fn nmi(clusters: &[usize], labels: &[u8]) -> f64 {
    let n = clusters.len() as f64;
    if clusters.is_empty() {
        return 0.0;
    }
    let mut cc: BTreeMap<usize, usize> = BTreeMap::new();
    let mut lc: BTreeMap<u8, usize> = BTreeMap::new();
    for (c, l) in clusters.iter().zip(labels) {
        *cc.entry(*c).or_insert(0) += 1;
        *lc.entry(*l).or_insert(0) += 1;
    }
    let hc = entropy(cc.values().copied(), n);
    let hl = entropy(lc.values().copied(), n);
    if hc + hl == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for ((c, l), nij) in contingency(clusters, labels) {
        let pij = nij as f64 / n;
        mi += pij * (pij * n * n / (cc[&c] as f64 * lc[&l] as f64)).ln();
    }
    (2.0 * mi / (hc + hl)).clamp(0.0, 1.0)
}

/// k-means with 10 restarts, scored against `labels`.
pub fn kmeans_purity_nmi<P: AsRef<[f64]>>(
    points: &[P],
    labels: &[u8],
    k: usize,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    if points.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            actual: labels.len(),
        });
    }
    let km = kmeans(points, k, 10, rng)?;
    Ok((purity(&km.assignments, labels), nmi(&km.assignments, labels)))
}
