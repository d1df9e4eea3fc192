//! k-means with k-means++ seeding, and normalized mutual information.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// `k` rows of `dim` values.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Mean squared distance of each point to its centroid.
    pub distortion: f64,
    /// Distortion after the assignment step of every Lloyd iteration.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (lowest index on ties) and its squared distance.
fn nearest(p: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(p, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm from a seeded k-means++ start. Stops when assignments
/// stop changing or after `iters` iterations. Empty clusters keep their
/// previous centroid, which preserves the monotone decrease of distortion.
pub fn kmeans(points: &[f64], dim: usize, k: usize, seed: u64, iters: usize) -> Result<KMeans> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!("{} values are not rows of width {dim}", points.len())));
    }
    let n = points.len() / dim;
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("k={k} must be in 1..={n}")));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = row(first).to_vec();
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive mass")
        } else {
            // every point coincides with a centroid: take an unused index
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[pick] = true;
        let c = row(pick).to_vec();
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(row(i), &c));
        }
        centroids.extend(c);
    }

    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..iters.max(1) {
        let mut changed = false;
        let mut total = 0.0;
        for (i, slot) in assignments.iter_mut().enumerate() {
            let (c, d) = nearest(row(i), &centroids, dim);
            total += d;
            if *slot != c {
                *slot = c;
                changed = true;
            }
        }
        let distortion = total / n as f64;
        if let Some(&prev) = history.last() {
            assert!(distortion <= prev * (1.0 + 1e-12) + 1e-300, "k-means distortion increased: {prev} -> {distortion}");
        }
        history.push(distortion);
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    // distortion against the final centroids
    let distortion = (0..n).map(|i| sq_dist(row(i), &centroids[assignments[i] * dim..(assignments[i] + 1) * dim])).sum::<f64>() / n as f64;
    Ok(KMeans { centroids, assignments, distortion, history })
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts.filter(|&c| c > 0).map(|c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// `2 I(U;V) / (H(U) + H(V))` in nats; defined as 1 when both entropies vanish.
pub fn nmi<A: Ord + Copy, B: Ord + Copy>(u: &[A], v: &[B]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("{} assignments vs {} labels", u.len(), v.len())));
    }
    if u.is_empty() {
        return Err(Error::Empty("nmi inputs"));
    }
    let n = u.len() as f64;
    let mut cu: BTreeMap<A, usize> = BTreeMap::new();
    let mut cv: BTreeMap<B, usize> = BTreeMap::new();
    let mut joint: BTreeMap<(A, B), usize> = BTreeMap::new();
    for (&a, &b) in u.iter().zip(v) {
        *cu.entry(a).or_default() += 1;
        *cv.entry(b).or_default() += 1;
        *joint.entry((a, b)).or_default() += 1;
    }
    let hu = entropy(cu.values().copied(), n);
    let hv = entropy(cv.values().copied(), n);
    if hu + hv == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (&(a, b), &c) in &joint {
        let pab = c as f64 / n;
        mi += pab * (pab * n * n / (cu[&a] as f64 * cv[&b] as f64)).ln();
    }
    Ok((2.0 * mi / (hu + hv)).clamp(0.0, 1.0))
}
