//! Frame-wise linear probe: multinomial logistic regression on frozen features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FeatureTable;
use crate::error::{Error, Result};

pub const PROBE_LEARNING_RATE: f64 = 0.5;
pub const PROBE_EPOCHS: usize = 200;
pub const PROBE_TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Trains a softmax classifier by full-batch gradient descent on a seeded
/// 80/20 frame split and reports exact-match accuracy on both parts.
///
/// Features are standardized with the training split's per-dimension mean
/// and standard deviation so that one learning rate suits every feature scale.
pub fn linear_probe(table: &FeatureTable, seed: u64, epochs: usize) -> Result<ProbeResult> {
    linear_probe_with_labels(table, &table.labels, seed, epochs)
}

/// Same probe against substitute labels, used for shuffled-label controls.
pub fn linear_probe_with_labels(table: &FeatureTable, labels: &[u16], seed: u64, epochs: usize) -> Result<ProbeResult> {
    let n = table.len();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} frames", labels.len())));
    }
    let mut classes: Vec<u16> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Insufficient("linear probe needs at least two classes".into()));
    }
    let class_of = |l: u16| classes.binary_search(&l).expect("label present");
    let y: Vec<usize> = labels.iter().map(|&l| class_of(l)).collect();
    let a = classes.len();
    let d = table.dim();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * PROBE_TRAIN_FRACTION).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Insufficient(format!("{n} frames are too few for a train/validation split")));
    }
    let (train, val) = order.split_at(n_train);

    let mut mean = vec![0.0; d];
    for &i in train {
        for (m, v) in mean.iter_mut().zip(table.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut sd = vec![0.0; d];
    for &i in train {
        for ((s, v), m) in sd.iter_mut().zip(table.row(i)).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    sd.iter_mut().for_each(|s| {
        let v = (*s / train.len() as f64).sqrt();
        *s = if v > 1e-12 { v } else { 1.0 };
    });
    let x: Vec<f64> = (0..n).flat_map(|i| table.row(i).iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect::<Vec<_>>()).collect();
    let row = |i: usize| &x[i * d..(i + 1) * d];

    // weights [a, d + 1], last column is the bias
    let w_len = d + 1;
    let mut w = vec![0.0; a * w_len];
    let mut grad = vec![0.0; a * w_len];
    let mut probs = vec![0.0; a];
    let scale = 1.0 / train.len() as f64;
    for _ in 0..epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for &i in train {
            logits(&w, row(i), &mut probs);
            softmax_in_place(&mut probs);
            probs[y[i]] -= 1.0;
            for (c, p) in probs.iter().enumerate() {
                let g = &mut grad[c * w_len..(c + 1) * w_len];
                for (gj, xj) in g.iter_mut().zip(row(i)) {
                    *gj += p * xj;
                }
                g[d] += p;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= PROBE_LEARNING_RATE * scale * gi;
        }
    }

    let accuracy = |idx: &[usize]| {
        let mut out = vec![0.0; a];
        let hits = idx
            .iter()
            .filter(|&&i| {
                logits(&w, row(i), &mut out);
                argmax(&out) == y[i]
            })
            .count();
        hits as f64 / idx.len() as f64
    };
    Ok(ProbeResult { train_accuracy: accuracy(train), val_accuracy: accuracy(val) })
}

fn logits(w: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (c, o) in out.iter_mut().enumerate() {
        let wc = &w[c * (d + 1)..(c + 1) * (d + 1)];
        *o = wc[d] + wc[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    v.iter_mut().for_each(|x| *x /= total);
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
