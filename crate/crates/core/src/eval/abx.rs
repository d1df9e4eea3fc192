//! ABX discriminability over ground-truth segments with DTW distances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FeatureTable;
use crate::error::{Error, Result};

pub const ABX_TRIPLES: usize = 2000;

/// Angular distance in `[0, 1]`: the angle between the vectors over pi.
/// A zero vector is treated as orthogonal to everything, giving 0.5.
pub fn angular_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.5;
    }
    // half-angle form stays accurate near 0 and pi, unlike acos of the cosine
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt()) / std::f64::consts::PI
}

/// Mean frame distance along the DTW path of least total cost (steps right,
/// down, diagonal). Among equal-cost paths the shortest is used.
pub fn dtw_distance(a: &[&[f64]], b: &[&[f64]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("DTW segment"));
    }
    let (n, m) = (a.len(), b.len());
    // (total cost, path length)
    let mut acc = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let d = angular_distance(a[i], b[j]);
            let prev = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut best = (f64::INFINITY, usize::MAX);
                let mut consider = |c: (f64, usize)| {
                    if c.0 < best.0 || (c.0 == best.0 && c.1 < best.1) {
                        best = c;
                    }
                };
                if i > 0 {
                    consider(acc[(i - 1) * m + j]);
                }
                if j > 0 {
                    consider(acc[i * m + j - 1]);
                }
                if i > 0 && j > 0 {
                    consider(acc[(i - 1) * m + j - 1]);
                }
                best
            };
            acc[i * m + j] = (prev.0 + d, prev.1 + 1);
        }
    }
    let (cost, len) = acc[n * m - 1];
    Ok(cost / len as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AbxResult {
    pub within: f64,
    pub across: f64,
}

#[derive(Clone, Debug)]
struct Instance {
    rows: std::ops::Range<usize>,
    label: u16,
    channel: u16,
}

fn instances(table: &FeatureTable) -> Vec<Instance> {
    let mut out = Vec::new();
    for range in table.sequence_ranges() {
        let mut start = range.start;
        for i in range.start + 1..=range.end {
            if i == range.end || table.labels[i] != table.labels[start] {
                out.push(Instance { rows: start..i, label: table.labels[start], channel: table.channel[start] });
                start = i;
            }
        }
    }
    out
}

/// `(A, B, X)` candidates for one condition.
struct Condition<'a> {
    inst: &'a [Instance],
    across: bool,
}

impl Condition<'_> {
    fn xs(&self, a: usize) -> Vec<usize> {
        let ia = &self.inst[a];
        (0..self.inst.len())
            .filter(|&x| {
                let ix = &self.inst[x];
                x != a && ix.label == ia.label && (ix.channel != ia.channel) == self.across
            })
            .collect()
    }

    fn bs(&self, a: usize) -> Vec<usize> {
        let ia = &self.inst[a];
        (0..self.inst.len()).filter(|&b| self.inst[b].label != ia.label && self.inst[b].channel == ia.channel).collect()
    }
}

/// ABX error with `count` seeded triples per condition. A and B always
/// share a channel; X shares A's label and, for the "within" condition,
/// its channel, while for "across" it comes from another channel.
/// Each triple scores 1 if `d(A,X) > d(B,X)`, 0.5 on a tie, else 0.
pub fn abx_error(table: &FeatureTable, seed: u64, count: usize) -> Result<AbxResult> {
    let inst = instances(table);
    let rows = |i: &Instance| -> Vec<&[f64]> { i.rows.clone().map(|r| table.row(r)).collect() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = |across: bool| -> Result<f64> {
        let cond = Condition { inst: &inst, across };
        let anchors: Vec<(usize, Vec<usize>, Vec<usize>)> = (0..inst.len())
            .map(|a| (a, cond.xs(a), cond.bs(a)))
            .filter(|(_, xs, bs)| !xs.is_empty() && !bs.is_empty())
            .collect();
        if anchors.is_empty() {
            let which = if across { "across" } else { "within" };
            return Err(Error::Insufficient(format!("no valid ABX triple for the {which}-channel condition")));
        }
        let mut error = 0.0;
        for _ in 0..count {
            let (a, xs, bs) = &anchors[rng.gen_range(0..anchors.len())];
            let x = xs[rng.gen_range(0..xs.len())];
            let b = bs[rng.gen_range(0..bs.len())];
            let rx = rows(&inst[x]);
            let dax = dtw_distance(&rows(&inst[*a]), &rx)?;
            let dbx = dtw_distance(&rows(&inst[b]), &rx)?;
            error += if dax > dbx {
                1.0
            } else if dax == dbx {
                0.5
            } else {
                0.0
            };
        }
        Ok(error / count as f64)
    };
    if count == 0 {
        return Err(Error::Invalid("ABX needs at least one triple".into()));
    }
    let within = run(false)?;
    let across = run(true)?;
    Ok(AbxResult { within, across })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimum-cost monotone path by exhaustive enumeration; ties go to the shortest.
    fn brute_dtw(a: &[&[f64]], b: &[&[f64]]) -> f64 {
        fn walk(i: usize, j: usize, cost: f64, len: usize, a: &[&[f64]], b: &[&[f64]], best: &mut (f64, usize)) {
            let cost = cost + angular_distance(a[i], b[j]);
            let len = len + 1;
            if i == a.len() - 1 && j == b.len() - 1 {
                if cost < best.0 || (cost == best.0 && len < best.1) {
                    *best = (cost, len);
                }
                return;
            }
            if i + 1 < a.len() {
                walk(i + 1, j, cost, len, a, b, best);
            }
            if j + 1 < b.len() {
                walk(i, j + 1, cost, len, a, b, best);
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                walk(i + 1, j + 1, cost, len, a, b, best);
            }
        }
        let mut best = (f64::INFINITY, 0);
        walk(0, 0, 0.0, 0, a, b, &mut best);
        best.0 / best.1 as f64
    }

    fn as_rows(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(|r| r.as_slice()).collect()
    }

    #[test]
    fn angular_distance_values() {
        assert_eq!(angular_distance(&[1.0, 0.0], &[2.0, 0.0]), 0.0);
        assert!((angular_distance(&[1.0, 0.0], &[0.0, 1.0]) - 0.5).abs() < 1e-15);
        assert!((angular_distance(&[1.0, 0.0], &[-1.0, 0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(angular_distance(&[0.0, 0.0], &[1.0, 0.0]), 0.5);
    }

    #[test]
    fn dtw_matches_brute_force_on_small_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(1..=4);
            let m = rng.gen_range(1..=4);
            let a: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let b: Vec<Vec<f64>> = (0..m).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let fast = dtw_distance(&as_rows(&a), &as_rows(&b)).unwrap();
            assert!((fast - brute_dtw(&as_rows(&a), &as_rows(&b))).abs() < 1e-12);
        }
    }

    #[test]
    fn three_segment_toy_by_hand() {
        // A = X exactly; B differs by 90 degrees on every frame
        let x = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        let a = x.clone();
        let b = vec![vec![0.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0]];
        assert_eq!(dtw_distance(&as_rows(&a), &as_rows(&x)).unwrap(), 0.0);
        let dbx = dtw_distance(&as_rows(&b), &as_rows(&x)).unwrap();
        // b0-x0 .5, b0-x1 .25, b1-x0 .25, b1-x1 .5, b2-x0 .75, b2-x1 .5
        // cheapest: (b0,x0) (b1,x0) (b2,x1) = 0.5 + 0.25 + 0.5 over 3 frames
        assert!((dbx - 1.25 / 3.0).abs() < 1e-12, "{dbx}");
        assert_eq!(dbx, brute_dtw(&as_rows(&b), &as_rows(&x)));
    }

    fn table_from(seqs: &[(u16, Vec<u16>)], feature: impl Fn(u16, usize) -> Vec<f64>) -> FeatureTable {
        let mut rows = Vec::new();
        let (mut labels, mut seq, mut chan, mut pos) = (vec![], vec![], vec![], vec![]);
        for (s, (c, ls)) in seqs.iter().enumerate() {
            for (t, &l) in ls.iter().enumerate() {
                rows.extend(feature(l, t));
                labels.push(l);
                seq.push(s as u32);
                chan.push(*c);
                pos.push(t as u32);
            }
        }
        let dim = rows.len() / labels.len();
        FeatureTable::new(dim, rows, labels, seq, chan, pos).unwrap()
    }

    #[test]
    fn one_hot_labels_give_zero_error() {
        let seqs = vec![
            (0, vec![0, 0, 1, 1, 1, 2, 2, 0, 0]),
            (0, vec![1, 1, 2, 2, 0, 0, 0, 1]),
            (1, vec![2, 2, 0, 1, 1, 1, 2, 2]),
            (1, vec![0, 0, 0, 2, 1, 1, 0]),
        ];
        let t = table_from(&seqs, |l, _| (0..3).map(|j| if j == l as usize { 1.0 } else { 0.0 }).collect());
        let r = abx_error(&t, 3, 500).unwrap();
        assert_eq!(r, AbxResult { within: 0.0, across: 0.0 });
    }

    #[test]
    fn identical_features_count_as_ties() {
        let seqs = vec![(0, vec![0, 0, 1, 1, 0, 1]), (1, vec![1, 0, 0, 1, 1, 0])];
        let t = table_from(&seqs, |_, _| vec![1.0, 2.0]);
        assert_eq!(abx_error(&t, 0, 100).unwrap(), AbxResult { within: 0.5, across: 0.5 });
    }

    #[test]
    fn insufficient_instances() {
        let t = table_from(&[(0, vec![0, 0, 1, 1])], |l, _| vec![l as f64, 1.0]);
        assert!(matches!(abx_error(&t, 0, 10), Err(Error::Insufficient(_))));
        let t = table_from(&[(0, vec![0, 1, 0, 1]), (0, vec![1, 0])], |l, _| vec![l as f64, 1.0]);
        // within works, across has no second channel
        assert!(matches!(abx_error(&t, 0, 10), Err(Error::Insufficient(_))));
    }
}
