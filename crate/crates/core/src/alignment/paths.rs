//! Viterbi and forward-backward over monotone alignments, plus the
//! brute-force enumerator used as their oracle.

use crate::alignment::{AlignmentPath, Occupancy, ScoreMatrix};
use crate::error::{Error, Result};
use crate::math::{impossible, is_impossible, log_add_exp, Real};

/// Largest `M` accepted by [`enumerate_paths`].
pub const MAX_ORACLE_M: usize = 16;

pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}

/// Every valid alignment of `m` latents to `k` predictions, in lexicographic
/// order of the assignment vector.
pub fn enumerate_paths(k: usize, m: usize) -> Result<Vec<AlignmentPath>> {
    if k == 0 || k > m {
        return Err(Error::Invalid(format!("need 1 <= K <= M, got K={k}, M={m}")));
    }
    if m > MAX_ORACLE_M {
        return Err(Error::Invalid(format!("M={m} exceeds oracle limit {MAX_ORACLE_M}")));
    }
    fn rec(k: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<AlignmentPath>) {
        let col = cur.len();
        if col == m {
            if *cur.last().unwrap() + 1 == k {
                out.push(AlignmentPath::from_unchecked(cur.clone()));
            }
            return;
        }
        let last = *cur.last().unwrap();
        // stay, then advance
        for next in [last, last + 1] {
            let remaining = m - col - 1;
            if next < k && k - 1 - next <= remaining {
                cur.push(next);
                rec(k, m, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(k, m, &mut vec![0], &mut out);
    Ok(out)
}

/// Rows reachable at column `m`: `k <= m` and enough columns remain to reach
/// the last prediction.
#[inline]
fn band(k: usize, m: usize, col: usize) -> std::ops::RangeInclusive<usize> {
    let lo = (k + col).saturating_sub(m);
    let hi = col.min(k - 1);
    lo..=hi
}

/// Highest-scoring alignment and its score.
///
/// When the two predecessors of a cell tie, the one on the same prediction
/// wins, so among equal-scoring paths the one that advances earliest is
/// returned.
pub fn best_path<T: Real>(scores: &ScoreMatrix<T>) -> (AlignmentPath, T) {
    let (k, m) = (scores.k(), scores.m());
    let mut delta = vec![impossible::<T>(); k * m];
    // true when the predecessor is on the same row
    let mut stay = vec![false; k * m];
    delta[0] = scores.get(0, 0);
    for col in 1..m {
        for row in band(k, m, col) {
            let same = delta[row * m + col - 1];
            let diag = if row > 0 { delta[(row - 1) * m + col - 1] } else { impossible() };
            let (best, from_same) = if !is_impossible(same) && (is_impossible(diag) || same >= diag) {
                (same, true)
            } else {
                (diag, false)
            };
            delta[row * m + col] = scores.get(row, col) + best;
            stay[row * m + col] = from_same;
        }
    }
    let mut assignment = vec![0; m];
    let mut row = k - 1;
    for col in (0..m).rev() {
        assignment[col] = row;
        if col > 0 && !stay[row * m + col] {
            row -= 1;
        }
    }
    (AlignmentPath::from_unchecked(assignment), delta[k * m - 1])
}

/// `ln Σ_paths exp(Σ_m L[path(m)][m])` and the cell occupancy, which is the
/// gradient of that value with respect to `L`.
pub fn expected_path_score<T: Real>(scores: &ScoreMatrix<T>) -> (T, Occupancy<T>) {
    let (k, m) = (scores.k(), scores.m());
    if k == 1 || k == m {
        // a single path: exact sum and a 0/1 occupancy
        let path: Vec<usize> = if k == 1 { vec![0; m] } else { (0..m).collect() };
        let mut occ = vec![T::zero(); k * m];
        let mut total = T::zero();
        for (col, &row) in path.iter().enumerate() {
            total = scores.get(row, col) + total;
            occ[row * m + col] = T::one();
        }
        return (total, Occupancy::new(k, m, occ));
    }

    let mut alpha = vec![impossible::<T>(); k * m];
    alpha[0] = scores.get(0, 0);
    for col in 1..m {
        for row in band(k, m, col) {
            let same = alpha[row * m + col - 1];
            let diag = if row > 0 { alpha[(row - 1) * m + col - 1] } else { impossible() };
            alpha[row * m + col] = scores.get(row, col) + log_add_exp(same, diag);
        }
    }
    let total = alpha[k * m - 1];

    let mut beta = vec![impossible::<T>(); k * m];
    beta[k * m - 1] = T::zero();
    for col in (0..m - 1).rev() {
        for row in band(k, m, col) {
            let same = beta[row * m + col + 1];
            let same = if is_impossible(same) { same } else { same + scores.get(row, col + 1) };
            let down = if row + 1 < k { beta[(row + 1) * m + col + 1] } else { impossible() };
            let down = if is_impossible(down) { down } else { down + scores.get(row + 1, col + 1) };
            beta[row * m + col] = log_add_exp(same, down);
        }
    }

    let mut occ = vec![T::zero(); k * m];
    for col in 0..m {
        for row in band(k, m, col) {
            let i = row * m + col;
            if !is_impossible(alpha[i]) && !is_impossible(beta[i]) {
                occ[i] = (alpha[i] + beta[i] - total).exp();
            }
        }
    }
    (total, Occupancy::new(k, m, occ))
}
