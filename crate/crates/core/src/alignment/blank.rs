//! Emulation of the no-blank alignment with a standard CTC forward pass.
//!
//! The score matrix gets an extra blank row pinned at a large negative log
//! score, each column is log-softmax normalized over the `K + 1` rows, and the
//! target label sequence is `0, 1, ..., K - 1`. Blank paths then carry
//! negligible mass and the CTC log-likelihood plus the column normalizers
//! recovers the expected path score.

use crate::alignment::ScoreMatrix;
use crate::math::{impossible, is_impossible, logsumexp_nonempty, Real};

#[derive(Clone, Debug)]
pub struct BlankTrick<T> {
    /// CTC log-likelihood under the normalized extended matrix.
    pub score: T,
    /// Column log-normalizers `Z_m`.
    pub column_normalizers: Vec<T>,
    /// Total posterior occupancy of blank states, summed over columns.
    pub blank_mass: T,
}

impl<T: Real> BlankTrick<T> {
    /// `score + Σ_m Z_m`, comparable with the expected path score.
    pub fn unnormalized(&self) -> T {
        self.column_normalizers.iter().fold(self.score, |acc, &z| acc + z)
    }
}

pub fn ctc_blank_trick_score<T: Real>(scores: &ScoreMatrix<T>) -> BlankTrick<T> {
    let (k, m) = (scores.k(), scores.m());
    let blank = T::blank_log_score();
    let states = 2 * k + 1;

    let column_normalizers: Vec<T> = (0..m)
        .map(|col| {
            let mut column: Vec<T> = (0..k).map(|row| scores.get(row, col)).collect();
            column.push(blank);
            logsumexp_nonempty(&column)
        })
        .collect();
    // even states are blanks, odd state s carries label (s - 1) / 2
    let emit = |s: usize, col: usize| -> T {
        let raw = if s.is_multiple_of(2) { blank } else { scores.get((s - 1) / 2, col) };
        raw - column_normalizers[col]
    };

    let mut alpha = vec![impossible::<T>(); states * m];
    alpha[0] = emit(0, 0);
    alpha[m] = emit(1, 0);
    for col in 1..m {
        for s in 0..states {
            let mut acc = [impossible::<T>(); 3];
            acc[0] = alpha[s * m + col - 1];
            if s >= 1 {
                acc[1] = alpha[(s - 1) * m + col - 1];
            }
            // skipping the blank between two distinct labels
            if s % 2 == 1 && s >= 3 {
                acc[2] = alpha[(s - 2) * m + col - 1];
            }
            let prev = logsumexp_nonempty(&acc);
            if !is_impossible(prev) {
                alpha[s * m + col] = emit(s, col) + prev;
            }
        }
    }
    let last = |v: &[T], s: usize| v[s * m + m - 1];
    let score = logsumexp_nonempty(&[last(&alpha, states - 1), last(&alpha, states - 2)]);

    let mut beta = vec![impossible::<T>(); states * m];
    beta[(states - 1) * m + m - 1] = T::zero();
    beta[(states - 2) * m + m - 1] = T::zero();
    for col in (0..m - 1).rev() {
        for s in 0..states {
            let mut acc = [impossible::<T>(); 3];
            let mut next = |slot: usize, target: usize| {
                let b = beta[target * m + col + 1];
                if !is_impossible(b) {
                    acc[slot] = b + emit(target, col + 1);
                }
            };
            next(0, s);
            if s + 1 < states {
                next(1, s + 1);
            }
            if s % 2 == 1 && s + 2 < states {
                next(2, s + 2);
            }
            beta[s * m + col] = logsumexp_nonempty(&acc);
        }
    }

    let mut blank_mass = T::zero();
    for s in (0..states).step_by(2) {
        for col in 0..m {
            let (a, b) = (alpha[s * m + col], beta[s * m + col]);
            if !is_impossible(a) && !is_impossible(b) {
                blank_mass = blank_mass + (a + b - score).exp();
            }
        }
    }

    BlankTrick { score, column_normalizers, blank_mass }
}
