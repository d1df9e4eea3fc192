//! Contrastive score matrices and monotone alignment of `K` predictions to
//! `M` upcoming latents.
//!
//! Entry `L[k][m]` of a [`ScoreMatrix`] is the log of the softmax probability
//! that prediction `k` picks latent `t + m` out of `{z_{t+m}} ∪ negatives`.
//! An [`AlignmentPath`] assigns every latent to one prediction, monotonically,
//! starting at prediction 0 and ending at prediction `K - 1`; there are
//! `C(M-1, K-1)` of them. Indices are zero-based throughout.

mod blank;
mod loss;
mod paths;

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::math::{gemm, log_add_exp, logsumexp_nonempty, Real, Tensor, View};

pub use blank::{ctc_blank_trick_score, BlankTrick};
pub use loss::{
    acpc_loss, contrastive_loss, cpc_loss, sample_negatives, ContrastiveSpec, FrameRef, LossKind,
    LossOutput, LossStats, NegativePlan, NegativeSet,
};
pub use paths::{best_path, binomial, enumerate_paths, expected_path_score, MAX_ORACLE_M};

/// `K x M` matrix of log contrastive scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix<T> {
    k: usize,
    m: usize,
    data: Vec<T>,
}

impl<T: Real> ScoreMatrix<T> {
    /// Wraps row-major log scores. Entries need only be finite; matrices
    /// produced by [`score_matrix`] are additionally non-positive.
    pub fn new(k: usize, m: usize, data: Vec<T>) -> Result<Self> {
        if k == 0 || k > m {
            return Err(Error::Invalid(format!("need 1 <= K <= M, got K={k}, M={m}")));
        }
        if data.len() != k * m {
            return Err(shape_err(format!("score matrix {k}x{m} needs {} entries", k * m)));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score matrix entry".into()));
        }
        Ok(Self { k, m, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(shape_err("ragged score matrix"));
        }
        Self::new(rows.len(), m, rows.concat())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, k: usize, m: usize) -> T {
        self.data[k * self.m + m]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Adds `offsets[m]` to every entry of column `m`.
    pub fn shift_columns(&self, offsets: &[T]) -> Self {
        let mut data = self.data.clone();
        for (i, v) in data.iter_mut().enumerate() {
            *v = *v + offsets[i % self.m];
        }
        Self { k: self.k, m: self.m, data }
    }

    /// CSV dump, one row per prediction.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for k in 0..self.k {
            let row: Vec<String> = (0..self.m).map(|m| format!("{}", self.get(k, m))).collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }
}

/// Monotone assignment of latents to predictions: `assignment[m]` is the
/// prediction aligned with latent `m`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AlignmentPath {
    assignment: Vec<usize>,
}

impl AlignmentPath {
    /// Validates the path constraints for `k` predictions.
    pub fn new(assignment: Vec<usize>, k: usize) -> Result<Self> {
        let ok = !assignment.is_empty()
            && assignment[0] == 0
            && *assignment.last().unwrap() + 1 == k
            && assignment.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1);
        if !ok {
            return Err(Error::Invalid(format!("not a valid alignment path for K={k}: {assignment:?}")));
        }
        Ok(Self { assignment })
    }

    pub(crate) fn from_unchecked(assignment: Vec<usize>) -> Self {
        Self { assignment }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// `Σ_m L[path(m)][m]`, accumulated in column order.
    pub fn score<T: Real>(&self, scores: &ScoreMatrix<T>) -> T {
        self.assignment
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (m, &k)| acc + scores.get(k, m))
    }
}

/// Posterior probability that the alignment visits each cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Occupancy<T> {
    k: usize,
    m: usize,
    data: Vec<T>,
}

impl<T: Real> Occupancy<T> {
    pub(crate) fn new(k: usize, m: usize, data: Vec<T>) -> Self {
        Self { k, m, data }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, k: usize, m: usize) -> T {
        self.data[k * self.m + m]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn column_sum(&self, m: usize) -> T {
        (0..self.k).map(|k| self.get(k, m)).sum()
    }

    /// CSV with header `k,m,occupancy`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,m,occupancy\n");
        for k in 0..self.k {
            for m in 0..self.m {
                let _ = writeln!(s, "{k},{m},{}", self.get(k, m));
            }
        }
        s
    }
}

/// Dot products a score block needs per anchor position: `K` predictions
/// against `M` futures and `N` negatives.
pub fn count_score_evaluations(k: usize, m: usize, n: usize) -> Result<u64> {
    if k > m {
        return Err(Error::Invalid(format!("K={k} exceeds M={m}")));
    }
    Ok((k * (m + n)) as u64)
}

/// Intermediate values of one anchor's scores, reused by the loss gradient.
pub(crate) struct ScoreBlock<T> {
    pub log_scores: Vec<T>,
    /// `ln(e^{pos} + Σ_n e^{neg_n})` per cell.
    pub denom: Vec<T>,
    /// Negative dot products, `[K, N]`.
    pub neg: Vec<T>,
    /// `ln Σ_n e^{neg_n}` per prediction.
    pub lse_neg: Vec<T>,
}

/// Scores `K` predictions (flattened `[K, D]`) against `M` futures and `N`
/// negatives, both row-major `[_, D]`. Negative dot products are computed
/// once per prediction and shared by all `M` futures.
pub(crate) fn score_block<T: Real>(
    predictions: &[T],
    dim: usize,
    futures: &[T],
    negatives: &[T],
    counter: &mut u64,
) -> ScoreBlock<T> {
    let k = predictions.len() / dim;
    let m = futures.len() / dim;
    let n = negatives.len() / dim;
    let p = View::rows(predictions, dim);
    let mut neg = vec![T::zero(); k * n];
    gemm(k, dim, n, p, View::cols(negatives, dim), T::zero(), &mut neg);
    let mut pos = vec![T::zero(); k * m];
    gemm(k, dim, m, p, View::cols(futures, dim), T::zero(), &mut pos);
    let lse_neg: Vec<T> = neg.chunks_exact(n).map(logsumexp_nonempty).collect();
    let mut denom = vec![T::zero(); k * m];
    for (i, (d, s)) in denom.iter_mut().zip(pos.iter_mut()).enumerate() {
        *d = log_add_exp(*s, lse_neg[i / m]);
        *s = *s - *d;
    }
    *counter += (k * (m + n)) as u64;
    ScoreBlock { log_scores: pos, denom, neg, lse_neg }
}

/// Contrastive log scores of predictions `[K, D]` against futures `[M, D]`
/// and a shared negative set `[N, D]`.
///
/// `counter` is incremented by the number of dot products evaluated.
pub fn score_matrix<T: Real>(
    predictions: &Tensor<T>,
    futures: &Tensor<T>,
    negatives: &Tensor<T>,
    counter: &mut u64,
) -> Result<ScoreMatrix<T>> {
    let (k, d) = predictions.dims2()?;
    let (m, df) = futures.dims2()?;
    let (n, dn) = negatives.dims2()?;
    if df != d || dn != d {
        return Err(shape_err(format!("latent dims differ: predictions {d}, futures {df}, negatives {dn}")));
    }
    if k == 0 || k > m {
        return Err(Error::Invalid(format!("need 1 <= K <= M, got K={k}, M={m}")));
    }
    if n == 0 {
        return Err(Error::Invalid("at least one negative is required".into()));
    }
    let block = score_block(predictions.data(), d, futures.data(), negatives.data(), counter);
    ScoreMatrix::new(k, m, block.log_scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::dot;
    use approx::assert_abs_diff_eq;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn zero_dots_give_uniform_scores() {
        let p = t(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let f = t(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let neg = t(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let mut c = 0;
        let s = score_matrix(&p, &f, &neg, &mut c).unwrap();
        for &v in s.data() {
            assert_abs_diff_eq!(v, (0.25f64).ln(), epsilon = 1e-15);
        }
        assert_eq!(c, 2 * (3 + 3));
    }

    #[test]
    fn single_cell_three_fifths() {
        // <p, z> = ln 3, both negatives dot to 0 -> s = 3 / (3 + 2)
        let p = t(&[vec![3f64.ln(), 0.0]]);
        let f = t(&[vec![1.0, 0.0]]);
        let neg = t(&[vec![0.0, 1.0], vec![0.0, -1.0]]);
        let mut c = 0;
        let s = score_matrix(&p, &f, &neg, &mut c).unwrap();
        assert_abs_diff_eq!(s.get(0, 0).exp(), 0.6, epsilon = 1e-15);
    }

    #[test]
    fn softmax_slots_sum_to_one() {
        let p = t(&[vec![0.3, -1.2, 0.5]]);
        let f = t(&[vec![1.0, 0.5, -0.5]]);
        let neg = t(&[vec![0.2, 0.1, 0.9], vec![-1.0, 0.4, 0.0], vec![0.3, 0.3, 0.3]]);
        let mut c = 0;
        let s = score_matrix(&p, &f, &neg, &mut c).unwrap();
        let pos = s.get(0, 0).exp();
        assert!(pos > 0.0 && pos < 1.0);
        let denom = (dot(p.row(0), f.row(0))).exp()
            + (0..3).map(|i| dot(p.row(0), neg.row(i)).exp()).sum::<f64>();
        let negs: f64 = (0..3).map(|i| dot(p.row(0), neg.row(i)).exp() / denom).sum();
        assert_abs_diff_eq!(pos + negs, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let p = t(&[vec![0.0, 0.0]]);
        let f = t(&[vec![0.0, 0.0, 0.0]]);
        let neg = t(&[vec![0.0, 0.0]]);
        assert!(matches!(score_matrix(&p, &f, &neg, &mut 0), Err(Error::Shape(_))));
    }

    #[test]
    fn evaluation_counts() {
        assert_eq!(count_score_evaluations(12, 12, 128).unwrap(), 1680);
        assert_eq!(count_score_evaluations(8, 12, 128).unwrap(), 1120);
        assert_eq!(count_score_evaluations(4, 12, 128).unwrap(), 560);
        assert!(count_score_evaluations(5, 4, 1).is_err());
    }

    #[test]
    fn path_validation() {
        assert!(AlignmentPath::new(vec![0, 1, 1], 2).is_ok());
        assert!(AlignmentPath::new(vec![0, 2], 3).is_err());
        assert!(AlignmentPath::new(vec![1, 1], 2).is_err());
        assert!(AlignmentPath::new(vec![0, 0], 2).is_err());
    }
}
