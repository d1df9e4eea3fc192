//! Cosine-similarity statistics, stride-locked periodicity and
//! self-similarity matrices.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FeatureTable;
use crate::data::Reader;
use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 64;
pub const SIMILARITY_MAGIC: &[u8; 8] = b"ACPCSIM1";

/// Cosine similarity, or `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        None
    } else {
        Some((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
    }
}

/// Fixed 64-bin histogram over `[-1, 1]` with summary statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub mean: f64,
    pub median: f64,
}

impl Histogram {
    pub fn from_values(values: &[f64]) -> Self {
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        for &v in values {
            let bin = (((v + 1.0) / 2.0) * HISTOGRAM_BINS as f64).floor() as isize;
            counts[bin.clamp(0, HISTOGRAM_BINS as isize - 1) as usize] += 1;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = match sorted.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => sorted[n / 2],
            n => (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0,
        };
        let mean = if values.is_empty() { f64::NAN } else { values.iter().sum::<f64>() / values.len() as f64 };
        Self { counts, mean, median }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_left(i: usize) -> f64 {
        -1.0 + 2.0 * i as f64 / HISTOGRAM_BINS as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{c}", Self::bin_left(i));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityStats {
    pub consecutive: Histogram,
    pub random: Histogram,
    /// Pairs dropped because a vector had zero norm.
    pub skipped: usize,
}

/// Cosine similarities of (a) every pair of consecutive frames within a
/// sequence and (b) as many seeded random pairs of distinct frames.
pub fn similarity_stats(table: &FeatureTable, seed: u64) -> Result<SimilarityStats> {
    let n = table.len();
    if n < 2 {
        return Err(Error::Insufficient("similarity statistics need at least two frames".into()));
    }
    let mut skipped = 0;
    let mut consecutive = Vec::new();
    let mut pairs = 0;
    for i in 0..n - 1 {
        if table.sequence[i] == table.sequence[i + 1] && table.position[i] + 1 == table.position[i + 1] {
            pairs += 1;
            match cosine(table.row(i), table.row(i + 1)) {
                Some(c) => consecutive.push(c),
                None => skipped += 1,
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = Vec::new();
    for _ in 0..pairs.max(1) {
        let a = rng.gen_range(0..n);
        let mut b = rng.gen_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        match cosine(table.row(a), table.row(b)) {
            Some(c) => random.push(c),
            None => skipped += 1,
        }
    }
    Ok(SimilarityStats { consecutive: Histogram::from_values(&consecutive), random: Histogram::from_values(&random), skipped })
}

/// Mean cosine similarity at each lag `1..=max_lag`, pooled over sequences.
fn lag_profile(table: &FeatureTable, max_lag: usize) -> Vec<f64> {
    let mut sum = vec![0.0; max_lag + 1];
    let mut count = vec![0usize; max_lag + 1];
    for range in table.sequence_ranges() {
        for lag in 1..=max_lag {
            for i in range.start..range.end.saturating_sub(lag) {
                if let Some(c) = cosine(table.row(i), table.row(i + lag)) {
                    sum[lag] += c;
                    count[lag] += 1;
                }
            }
        }
    }
    sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
}

/// Contrast between similarity at lags that are multiples of `period` and
/// at their neighbouring lags, averaged over the multiples up to half the
/// shortest sequence. A stride-locked code scores high; smooth codes score 0.
pub fn stride_periodicity(table: &FeatureTable, period: usize) -> Result<f64> {
    if period < 2 {
        return Err(Error::Invalid(format!("period {period} must be at least 2")));
    }
    let shortest = table.sequence_ranges().map(|r| r.len()).min().ok_or(Error::Empty("feature table"))?;
    if shortest < 4 * period {
        return Err(Error::TooShort(format!("sequence of {shortest} frames, need {} for period {period}", 4 * period)));
    }
    let max_lag = shortest / 2;
    let s = lag_profile(table, max_lag + 1);
    let multiples: Vec<usize> = (1..).map(|j| j * period).take_while(|&l| l <= max_lag).collect();
    let total: f64 = multiples.iter().map(|&l| (s[l] - 0.5 * (s[l - 1] + s[l + 1])).abs()).sum();
    Ok(total / multiples.len() as f64)
}

/// Dot-product self-similarity of one sequence plus its label change points.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub size: usize,
    pub values: Vec<f32>,
    pub boundaries: Vec<u32>,
    pub channel: u16,
}

/// `frames` is `n` rows of `dim` values; `labels` has one entry per row.
pub fn self_similarity_matrix(frames: &[f64], dim: usize, labels: &[u16], channel: u16) -> Result<SimilarityMatrix> {
    if dim == 0 || frames.len() != labels.len() * dim {
        return Err(Error::Shape(format!("{} values for {} frames of width {dim}", frames.len(), labels.len())));
    }
    let n = labels.len();
    let row = |i: usize| &frames[i * dim..(i + 1) * dim];
    let mut values = vec![0.0f32; n * n];
    for i in 0..n {
        for j in i..n {
            let v = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum::<f64>() as f32;
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    let boundaries = (1..n).filter(|&i| labels[i] != labels[i - 1]).map(|i| i as u32).collect();
    Ok(SimilarityMatrix { size: n, values, boundaries, channel })
}

/// Container layout, little-endian: magic `ACPCSIM1`, u32 matrix count; per
/// matrix u32 size, u32 boundary count, u16 channel, u16 reserved = 0,
/// f32 values[size * size] row-major, u32 boundaries[count].
pub fn similarity_to_bytes(matrices: &[SimilarityMatrix]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SIMILARITY_MAGIC);
    out.extend_from_slice(&(matrices.len() as u32).to_le_bytes());
    for m in matrices {
        out.extend_from_slice(&(m.size as u32).to_le_bytes());
        out.extend_from_slice(&(m.boundaries.len() as u32).to_le_bytes());
        out.extend_from_slice(&m.channel.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        m.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        m.boundaries.iter().for_each(|b| out.extend_from_slice(&b.to_le_bytes()));
    }
    out
}

pub fn similarity_from_bytes(bytes: &[u8]) -> Result<Vec<SimilarityMatrix>> {
    let mut r = Reader::new(bytes);
    r.magic(SIMILARITY_MAGIC)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let size = r.u32()? as usize;
        let nb = r.u32()? as usize;
        let channel = r.u16()?;
        r.u16()?;
        let values = r.take(4 * size * size)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let boundaries = r.take(4 * nb)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(SimilarityMatrix { size, values, boundaries, channel });
    }
    if r.remaining() != 0 {
        return Err(Error::Invalid(format!("{} trailing bytes after similarity matrices", r.remaining())));
    }
    Ok(out)
}

pub fn write_similarity(matrices: &[SimilarityMatrix], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, similarity_to_bytes(matrices))?;
    Ok(())
}

pub fn read_similarity(path: impl AsRef<Path>) -> Result<Vec<SimilarityMatrix>> {
    similarity_from_bytes(&fs::read(path)?)
}
